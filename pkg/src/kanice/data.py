"""Dataset ingestion, batching and the named-tensor container format.

Container layout (all integers little-endian)::

    b"KTC1"                 magic
    u64 entry count
    per entry:
        u32 name length, name bytes (UTF-8)
        u8  dtype code (1 = f32, 2 = f64, 3 = u8)
        u8  rank
        u64 extent * rank
        raw row-major payload (little-endian elements)
"""
from __future__ import annotations

import gzip
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import functional
from .rng import Xoshiro256StarStar, derive_seed


class DataError(ValueError):
    pass


class BadMagic(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class LabelOutOfRange(DataError, functional.LabelOutOfRange):
    pass


class DuplicateName(DataError):
    pass


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# classes per dataset; EMNIST defaults to the balanced split
NUM_CLASSES = {"mnist": 10, "fashion-mnist": 10, "emnist": 47, "emnist-balanced": 47,
               "emnist-byclass": 62, "emnist-bymerge": 47, "emnist-letters": 27,
               "emnist-digits": 10, "emnist-mnist": 10, "svhn": 10, "cifar10": 10}


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionMismatch(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionMismatch(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def limit(self, n: int | None, seed: int = 0) -> Dataset:
        """First ``n`` samples after a seeded shuffle (deterministic)."""
        if n is None or n >= len(self):
            return self
        perm = Xoshiro256StarStar(derive_seed(seed, "limit")).permutation(len(self))
        return self.subset(np.sort(perm[:n]))

    def normalized(self, mean, std) -> Dataset:
        mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
        std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
        return Dataset((self.images - mean) / std, self.labels, self.num_classes, self.name)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFile("IDX header truncated")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagic(f"IDX magic {magic:#010x}, expected {expected_magic:#010x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise TruncatedFile("IDX dimension header truncated")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFile(f"IDX payload holds {len(raw) - header} bytes, need {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, *, num_classes: int = 10, name: str = "",
             transpose: bool = False) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped).

    ``transpose`` swaps the two image axes, which EMNIST files need.
    """
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if transpose:
        images = images.transpose(0, 2, 1)
    pixels = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(np.ascontiguousarray(pixels), labels.astype(np.int64), num_classes, name)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (images rank 3, labels rank 1)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(data) if path.suffix == ".gz" else data)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_binary(paths, name: str = "cifar10") -> Dataset:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise TruncatedFile(f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(recs[:, 0].astype(np.int64))
        images.append(recs[:, 1:].reshape(-1, 3, 32, 32))
    pix = np.concatenate(images).astype(np.float32) / 255.0 if images else np.zeros((0, 3, 32, 32), np.float32)
    lab = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    return Dataset(pix, lab, 10, name)


# ---------------------------------------------------------------- container

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
CONTAINER_MAGIC = b"KTC1"


def save_container(path, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
        if dtype not in _DTYPE_CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_container(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CONTAINER_MAGIC:
        raise BadMagic(f"container magic {raw[:4]!r}, expected {CONTAINER_MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFile(f"container ends at byte {len(raw)}, needed {pos + n}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        if name in out:
            raise DuplicateName(f"entry {name!r} appears twice")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise DataError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _CODE_DTYPES[code]
        nbytes = dtype.itemsize * int(np.prod(shape))
        out[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
    return out


def load_container_dataset(path, name: str = "", num_classes: int | None = None) -> Dataset:
    """Dataset stored as a container with ``images`` (u8 or float) and ``labels``."""
    entries = load_container(path)
    try:
        images, labels = entries["images"], entries["labels"]
    except KeyError as exc:
        raise DataError(f"{path}: container needs 'images' and 'labels' entries") from exc
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    images = images.astype(np.float32)
    if images.ndim == 3:
        images = images[:, None]
    labels = labels.astype(np.int64).ravel()
    if num_classes is None:
        num_classes = int(entries["num_classes"].ravel()[0]) if "num_classes" in entries else int(labels.max()) + 1
    return Dataset(images, labels, num_classes, name)


# ---------------------------------------------------------------- batching

def batches(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` minibatches; the last one may be short.

    The shuffled order is a Fisher-Yates permutation driven by xoshiro256**
    seeded from ``(seed, epoch)``, so it is identical on every platform.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(ds)
    if shuffle:
        order = Xoshiro256StarStar(derive_seed(seed, f"data.epoch{epoch}")).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


# ---------------------------------------------------------------- named datasets

DATASETS = ("mnist", "fashion-mnist", "emnist", "emnist-balanced", "emnist-byclass", "emnist-bymerge",
            "emnist-letters", "emnist-digits", "emnist-mnist", "cifar10", "svhn", "container")

def _find(directory: Path, stems) -> Path:
    for stem in stems:
        for candidate in (directory / stem, directory / f"{stem}.gz"):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"none of {list(stems)} (optionally .gz) found in {directory}")


def load_dataset(name: str, data_dir, split: str = "train", emnist_split: str = "balanced") -> Dataset:
    """Load a standard dataset from the files in ``data_dir``.

    mnist / fashion-mnist: the four official IDX files.
    emnist: ``emnist-<split>-{train,test}-{images-idx3,labels-idx1}-ubyte``.
    cifar10: ``data_batch_1..5.bin`` and ``test_batch.bin`` (directly or in
    ``cifar-10-batches-bin/``).
    svhn: ``svhn-{train,test}.ktc`` containers (see scripts/svhn_to_container.py).
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    directory = Path(data_dir)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    key = name.lower().replace("_", "-")
    if key not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if key in ("mnist", "fashion-mnist"):
        prefix = "train" if split == "train" else "t10k"
        return load_idx(_find(directory, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"]),
                        _find(directory, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"]),
                        num_classes=10, name=key)
    if key.startswith("emnist"):
        sub = key.split("-", 1)[1] if "-" in key else emnist_split
        classes = NUM_CLASSES.get(f"emnist-{sub}")
        if classes is None:
            raise ValueError(f"unknown EMNIST split {sub!r}")
        stem = f"emnist-{sub}-{split}"
        # letters labels run 1..26, hence 27 classes
        return load_idx(_find(directory, [f"{stem}-images-idx3-ubyte"]),
                        _find(directory, [f"{stem}-labels-idx1-ubyte"]),
                        num_classes=classes, name=f"emnist-{sub}", transpose=True)
    if key == "cifar10":
        base = directory / "cifar-10-batches-bin" if (directory / "cifar-10-batches-bin").is_dir() else directory
        stems = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        return load_cifar10_binary([_find(base, [s]) for s in stems])
    if key == "svhn":
        return load_container_dataset(_find(directory, [f"svhn-{split}.ktc"]), name="svhn", num_classes=10)
    return load_container_dataset(_find(directory, [f"{split}.ktc"]), name="container")

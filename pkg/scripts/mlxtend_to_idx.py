"""Turn the 5,000-image MNIST sample shipped inside the mlxtend wheel into
IDX files, for a desk proxy when the official MNIST files are unavailable.

    pip download --no-deps mlxtend -d /tmp/mlx
    python scripts/mlxtend_to_idx.py /tmp/mlx/mlxtend-*.whl data/mnist-5k

Writes train-* (4,000 images) and t10k-* (1,000 images) IDX files after a
seeded shuffle.  The official files are drop-in replacements.
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from kanice.data import write_idx
from kanice.rng import Xoshiro256StarStar, derive_seed

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(path: Path) -> np.ndarray:
    if path.suffix == ".whl":
        raw = zipfile.ZipFile(path).read(MEMBER)
    else:
        raw = path.read_bytes()
    text = gzip.decompress(raw)
    return np.loadtxt(io.BytesIO(text), delimiter=",", dtype=np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path, help="mlxtend wheel or mnist_5k.csv.gz")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test", type=int, default=1000, help="held-out images (default 1000)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rows = read_rows(args.source)
    images = rows[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = rows[:, -1].astype(np.uint8)
    order = Xoshiro256StarStar(derive_seed(args.seed, "proxy.split")).permutation(len(labels))
    test, train = order[:args.test], order[args.test:]
    args.out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", train), ("t10k", test)):
        write_idx(args.out / f"{prefix}-images-idx3-ubyte", images[idx])
        write_idx(args.out / f"{prefix}-labels-idx1-ubyte", labels[idx])
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")


if __name__ == "__main__":
    main()

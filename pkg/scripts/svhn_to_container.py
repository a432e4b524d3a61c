"""Convert SVHN's cropped-digit ``train_32x32.mat`` / ``test_32x32.mat`` into
the container files ``svhn-train.ktc`` / ``svhn-test.ktc`` read by
``load_dataset("svhn", ...)``.

    python scripts/svhn_to_container.py path/to/svhn_mats data/svhn

The .mat arrays are X: (32, 32, 3, N) uint8 and y: (N, 1) with digit 0
stored as label 10; the containers hold images (N, 3, 32, 32) u8 and
labels (N,) u8 with 0..9.
"""
import argparse
from pathlib import Path

import numpy as np
from scipy.io import loadmat

from kanice.data import save_container


def convert(mat_path: Path, out_path: Path) -> int:
    mat = loadmat(mat_path)
    images = np.ascontiguousarray(mat["X"].transpose(3, 2, 0, 1), dtype=np.uint8)
    labels = mat["y"].ravel().astype(np.int64) % 10
    save_container(out_path, {"images": images, "labels": labels.astype(np.uint8),
                              "num_classes": np.array([10], dtype=np.uint8)})
    return len(labels)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path, help="directory with train_32x32.mat and test_32x32.mat")
    ap.add_argument("out", type=Path)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        n = convert(args.src / f"{split}_32x32.mat", args.out / f"svhn-{split}.ktc")
        print(f"{split}: {n} images")


if __name__ == "__main__":
    main()

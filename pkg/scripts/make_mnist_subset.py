"""Rebuild data/mnist-5k/ from the 5,000-image MNIST sample bundled in mlxtend.

The sandbox has no route to the official MNIST mirrors, so the experiments run
on this balanced subset (500 images per digit).  It is re-encoded as gzipped
IDX files so the regular loader path is exercised; 400 images per class go to
the training split and 100 to the test split.

Usage::

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist-5k
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from condlab.data import write_idx


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:])
    rng = np.random.Generator(np.random.Philox(0))
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", images[idx])
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", labels[idx])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

"""MNIST IDX loading, preprocessing and synthetic datasets."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, FormatError, LengthError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STD_FLOOR = 1e-8


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    c: int
    meta: str = ""

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise DimensionError(f"{self.X.shape[0]} rows but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.c):
            raise ParameterError(f"labels must lie in [0, {self.c})")

    def __len__(self):
        return self.X.shape[0]

    def head(self, n: int) -> "Dataset":
        return Dataset(self.X[:n], self.y[:n], self.c, self.meta)


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Decode an unsigned-byte IDX buffer into (dims, uint8 array)."""
    if len(raw) < 4:
        raise LengthError("IDX buffer shorter than its magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08 or not 1 <= magic & 0xFF <= 3:
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise LengthError(f"IDX payload has {len(raw) - header} bytes, expected {count}")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    return tuple(int(d) for d in dims), data.copy()


def load_idx(path) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Read an IDX file (optionally gzip-compressed)."""
    return parse_idx(_open(path))


def encode_idx(array) -> bytes:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    if not 1 <= a.ndim <= 3:
        raise DimensionError("IDX arrays must have 1 to 3 dimensions")
    return struct.pack(f">I{a.ndim}I", 0x0800 | a.ndim, *a.shape) + a.tobytes()


def write_idx(path, array) -> None:
    raw = encode_idx(array)
    if str(path).endswith(".gz"):
        # mtime=0 keeps the archive bytes reproducible
        raw = gzip.compress(raw, mtime=0)
    with open(path, "wb") as fh:
        fh.write(raw)


def preprocess_mnist(images, mode: str = "Crop12", standardize: bool = True, stats=None) -> np.ndarray:
    """Flatten 28x28 images to float features in [0, 1].

    ``Crop12`` keeps the central 24x24 pixels and averages 2x2 cells down to
    12x12 (144 features); ``Full28`` keeps all 784 pixels.  With
    ``standardize`` each feature is centred and scaled by ``stats`` = (mean,
    std) if given, else by statistics of ``images`` themselves; features
    whose std is below 1e-8 are only centred.
    """
    imgs = np.asarray(images)
    if imgs.ndim != 3 or imgs.shape[1:] != (28, 28):
        raise DimensionError(f"expected N x 28 x 28 images, got {imgs.shape}")
    x = imgs.astype(np.float64) / 255.0
    if mode == "Crop12":
        x = x[:, 2:26, 2:26].reshape(-1, 12, 2, 12, 2).mean(axis=(2, 4))
    elif mode != "Full28":
        raise ParameterError(f"unknown preprocessing mode {mode!r}")
    x = x.reshape(x.shape[0], -1)
    if standardize:
        mean, std = stats if stats is not None else feature_stats(x)
        x = (x - mean) / std
    return x


def feature_stats(x) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std, with std below 1e-8 replaced by 1."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std < STD_FLOOR, 1.0, std)


def _find(root: Path, stem: str) -> Optional[Path]:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    return None


def load_mnist(root, mode: str = "Crop12", standardize: bool = True, n_train: Optional[int] = None):
    """Load train (and, if present, t10k test) splits from an IDX directory.

    Test features are standardized with the training statistics.  Returns
    ``(train, test)``; ``test`` is None when no test files exist.
    """
    root = Path(root)
    img_path = _find(root, "train-images-idx3-ubyte")
    lbl_path = _find(root, "train-labels-idx1-ubyte")
    if img_path is None or lbl_path is None:
        raise FileNotFoundError(f"no MNIST training IDX files under {root}")
    _, images = load_idx(img_path)
    _, labels = load_idx(lbl_path)
    if n_train is not None:
        images, labels = images[:n_train], labels[:n_train]
    raw_train = preprocess_mnist(images, mode, standardize=False)
    stats = feature_stats(raw_train) if standardize else None
    Xtr = (raw_train - stats[0]) / stats[1] if standardize else raw_train
    train = Dataset(Xtr, labels.astype(np.int64), 10, f"mnist:{root}:train:{mode}")
    test = None
    timg, tlbl = _find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte")
    if timg is not None and tlbl is not None:
        _, ti = load_idx(timg)
        _, tl = load_idx(tlbl)
        Xte = preprocess_mnist(ti, mode, standardize=standardize, stats=stats)
        test = Dataset(Xte, tl.astype(np.int64), 10, f"mnist:{root}:test:{mode}")
    return train, test


def default_mnist_dir() -> Optional[Path]:
    """``$CONDLAB_MNIST_DIR`` or the bundled ``data/mnist-5k`` subset."""
    env = os.environ.get("CONDLAB_MNIST_DIR")
    if env:
        return Path(env)
    here = Path(__file__).resolve()
    for parent in here.parents:
        cand = parent / "data" / "mnist-5k"
        if cand.is_dir():
            return cand
    return None


def synthetic_gaussian(n: int, d: int, c: int, seed: int = 0, class_separation: float = 1.0) -> Dataset:
    """Class-conditional Gaussians with unit covariance.

    Class means are standard normal vectors scaled by ``class_separation``;
    labels cycle deterministically through the classes.
    """
    if n < 1 or d < 1 or c < 1:
        raise ParameterError("n, d and c must all be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    means = rng.standard_normal((c, d)) * class_separation
    y = np.arange(n) % c
    y = y[rng.permutation(n)]
    X = rng.standard_normal((n, d)) + means[y]
    return Dataset(X, y.astype(np.int64), c, f"synthetic:n={n},d={d},c={c},seed={seed},sep={class_separation}")

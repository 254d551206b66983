"""Half-moons, the 2D bimodal potential and MNIST ingestion."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LabeledDataset:
    x: np.ndarray  # (N, d)
    y: np.ndarray  # (N,) class indices
    n_classes: int
    mask: np.ndarray | None = None  # (N,) bool, True where the label is visible

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.zeros(len(self.x), dtype=bool)
        if len(self.x) != len(self.y) or len(self.mask) != len(self.x):
            raise ValueError("x, y and mask must have equal length")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def labeled_index(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def unlabeled_index(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    def one_hot(self, index=None) -> np.ndarray:
        y = self.y if index is None else self.y[index]
        return np.eye(self.n_classes)[y]


def halfmoons(n: int, noise_sigma: float, rng: np.random.Generator) -> LabeledDataset:
    """Two interleaved half circles; class 0 is the top moon.

    top = (cos t, sin t), bottom = (1 - cos t, 1 - sin t - 0.5), t ~ U[0, pi].
    """
    if n <= 0 or n % 2:
        raise ValueError("n must be a positive even number")
    h = n // 2
    t_top = rng.uniform(0.0, math.pi, h)
    t_bot = rng.uniform(0.0, math.pi, h)
    top = np.stack([np.cos(t_top), np.sin(t_top)], axis=1)
    bottom = np.stack([1.0 - np.cos(t_bot), 1.0 - np.sin(t_bot) - 0.5], axis=1)
    x = np.concatenate([top, bottom])
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    y = np.concatenate([np.zeros(h, dtype=np.int64), np.ones(h, dtype=np.int64)])
    order = rng.permutation(n)
    return LabeledDataset(x[order], y[order], 2)


def label_subset(dataset: LabeledDataset, n_labels: int, rng: np.random.Generator) -> np.ndarray:
    """Mask with n_labels / C randomly chosen rows per class."""
    c = dataset.n_classes
    mask = np.zeros(len(dataset), dtype=bool)
    if n_labels == 0:
        return mask
    if n_labels % c:
        raise ValueError(f"n_labels={n_labels} is not divisible by {c} classes")
    per = n_labels // c
    for k in range(c):
        rows = np.flatnonzero(dataset.y == k)
        if len(rows) < per:
            raise ValueError(f"class {k} has only {len(rows)} rows, need {per}")
        mask[rng.choice(rows, per, replace=False)] = True
    return mask


# ---------------------------------------------------------------------------
# potential target


@dataclass
class PotentialTarget:
    log_potential: Callable[[Tensor], Tensor]  # U on the tape, (n, 2) -> (n,)
    log_potential_np: Callable[[np.ndarray], np.ndarray]
    box: tuple[float, float] = (-8.0, 8.0)
    modes: np.ndarray | None = None


def bimodal_potential(separation: float = 2.0) -> PotentialTarget:
    """U(z) = log(0.5 N(z; (-s, 0), I) + 0.5 N(z; (s, 0), I)), so log Z = 0."""
    modes = np.array([[-separation, 0.0], [separation, 0.0]])
    log_norm = -math.log(2 * math.pi)

    def comp(z: Tensor, m) -> Tensor:
        d = ad.sub(z, m.astype(z.data.dtype))
        return ad.add(ad.mul(-0.5, ad.sum(ad.square(d), axis=1, keepdims=True)), log_norm + math.log(0.5))

    def u(z: Tensor) -> Tensor:
        return ad.log_sum_exp(ad.concat([comp(z, modes[0]), comp(z, modes[1])], axis=1), axis=1)

    def u_np(z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        sq = ((z[..., None, :] - modes) ** 2).sum(-1)
        return np.logaddexp.reduce(-0.5 * sq + log_norm + math.log(0.5), axis=-1)

    return PotentialTarget(u, u_np, (-8.0, 8.0), modes)


def quadrature_log_z(target: PotentialTarget, step: float = 0.02, box: tuple[float, float] | None = None) -> float:
    lo, hi = box or target.box
    g = np.arange(lo, hi + step / 2, step)
    zz = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    u = target.log_potential_np(zz)
    m = u.max()
    return float(m + np.log(np.exp(u - m).sum() * step * step))


# ---------------------------------------------------------------------------
# MNIST


class IdxError(ValueError):
    pass


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped). Images come back scaled to [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IdxError("truncated file")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxError(f"bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError("truncated file")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IdxError("truncated file")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == IDX_IMAGES:
        return data.astype(np.float64) / 255.0
    return data.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data as IDX; used for fixtures."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes())


def preprocess_mnist(
    images: np.ndarray | Sequence[np.ndarray],
    labels: np.ndarray | Sequence[np.ndarray],
    pixel_std_threshold: float = 0.1,
    kept_columns: np.ndarray | None = None,
) -> tuple[LabeledDataset, np.ndarray]:
    """Merge splits, flatten and drop pixel columns whose std is below the threshold.

    Returns the dataset and the kept column indices, which must be reused on
    the test split. Pass ``kept_columns`` to apply a recorded selection.
    """
    if not isinstance(images, np.ndarray):
        images = np.concatenate([np.asarray(i).reshape(len(i), -1) for i in images])
        labels = np.concatenate([np.asarray(lab) for lab in labels])
    x = images.reshape(len(images), -1).astype(np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("images must be scaled to [0, 1]")
    if kept_columns is None:
        kept_columns = np.flatnonzero(x.std(axis=0) >= pixel_std_threshold)
    labels = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(x[:, kept_columns], labels, 10), np.asarray(kept_columns)


def binarize(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("binarize expects intensities in [0, 1]")
    return (rng.random(x.shape) < x).astype(np.float64)


def dequantize_and_normalize(x_int: np.ndarray, rng: np.random.Generator, divisor: float = 256.0) -> np.ndarray:
    x = np.asarray(x_int, dtype=np.float64)
    return (x + rng.random(x.shape)) / divisor


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# Uncompressed byte sizes of the canonical files.
MNIST_SIZES = {
    "train_images": 47040016,
    "train_labels": 60008,
    "test_images": 7840016,
    "test_labels": 10008,
}


def find_mnist(directory) -> dict[str, Path] | None:
    """Locate the four MNIST IDX files (plain or .gz) in a directory."""
    d = Path(directory)
    found = {}
    for key, stem in MNIST_FILES.items():
        for cand in (d / stem, d / (stem + ".gz"), d / stem.replace("-idx", ".idx")):
            if cand.exists():
                found[key] = cand
                break
        else:
            return None
    return found


def verify_mnist_sizes(files: dict[str, Path]) -> list[str]:
    """Return the keys whose uncompressed size differs from the canonical file."""
    bad = []
    for key, path in files.items():
        raw = path.read_bytes()
        if path.suffix == ".gz":
            raw = gzip.decompress(raw)
        if len(raw) != MNIST_SIZES[key]:
            bad.append(key)
    return bad


def load_mnist(directory, pixel_std_threshold: float = 0.1):
    """Return (train, test, kept_columns) with the column pruning fitted on train."""
    files = find_mnist(directory)
    if files is None:
        raise FileNotFoundError(f"MNIST IDX files not found in {directory}")
    train, kept = preprocess_mnist(
        load_idx(files["train_images"]), load_idx(files["train_labels"]), pixel_std_threshold
    )
    test, _ = preprocess_mnist(load_idx(files["test_images"]), load_idx(files["test_labels"]), kept_columns=kept)
    return train, test, kept

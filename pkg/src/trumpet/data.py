"""Datasets: synthetic low-dimensional manifolds, IDX image files and the
[-1, 1] normalisation used throughout training.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "Normalization",
    "synth_manifold",
    "read_idx",
    "load_idx",
    "load_mnist",
    "normalize_pm1",
    "denormalize",
    "train_test_split",
    "save_dataset",
    "load_dataset",
]

# IDX type byte -> big-endian dtype
_IDX_TYPES = {
    0x08: ">u1",
    0x09: ">i1",
    0x0B: ">i2",
    0x0C: ">i4",
    0x0D: ">f4",
    0x0E: ">f8",
}


class IdxFormatError(ValueError):
    """Malformed or truncated IDX file."""


@dataclass(frozen=True)
class Normalization:
    """Affine map from ``[lo, hi]`` onto ``[-1, 1]``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.hi > self.lo:
            raise ValueError(f"degenerate source range [{self.lo}, {self.hi}]")

    def forward(self, x):
        return (2.0 * (np.asarray(x, np.float64) - self.lo) / (self.hi - self.lo) - 1.0)

    def inverse(self, y):
        return (np.asarray(y, np.float64) + 1.0) * 0.5 * (self.hi - self.lo) + self.lo


@dataclass(frozen=True)
class Dataset:
    """Stack of same-shaped ``H x W x C`` samples plus provenance metadata."""

    samples: np.ndarray
    name: str = "dataset"
    intrinsic_dim: int | None = None
    normalization: Normalization | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 4:
            raise ValueError(f"samples must be N x H x W x C, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"{self.name}: samples contain NaN or Inf")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.samples.shape[1:])

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))


def _default_shape(ambient: int):
    side = math.isqrt(ambient)
    return (side, side, 1) if side * side == ambient else (1, 1, ambient)


def synth_manifold(intrinsic: int, ambient: int, n: int, seed: int = 0, noise: float = 0.0,
                   shape=None, curvature: float = 1.0, hidden: int | None = None) -> Dataset:
    """Samples near a smooth ``intrinsic``-dimensional manifold in ``R^ambient``.

    ``x = W2 tanh(W1 u) + W0 u`` with ``u ~ N(0, I)``. ``W0`` has orthonormal
    columns and ``W2`` is projected onto their orthogonal complement, so
    ``W0^T J = I`` and the embedding is injective everywhere. After adding
    ``N(0, noise^2)`` the whole set is divided by its largest magnitude.

    Args:
        curvature: scale of the ``tanh`` branch; ``0`` gives a linear subspace.
        shape: ``(H, W, C)`` per sample, default square single channel.
    """
    if not 1 <= intrinsic < ambient:
        raise ValueError(f"need 1 <= intrinsic dim < ambient dim, got {intrinsic}, {ambient}")
    if n < 1:
        raise ValueError("n must be positive")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    shape = tuple(shape) if shape is not None else _default_shape(ambient)
    if int(np.prod(shape)) != ambient:
        raise ValueError(f"shape {shape} does not hold {ambient} values")
    hidden = hidden or 2 * intrinsic
    rng = np.random.default_rng(seed)
    w0 = np.linalg.qr(rng.standard_normal((ambient, intrinsic)))[0]
    w1 = rng.standard_normal((hidden, intrinsic)) / math.sqrt(intrinsic)
    w2 = rng.standard_normal((ambient, hidden)) / math.sqrt(hidden)
    w2 = curvature * (w2 - w0 @ (w0.T @ w2))
    u = rng.standard_normal((n, intrinsic))
    x = np.tanh(u @ w1.T) @ w2.T + u @ w0.T
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    x = x / np.max(np.abs(x))
    info = {"seed": seed, "noise": noise, "curvature": curvature,
            "w0": w0, "w1": w1, "w2": w2, "latents": u}
    return Dataset(x.reshape((n,) + shape).astype(np.float32), f"synth-{intrinsic}-{ambient}",
                   intrinsic, None, info)


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its native type."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = int.from_bytes(raw[:4], "big")
    type_code, ndim = raw[2], raw[3]
    if raw[0] or raw[1] or type_code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad IDX magic 0x{magic:08X}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension table")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    dtype = np.dtype(_IDX_TYPES[type_code])
    count = int(np.prod(dims))
    need = header + count * dtype.itemsize
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw)} of {need} bytes)")
    arr = np.frombuffer(raw, dtype, count, header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def load_idx(path) -> Dataset:
    """Rank-3 IDX image file as an ``N x H x W x 1`` dataset of raw values."""
    arr = read_idx(path)
    if arr.ndim != 3:
        raise IdxFormatError(f"{path}: expected a rank-3 image tensor, got rank {arr.ndim}")
    data = arr.astype(np.float32)[..., None]
    return Dataset(data, Path(path).name, None, None, {"source": str(path)})


def normalize_pm1(dataset: Dataset, source_range=(0.0, 255.0)) -> Dataset:
    """Affinely map ``source_range`` onto ``[-1, 1]`` and record the map."""
    norm = Normalization(float(source_range[0]), float(source_range[1]))
    s = dataset.samples
    if s.min() < norm.lo or s.max() > norm.hi:
        raise ValueError(f"values outside the declared source range [{norm.lo}, {norm.hi}]")
    out = np.clip(norm.forward(s), -1.0, 1.0).astype(np.float32)
    return replace(dataset, samples=out, normalization=norm)


def denormalize(x, norm: Normalization | None = None):
    """Undo :func:`normalize_pm1` on a dataset or a raw array."""
    if isinstance(x, Dataset):
        if x.normalization is None:
            raise ValueError("dataset carries no normalization record")
        return replace(x, samples=x.normalization.inverse(x.samples).astype(np.float32),
                       normalization=None)
    if norm is None:
        raise ValueError("a normalization record is required for raw arrays")
    return norm.inverse(x)


def load_mnist(path, pad_to: int = 32) -> Dataset:
    """MNIST images normalised to [-1, 1] and padded with the background value."""
    ds = normalize_pm1(load_idx(path), (0.0, 255.0))
    h, w = ds.shape[:2]
    if pad_to < max(h, w):
        raise ValueError(f"cannot pad {h}x{w} images to {pad_to}")
    top, left = (pad_to - h) // 2, (pad_to - w) // 2
    padded = np.pad(ds.samples, ((0, 0), (top, pad_to - h - top), (left, pad_to - w - left), (0, 0)),
                    constant_values=-1.0)
    info = dict(ds.info, resize=f"pad {h}x{w} -> {pad_to}x{pad_to} with -1")
    return replace(ds, samples=padded, info=info)


def train_test_split(dataset: Dataset, train_fraction: float = 0.9, seed: int = 0):
    """Seeded permutation split into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    if cut in (0, n):
        raise ValueError(f"split of {n} samples leaves one side empty")
    return (replace(dataset, samples=dataset.samples[perm[:cut]], name=dataset.name + "/train"),
            replace(dataset, samples=dataset.samples[perm[cut:]], name=dataset.name + "/test"))


def save_dataset(path, dataset: Dataset) -> None:
    """Cache samples in the checkpoint tensor container."""
    from trumpet.checkpoint import write_container

    lines = [f"name = {dataset.name}"]
    if dataset.intrinsic_dim is not None:
        lines.append(f"intrinsic_dim = {dataset.intrinsic_dim}")
    if dataset.normalization is not None:
        lines.append(f"source_range = {dataset.normalization.lo!r},{dataset.normalization.hi!r}")
    write_container(path, "[data]\n" + "\n".join(lines) + "\n", [("samples", dataset.samples)])


def load_dataset(path) -> Dataset:
    from trumpet.checkpoint import read_container
    from trumpet.config import parse_sections

    text, tensors = read_container(path)
    meta = parse_sections(text).get("data", {})
    if "samples" not in tensors:
        raise ValueError(f"{path}: no samples tensor")
    norm = None
    if "source_range" in meta:
        lo, hi = (float(v) for v in meta["source_range"].split(","))
        norm = Normalization(lo, hi)
    intrinsic = int(meta["intrinsic_dim"]) if "intrinsic_dim" in meta else None
    return Dataset(tensors["samples"], meta.get("name", "dataset"), intrinsic, norm)

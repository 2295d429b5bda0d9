"""Lossless PNG and CSV emission for image stacks and maps."""

from __future__ import annotations

import csv
import math

import numpy as np
from PIL import Image

__all__ = ["tile_grid", "to_uint8", "save_png", "load_png", "save_grid", "write_matrix_csv"]


def to_uint8(img, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Clip ``img`` to ``[lo, hi]`` and map linearly onto 0..255."""
    if not hi > lo:
        raise ValueError("need hi > lo")
    a = (np.clip(np.asarray(img, np.float64), lo, hi) - lo) / (hi - lo)
    return np.round(a * 255.0).astype(np.uint8)


def tile_grid(images, cols: int | None = None, pad: int = 1, fill: float = -1.0) -> np.ndarray:
    """Arrange ``n x H x W x C`` images on a near-square grid."""
    arr = np.asarray(images, np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty n x H x W x C stack, got shape {arr.shape}")
    n, h, w, c = arr.shape
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), fill, np.float64)
    for i in range(n):
        r, q = divmod(i, cols)
        y0, x0 = pad + r * (h + pad), pad + q * (w + pad)
        out[y0:y0 + h, x0:x0 + w] = arr[i]
    return out


def save_png(path, img, lo: float = -1.0, hi: float = 1.0) -> None:
    a = to_uint8(img, lo, hi)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 3 and a.shape[2] not in (3, 4):
        raise ValueError(f"cannot store {a.shape[2]} channels as PNG")
    Image.fromarray(a).save(path, format="PNG")


def load_png(path, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """``H x W x C`` float32 image rescaled from 0..255 onto ``[lo, hi]``."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("L") if im.mode in ("L", "P", "1", "I;16") else im, np.float64)
    if a.ndim == 2:
        a = a[..., None]
    return (lo + (hi - lo) * a / 255.0).astype(np.float32)


def save_grid(path, images, lo: float = -1.0, hi: float = 1.0, cols: int | None = None) -> None:
    save_png(path, tile_grid(images, cols, fill=lo), lo, hi)


def write_matrix_csv(path, rows, header=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        for row in np.atleast_2d(np.asarray(rows)):
            writer.writerow([repr(float(v)) for v in row])

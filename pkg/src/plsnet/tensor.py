"""Rank-4 feature maps.

A feature map is a NumPy array of shape ``(h, w, d, c)`` stored C-contiguous,
so the linear order is spatial-major and channel-fastest: element
``(i, j, k, ch)`` lives at ``((i * w + j) * d + k) * c + ch``. Every kernel in
:mod:`plsnet.ops` is written against this layout. There is no batch axis.

All helpers here return new arrays and never modify their inputs.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when two tensors disagree on extents an operation needs equal."""


class Shape4(NamedTuple):
    h: int
    w: int
    d: int
    c: int

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.d)

    @property
    def size(self) -> int:
        return self.h * self.w * self.d * self.c


def shape4(x: np.ndarray) -> Shape4:
    if x.ndim != 4:
        raise ShapeMismatchError(f"expected a rank-4 (h, w, d, c) tensor, got shape {x.shape}")
    return Shape4(*x.shape)


def tensor4(data, dtype=np.float32) -> np.ndarray:
    """Copy ``data`` into a contiguous rank-4 array after validating it."""
    x = np.array(data, dtype=dtype, order="C", copy=True)
    s = shape4(x)
    if min(s.spatial) < 1:
        raise ShapeMismatchError(f"spatial extents must be >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains NaN or Inf")
    return x


def zeros4(shape: Sequence[int], dtype=np.float32) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=dtype)


def concat_channels(*tensors: np.ndarray) -> np.ndarray:
    """Concatenate along the channel axis; earlier arguments come first."""
    if not tensors:
        raise ValueError("need at least one tensor")
    spatial = shape4(tensors[0]).spatial
    for t in tensors[1:]:
        if shape4(t).spatial != spatial:
            raise ShapeMismatchError(
                f"spatial shape mismatch in concat: {spatial} vs {t.shape[:3]}"
            )
    return np.concatenate(tensors, axis=3)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels` (used by the backward passes)."""
    if sum(sizes) != x.shape[3]:
        raise ShapeMismatchError(f"channel sizes {list(sizes)} do not sum to {x.shape[3]}")
    bounds = np.cumsum([0, *sizes])
    return [x[..., a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return a + b


def pad_zero(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad every spatial axis by ``pad`` voxels on both sides."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    shape4(x)
    if pad == 0:
        return x.copy()
    return np.pad(x, ((pad, pad), (pad, pad), (pad, pad), (0, 0)))


def crop_center(x: np.ndarray, pad: int) -> np.ndarray:
    """Remove ``pad`` voxels from both sides of every spatial axis."""
    if pad == 0:
        return x.copy()
    return x[pad:-pad, pad:-pad, pad:-pad, :].copy()

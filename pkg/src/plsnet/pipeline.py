"""Volume files, isotropic resampling, intensity normalisation and label
post-processing.

On-disk format: ``<base>.json`` holds the header and ``<base>.raw`` the body,
little-endian, ``float32`` for intensities and ``uint16`` for labels, in C
order over ``(h, w, d)`` (last axis fastest, the tensor linear order with a
single channel).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .metrics import LEGEND, LabeledVolume

FORMAT_NAME = "plsnet-volume"
FORMAT_VERSION = 1
_DTYPES = {"intensity": "<f4", "label": "<u2"}


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    kind: str = "intensity"
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise VolumeFormatError(f"dims must be three positive ints, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeFormatError(f"spacing must be three positive values, got {self.spacing}")
        if self.kind not in _DTYPES:
            raise VolumeFormatError(f"unknown value kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": self.version,
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "kind": self.kind,
            "dtype": _DTYPES[self.kind],
            "order": "C",
        }


@dataclass
class Volume:
    """Intensity volume of shape ``(h, w, d)``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise ValueError(f"intensity volume must be 3-D, got {self.data.shape}")

    @property
    def header(self) -> VolumeHeader:
        return VolumeHeader(tuple(self.data.shape), self.spacing, "intensity")


def header_of(v) -> VolumeHeader:
    if isinstance(v, LabeledVolume):
        return VolumeHeader(tuple(v.labels.shape), v.spacing, "label")
    return v.header


def _paths(path) -> tuple[Path, Path]:
    s = str(path)
    for suffix in (".json", ".raw"):
        if s.endswith(suffix):
            s = s[: -len(suffix)]
    return Path(s + ".json"), Path(s + ".raw")


def save_volume(path, header: VolumeHeader, data: np.ndarray):
    data = np.asarray(data)
    if tuple(data.shape) != tuple(header.dims):
        raise VolumeFormatError(f"data shape {data.shape} does not match header dims {header.dims}")
    if header.kind == "label" and data.size and (data.min() < 0 or data.max() > 65535):
        raise VolumeFormatError("label values must fit in uint16")
    hpath, bpath = _paths(path)
    hpath.write_text(json.dumps(header.to_dict(), indent=2) + "\n")
    bpath.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[header.kind]).tobytes())


def load_volume(path) -> tuple[VolumeHeader, np.ndarray]:
    hpath, bpath = _paths(path)
    try:
        meta = json.loads(hpath.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{hpath}: malformed header ({exc})") from exc
    if not isinstance(meta, dict) or meta.get("format") != FORMAT_NAME:
        raise VolumeFormatError(f"{hpath}: not a {FORMAT_NAME} header")
    if meta.get("version") != FORMAT_VERSION:
        raise VolumeFormatError(f"{hpath}: unknown format version {meta.get('version')}")
    try:
        header = VolumeHeader(tuple(int(n) for n in meta["dims"]),
                              tuple(float(s) for s in meta["spacing"]), meta["kind"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{hpath}: malformed header ({exc})") from exc
    dtype = np.dtype(_DTYPES[header.kind])
    body = bpath.read_bytes()
    expected = int(np.prod(header.dims)) * dtype.itemsize
    if len(body) != expected:
        raise VolumeFormatError(
            f"{bpath}: size mismatch, expected {expected} bytes, found {len(body)}"
        )
    data = np.frombuffer(body, dtype=dtype).reshape(header.dims)
    native = np.float32 if header.kind == "intensity" else np.int64
    return header, data.astype(native)


def read_volume(path):
    """Load as :class:`Volume` or :class:`LabeledVolume` depending on the header."""
    header, data = load_volume(path)
    if header.kind == "label":
        return LabeledVolume(data, header.spacing)
    return Volume(data, header.spacing)


def write_volume(path, v):
    data = v.labels if isinstance(v, LabeledVolume) else v.data
    save_volume(path, header_of(v), data)


# --- resampling ----------------------------------------------------------------------


def isotropic_dims(dims: Sequence[int], spacing: Sequence[float], target: float = 1.0):
    return tuple(max(1, math.floor(n * s / target + 0.5)) for n, s in zip(dims, spacing))


def nearest_resample(labels: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resampling on the same half-voxel grid convention as
    the trilinear resampler; never produces new label values."""
    idx = []
    for n_in, n_out in zip(labels.shape, size):
        src = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
        idx.append(np.clip(src, 0, n_in - 1))
    return labels[np.ix_(*idx)]


def resample_isotropic(v, target: float = 1.0):
    """Intensities are trilinearly interpolated, labels nearest-neighbour."""
    if isinstance(v, LabeledVolume):
        size = isotropic_dims(v.labels.shape, v.spacing, target)
        return LabeledVolume(nearest_resample(v.labels, size), (target,) * 3, v.legend)
    size = isotropic_dims(v.data.shape, v.spacing, target)
    data = ops.trilinear_resample(v.data[..., None], size=size)[..., 0]
    return Volume(data, (target,) * 3)


def znormalize(v: Volume) -> Volume:
    """Zero mean, unit variance over all voxels; constant volumes map to 0."""
    x = v.data.astype(np.float64)
    std = x.std()
    if std < 1e-12:
        return Volume(np.zeros_like(v.data), v.spacing)
    return Volume(((x - x.mean()) / std).astype(np.float32), v.spacing)


def preprocess(v: Volume, target: float = 1.0) -> Volume:
    """The single preprocessing path shared by training and inference."""
    return znormalize(resample_isotropic(v, target))


def argmax_labels(prob: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> LabeledVolume:
    """Most probable class per voxel; ties go to the lowest class index."""
    legend = LEGEND if prob.shape[3] <= len(LEGEND) else {i: str(i) for i in range(prob.shape[3])}
    return LabeledVolume(np.argmax(prob, axis=3).astype(np.int64), spacing, dict(legend))


def resample_labels_to_native(labels: LabeledVolume, native: VolumeHeader) -> LabeledVolume:
    return LabeledVolume(nearest_resample(labels.labels, native.dims), native.spacing,
                         labels.legend)

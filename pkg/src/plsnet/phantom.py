"""Synthetic lobe phantoms for desk-scale experiments.

Two ellipsoidal lungs sit in a soft-tissue background. Oblique planes cut the
right lung into upper/middle/lower lobes and the left lung into upper/lower
lobes. Each lobe gets its own mean intensity, lobe interfaces carry a thin
dark fissure sheet, and Gaussian noise is added on top. A gap fraction erases
part of every fissure sheet (intensity only) to mimic incomplete fissures.

Geometry is expressed in normalised coordinates: every axis spans [-1, 1].
Axis 0 runs right-to-left, axis 1 anterior-to-posterior, axis 2
inferior-to-superior. A plane ``(nx, ny, nz, c)`` is given in lung-centred
coordinates; points with ``n . p < c`` lie on its lower side.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .metrics import LabeledVolume
from .pipeline import Volume

RUL, RML, RLL, LUL, LLL = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lung_axes: tuple[float, float, float] = (0.38, 0.70, 0.85)
    lung_offset: float = 0.48
    right_major: tuple[float, float, float, float] = (0.0, -0.8, 1.0, -0.1)
    right_minor: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 0.15)
    left_major: tuple[float, float, float, float] = (0.0, -0.7, 1.0, 0.0)
    background: float = 0.0
    lobe_means: tuple[float, ...] = (-0.78, -0.70, -0.86, -0.74, -0.82)
    fissure_intensity: float = -1.0
    fissure_width: float = 1.0
    noise_sigma: float = 0.03
    gap_fraction: float = 0.0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("phantom grid must be at least 8 voxels")
        if len(self.lobe_means) != 5:
            raise ValueError("need five lobe means")
        if not 0.0 <= self.gap_fraction <= 1.0:
            raise ValueError("gap_fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _side(plane, p) -> np.ndarray:
    """Signed distance (normalised units) of points ``p`` to ``plane``."""
    n = np.asarray(plane[:3], dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise ValueError(f"degenerate plane {plane}")
    return (p[..., 0] * n[0] + p[..., 1] * n[1] + p[..., 2] * n[2] - plane[3]) / norm


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabeledVolume]:
    n = spec.size
    c = (np.arange(n) + 0.5) / n * 2 - 1
    grid = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    half_width = spec.fissure_width / n  # one voxel is 2/n normalised units wide
    labels = np.zeros((n, n, n), dtype=np.int64)
    fissures = []
    ax = np.asarray(spec.lung_axes)

    for centre_x, lobes in ((-spec.lung_offset, "right"), (spec.lung_offset, "left")):
        p = grid - np.array([centre_x, 0.0, 0.0])
        inside = ((p / ax) ** 2).sum(axis=-1) <= 1.0
        if lobes == "right":
            major, minor = _side(spec.right_major, p), _side(spec.right_minor, p)
            lower = inside & (major < 0)
            upper_region = inside & (major >= 0)
            labels[lower] = RLL
            labels[upper_region & (minor < 0)] = RML
            labels[upper_region & (minor >= 0)] = RUL
            fissures.append(inside & (np.abs(major) < half_width))
            fissures.append(upper_region & (np.abs(minor) < half_width))
        else:
            major = _side(spec.left_major, p)
            labels[inside & (major < 0)] = LLL
            labels[inside & (major >= 0)] = LUL
            fissures.append(inside & (np.abs(major) < half_width))

    counts = np.bincount(labels.ravel(), minlength=6)
    if (counts[1:] == 0).any():
        raise ValueError(f"degenerate fissure planes: lobe voxel counts {counts[1:].tolist()}")

    intensity = np.full((n, n, n), spec.background, dtype=np.float64)
    for lab, mean in zip(range(1, 6), spec.lobe_means):
        intensity[labels == lab] = mean
    for sheet in fissures:
        coords = np.argwhere(sheet)
        if len(coords) == 0:
            continue
        # erase a contiguous anterior portion of the sheet
        order = np.lexsort((coords[:, 2], coords[:, 0], coords[:, 1]))
        kept = coords[order[int(round(spec.gap_fraction * len(coords))):]]
        intensity[tuple(kept.T)] = spec.fissure_intensity

    rng = np.random.default_rng(spec.seed)
    intensity += rng.normal(0.0, spec.noise_sigma, intensity.shape) if spec.noise_sigma else 0.0
    return (Volume(intensity.astype(np.float32), spec.spacing),
            LabeledVolume(labels, spec.spacing))

"""Static cost and receptive-field analysis.

MACs count multiply-accumulates of convolutions only; batch norm, ReLU,
resampling, concatenation, addition and softmax contribute zero. Batch norm
contributes its trainable ``gamma``/``beta`` to the parameter count so totals
match the live parameter store.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import convolve

from .config import ConvUnit, NetworkConfig, build_plan

NOMINAL_INPUT = (384, 384, 384)

CONV_KINDS = ("regular-conv", "ds-conv", "pointwise")
FREE_KINDS = ("upsample", "concat", "add", "relu", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    k: int = 1
    m: int = 0
    n: int = 0
    stride: int = 1
    dilation: int = 1
    out: tuple[int, int, int] = (1, 1, 1)

    @property
    def out_voxels(self) -> int:
        h, w, d = self.out
        return h * w * d


def count_layer(spec: LayerSpec) -> tuple[int, int]:
    """``(macs, params)`` for one layer."""
    k3, m, n, v = spec.k ** 3, spec.m, spec.n, spec.out_voxels
    if spec.kind == "regular-conv":
        return k3 * m * v * n, k3 * m * n
    if spec.kind == "ds-conv":
        return m * v * (k3 + n), m * (k3 + n)
    if spec.kind == "pointwise":
        return m * n * v, m * n
    if spec.kind == "bn":
        return 0, 2 * n
    if spec.kind in FREE_KINDS:
        return 0, 0
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def reduction_factor(k: int, n: int) -> Fraction:
    """Regular-over-separable cost ratio of a single layer, exact."""
    return Fraction(k ** 3 * n, k ** 3 + n)


@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    params: int
    rf: int


@dataclass
class CostReport:
    layers: list[LayerCost]
    total_macs: int
    total_params: int
    baseline_macs: int | None = None
    baseline_params: int | None = None
    input_size: tuple[int, int, int] = NOMINAL_INPUT

    @property
    def mac_reduction(self) -> float | None:
        return None if self.baseline_macs is None else self.baseline_macs / self.total_macs

    @property
    def param_reduction(self) -> float | None:
        return None if self.baseline_params is None else self.baseline_params / self.total_params

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "baseline_macs": self.baseline_macs,
            "baseline_params": self.baseline_params,
            "mac_reduction": self.mac_reduction,
            "param_reduction": self.param_reduction,
            "layers": [asdict(layer) for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        width = max(len(layer.name) for layer in self.layers)
        lines = [f"{'layer':<{width}}  {'kind':<12} {'MACs':>16} {'params':>10} {'RF':>5}"]
        for layer in self.layers:
            if layer.kind in ("relu", "concat", "add"):
                continue
            lines.append(f"{layer.name:<{width}}  {layer.kind:<12} {layer.macs:>16,d} "
                         f"{layer.params:>10,d} {layer.rf:>5d}")
        lines.append(f"input size: {'x'.join(map(str, self.input_size))}")
        lines.append(f"total MACs: {self.total_macs:,d} ({self.total_macs / 1e9:.2f}B)")
        lines.append(f"total params: {self.total_params:,d} ({self.total_params / 1e6:.3f}M)")
        if self.baseline_macs is not None:
            lines.append(f"regular-conv twin: {self.baseline_macs / 1e9:.2f}B MACs, "
                         f"{self.baseline_params / 1e6:.3f}M params")
            lines.append(f"DS reduction factor: {self.mac_reduction:.2f}x MACs, "
                         f"{self.param_reduction:.2f}x params")
        return "\n".join(lines)


# --- receptive fields ----------------------------------------------------------------


def receptive_field(layers: Iterable[Sequence[int]]) -> int:
    """Receptive-field extent of a cascade of ``(k, stride, dilation)`` layers."""
    rf, jump = 1, 1
    for k, stride, dilation in layers:
        if k % 2 == 0:
            raise ValueError("kernel extent must be odd")
        rf += dilation * (k - 1) * jump
        jump *= stride
    return rf


@dataclass
class FootprintGrid:
    counts: np.ndarray
    holes: bool

    @property
    def extent(self) -> int:
        """Bounding extent of the non-zero footprint (same along every axis)."""
        nz = np.nonzero(self.counts.any(axis=(1, 2)))[0]
        return int(nz[-1] - nz[0] + 1)


def gridding_coverage(dilations: Sequence[int], k: int = 3) -> FootprintGrid:
    """Count the paths from one output unit to each input voxel through a
    stride-1 cascade of ``k``-tap dilated kernels. ``holes`` flags a zero
    count anywhere strictly inside the receptive-field cube."""
    grid = np.ones((1, 1, 1), dtype=np.int64)
    for r in dilations:
        span = r * (k - 1) + 1
        kern = np.zeros((span,) * 3, dtype=np.int64)
        kern[::r, ::r, ::r] = 1
        grid = np.rint(convolve(grid, kern, mode="full", method="direct")).astype(np.int64)
    interior = grid[1:-1, 1:-1, 1:-1]
    return FootprintGrid(grid, bool(interior.size and (interior == 0).any()))


# --- network enumeration -------------------------------------------------------------


@dataclass
class _Tracker:
    """Receptive field and jump (in input voxels) of the tensor being built."""

    rf: Fraction = Fraction(1)
    jump: Fraction = Fraction(1)

    def conv(self, k, stride, dilation) -> "_Tracker":
        return _Tracker(self.rf + dilation * (k - 1) * self.jump, self.jump * stride)

    def upsample(self) -> "_Tracker":
        # each output voxel blends two neighbours along every axis
        return _Tracker(self.rf + self.jump, self.jump / 2)

    @staticmethod
    def merge(*ts: "_Tracker") -> "_Tracker":
        return _Tracker(max(t.rf for t in ts), min(t.jump for t in ts))


@dataclass
class _Enumerator:
    rows: list = field(default_factory=list)

    def emit(self, spec: LayerSpec, tr: _Tracker):
        self.rows.append((spec, tr))

    def unit(self, u: ConvUnit, spatial, tr: _Tracker):
        geom = u.geom
        out = geom.out_spatial(spatial, u.k)
        tr = tr.conv(u.k, u.stride, u.dilation)
        self.emit(LayerSpec(u.name, u.kind, u.k, u.m, u.n, u.stride, u.dilation, out), tr)
        if u.bn_relu:
            self.emit(LayerSpec(f"{u.name}.bn", "bn", m=u.n, n=u.n, out=out), tr)
            self.emit(LayerSpec(f"{u.name}.relu", "relu", m=u.n, n=u.n, out=out), tr)
        return out, tr


def enumerate_layers(cfg: NetworkConfig, input_size: Sequence[int] = NOMINAL_INPUT):
    """``[(LayerSpec, receptive_field)]`` in forward order, exactly the layers
    the network executes on an input of ``input_size`` (already a multiple of 8)."""
    plan = build_plan(cfg)
    en = _Enumerator()
    spatial = tuple(input_size)
    feats = {}
    spatial, tr = en.unit(plan.stem, spatial, _Tracker())
    feats[0] = (spatial, tr)
    for lv in plan.levels[1:]:
        spatial, tr = en.unit(lv.down, spatial, tr)
        if cfg.input_reinforcement:
            f = 2 ** lv.index
            ir = _Tracker(Fraction(2), Fraction(f))
            en.emit(LayerSpec(f"enc{lv.index}.ir_resample", "upsample", m=1, n=1, out=spatial), ir)
            tr = _Tracker.merge(tr, ir)
            en.emit(LayerSpec(f"enc{lv.index}.ir_concat", "concat", m=lv.width, n=lv.width,
                              out=spatial), tr)
        for prefix, bc in lv.blocks:
            block_in = tr
            outs = [tr]
            for layer in bc.layers(prefix):
                src = _Tracker.merge(*outs) if bc.dense else outs[-1]
                _, t = en.unit(layer, spatial, src)
                outs.append(t)
            src = _Tracker.merge(*outs) if bc.dense else outs[-1]
            if bc.dense:
                en.emit(LayerSpec(f"{prefix}.concat", "concat", m=bc.concat_channels,
                                  n=bc.concat_channels, out=spatial), src)
            _, tr = en.unit(bc.projection(prefix), spatial, src)
            if bc.residual:
                tr = _Tracker.merge(tr, block_in)
                en.emit(LayerSpec(f"{prefix}.add", "add", m=bc.g0, n=bc.g0, out=spatial), tr)
        feats[lv.index] = (spatial, tr)
    spatial, tr = en.unit(plan.dec_top, feats[3][0], feats[3][1])
    two_c = 2 * cfg.num_classes
    for level in (2, 1, 0):
        target = feats[level][0]
        tr = tr.upsample()
        en.emit(LayerSpec(f"dec{level}.upsample", "upsample", m=two_c, n=two_c, out=target), tr)
        _, lat = en.unit(plan.dec_laterals[level], target, feats[level][1])
        tr = _Tracker.merge(tr, lat)
        en.emit(LayerSpec(f"dec{level}.merge", "concat", m=2 * two_c, n=2 * two_c, out=target), tr)
        if level in plan.dec_convs:
            _, tr = en.unit(plan.dec_convs[level], target, tr)
        spatial = target
    _, tr = en.unit(plan.head, spatial, tr)
    en.emit(LayerSpec("softmax", "softmax", m=cfg.num_classes, n=cfg.num_classes, out=spatial), tr)
    return [(spec, int(np.ceil(t.rf))) for spec, t in en.rows]


def padded_size(size: Sequence[int], multiple: int = 8) -> tuple[int, int, int]:
    return tuple(-(-int(n) // multiple) * multiple for n in size)


def _totals(cfg, size):
    rows = enumerate_layers(cfg, size)
    costs = [LayerCost(spec.name, spec.kind, *count_layer(spec), rf) for spec, rf in rows]
    return costs, sum(c.macs for c in costs), sum(c.params for c in costs)


def network_cost_report(cfg: NetworkConfig,
                        input_size: Sequence[int] = NOMINAL_INPUT) -> CostReport:
    """Sum :func:`count_layer` over the network; when the config is separable,
    also cost the twin that uses regular convolutions instead."""
    size = padded_size(input_size)
    costs, macs, params = _totals(cfg, size)
    report = CostReport(costs, macs, params, input_size=size)
    if cfg.separable:
        _, report.baseline_macs, report.baseline_params = _totals(cfg.replace(separable=False), size)
    return report

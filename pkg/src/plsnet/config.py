"""Structural description of the network.

:func:`build_plan` turns a :class:`NetworkConfig` into the exact sequence of
convolution units the network instantiates. Both the parameter store and the
cost model are derived from the plan, so they cannot drift apart.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .ops import ConvGeometry


@dataclass(frozen=True)
class ConvUnit:
    """One convolution followed (optionally) by batch norm and ReLU.

    ``k == 1`` is a pointwise convolution. With ``separable`` set, a ``k > 1``
    unit is a depthwise convolution (no norm/activation of its own) followed
    by a pointwise convolution.
    """

    name: str
    m: int
    n: int
    k: int = 3
    stride: int = 1
    dilation: int = 1
    separable: bool = True
    bn_relu: bool = True

    @property
    def geom(self) -> ConvGeometry:
        return ConvGeometry.same(self.k, self.dilation, self.stride)

    @property
    def kind(self) -> str:
        if self.k == 1:
            return "pointwise"
        return "ds-conv" if self.separable else "regular-conv"

    def param_shapes(self):
        """``(name, shape, trainable)`` for every tensor this unit owns."""
        if self.kind == "pointwise":
            shapes = [(f"{self.name}.pw", (self.m, self.n), True)]
        elif self.kind == "ds-conv":
            shapes = [
                (f"{self.name}.dw", (self.k,) * 3 + (self.m,), True),
                (f"{self.name}.pw", (self.m, self.n), True),
            ]
        else:
            shapes = [(f"{self.name}.w", (self.k,) * 3 + (self.m, self.n), True)]
        if self.bn_relu:
            shapes += [
                (f"{self.name}.bn.gamma", (self.n,), True),
                (f"{self.name}.bn.beta", (self.n,), True),
                (f"{self.name}.bn.running_mean", (self.n,), False),
                (f"{self.name}.bn.running_var", (self.n,), False),
            ]
        return shapes


@dataclass(frozen=True)
class DRDBConfig:
    """Dilated residual dense block.

    With ``dense`` off, layer ``i`` only sees layer ``i-1`` and the projection
    maps ``g`` channels back to ``g0``; with ``residual`` off the block input
    is not added back. Turning both off with unit dilations gives the plain
    convolution stack used for ablations.
    """

    g0: int
    g: int = 12
    dilations: tuple[int, ...] = (1, 2, 3, 4)
    dense: bool = True
    residual: bool = True
    separable: bool = True
    k: int = 3

    def __post_init__(self):
        if self.g < 1 or self.g0 < 1:
            raise ValueError("channel counts must be >= 1")
        if any(r < 1 for r in self.dilations):
            raise ValueError("dilations must be positive")

    def in_channels(self, i: int) -> int:
        """Input channels of dense layer ``i`` (0-based)."""
        if self.dense:
            return self.g0 + i * self.g
        return self.g0 if i == 0 else self.g

    @property
    def concat_channels(self) -> int:
        return self.g0 + len(self.dilations) * self.g if self.dense else self.g

    def layers(self, prefix: str) -> list[ConvUnit]:
        return [
            ConvUnit(f"{prefix}.conv{i + 1}", self.in_channels(i), self.g, self.k,
                     dilation=r, separable=self.separable)
            for i, r in enumerate(self.dilations)
        ]

    def projection(self, prefix: str) -> ConvUnit:
        return ConvUnit(f"{prefix}.proj", self.concat_channels, self.g0, k=1)


@dataclass(frozen=True)
class NetworkConfig:
    """Network hyperparameters.

    ``level_channels[l-1]`` is the output width of the stride-2 convolution
    entering level ``l``; input reinforcement adds one channel on top.
    ``drdb=False`` swaps every block for a plain stack with unit dilations and
    no shortcut connections.
    """

    num_classes: int = 6
    growth: int = 12
    in_channels: int = 1
    stem_channels: int = 4
    level_channels: tuple[int, int, int] = (4, 48, 136)
    blocks_per_level: tuple[int, int, int] = (1, 2, 4)
    dilations: tuple[int, ...] = (1, 2, 3, 4)
    input_reinforcement: bool = True
    separable: bool = True
    drdb: bool = True
    dense: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.level_channels) != 3 or len(self.blocks_per_level) != 3:
            raise ValueError("need exactly three downsampled levels")
        if min(self.level_channels) < 1 or self.stem_channels < 1 or self.growth < 1:
            raise ValueError("channel counts must be >= 1")
        if min(self.blocks_per_level) < 0:
            raise ValueError("block counts must be >= 0")

    def block_config(self, g0: int) -> DRDBConfig:
        if not self.drdb:
            return DRDBConfig(g0, self.growth, (1,) * len(self.dilations), dense=False,
                              residual=False, separable=self.separable)
        return DRDBConfig(g0, self.growth, tuple(self.dilations), dense=self.dense,
                          residual=self.residual, separable=self.separable)

    def level_width(self, level: int) -> int:
        """Channels flowing through resolution level ``level``."""
        if level == 0:
            return self.stem_channels
        return self.level_channels[level - 1] + (1 if self.input_reinforcement else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("level_channels", "blocks_per_level", "dilations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def replace(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Level:
    index: int
    down: ConvUnit | None
    width: int
    blocks: tuple[tuple[str, DRDBConfig], ...]


@dataclass(frozen=True)
class Plan:
    config: NetworkConfig
    stem: ConvUnit
    levels: tuple[Level, ...]
    dec_top: ConvUnit
    dec_laterals: dict = field(default_factory=dict)
    dec_convs: dict = field(default_factory=dict)
    head: ConvUnit | None = None

    def units(self) -> list[ConvUnit]:
        """Every convolution unit, in forward execution order."""
        out = [self.stem]
        for lv in self.levels[1:]:
            out.append(lv.down)
            for prefix, bc in lv.blocks:
                out.extend(bc.layers(prefix))
                out.append(bc.projection(prefix))
        out.append(self.dec_top)
        for level in (2, 1, 0):
            out.append(self.dec_laterals[level])
            if level in self.dec_convs:
                out.append(self.dec_convs[level])
        out.append(self.head)
        return out

    def param_shapes(self):
        return [s for u in self.units() for s in u.param_shapes()]


def build_plan(cfg: NetworkConfig) -> Plan:
    two_c = 2 * cfg.num_classes
    sep = cfg.separable
    stem = ConvUnit("stem", cfg.in_channels, cfg.stem_channels, separable=sep)
    levels = [Level(0, None, cfg.stem_channels, ())]
    prev = cfg.stem_channels
    for level in (1, 2, 3):
        down = ConvUnit(f"enc{level}.down", prev, cfg.level_channels[level - 1],
                        stride=2, separable=sep)
        width = cfg.level_width(level)
        blocks = tuple(
            (f"enc{level}.block{b}", cfg.block_config(width))
            for b in range(cfg.blocks_per_level[level - 1])
        )
        levels.append(Level(level, down, width, blocks))
        prev = width
    dec_top = ConvUnit("dec3.conv", levels[3].width, two_c, separable=sep)
    laterals = {lv: ConvUnit(f"dec{lv}.lateral", levels[lv].width, two_c, separable=sep)
                for lv in (2, 1, 0)}
    convs = {lv: ConvUnit(f"dec{lv}.conv", 2 * two_c, two_c, separable=sep) for lv in (2, 1)}
    head = ConvUnit("head", 2 * two_c, cfg.num_classes, k=1, bn_relu=False)
    return Plan(cfg, stem, tuple(levels), dec_top, laterals, convs, head)

"""Training loop: Gaussian initialisation, Adam, batch size 1 and early
stopping on validation loss."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .blocks import ParamStore, network_gradients, plsnet_forward
from .config import NetworkConfig

log = logging.getLogger(__name__)

KERNEL_SUFFIXES = (".w", ".dw", ".pw")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 20
    max_epochs: int = 300
    seed: int = 0
    init_sigma: float = 0.01
    checkpointed: bool = True

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.init_sigma <= 0:
            raise ValueError("init_sigma must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


def init_weights(cfg: TrainConfig, params: ParamStore, rng: np.random.Generator | None = None):
    """Convolution kernels ~ N(0, sigma^2); batch norm reset to identity."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    for name in params:
        a = params[name]
        if name.endswith(KERNEL_SUFFIXES):
            a[...] = rng.normal(0.0, cfg.init_sigma, a.shape)
        elif name.endswith((".gamma", ".running_var")):
            a[...] = 1
        else:
            a[...] = 0


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def adam_step(params, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


@dataclass
class EarlyStopState:
    """Improvement means strictly below the best loss so far."""

    patience: int
    best: float = math.inf
    since_improvement: int = 0

    def update(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.since_improvement = 0
            return True
        self.since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class FitResult:
    params: ParamStore
    history: list[EpochRecord]
    best_epoch: int
    stop_reason: str


Sample = tuple[np.ndarray, np.ndarray]


def validation_loss(params: ParamStore, data: Sequence[Sample]) -> float:
    losses = []
    for image, labels in data:
        probs, _, _ = plsnet_forward(image, params, train=False)
        losses.append(ops.cross_entropy_loss(probs, labels))
    return float(np.mean(losses))


def fit(train_set: Sequence[Sample], val_set: Sequence[Sample], net_cfg: NetworkConfig,
        train_cfg: TrainConfig = TrainConfig(),
        callback: Callable[[int, ParamStore], bool] | None = None) -> FitResult:
    """Train one volume at a time, in the given order.

    After every epoch the mean validation loss (inference-mode batch norm)
    decides early stopping. ``callback(epoch, params)`` may return True to end
    training early. The returned parameters are those of the best epoch.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")
    params = ParamStore.for_config(net_cfg)
    init_weights(train_cfg, params, np.random.default_rng(train_cfg.seed))
    adam = AdamState.from_config(train_cfg)
    stopper = EarlyStopState(train_cfg.patience)
    best = params.copy()
    best_epoch = 0
    history: list[EpochRecord] = []
    reason = "max-epochs"
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for image, labels in train_set:
            loss, grads, _ = network_gradients(image, labels, params,
                                               checkpoint=train_cfg.checkpointed)
            adam_step(params, grads, adam)
            losses.append(loss)
        val = validation_loss(params, val_set)
        history.append(EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - t0))
        if stopper.update(val):
            best = params.copy()
            best_epoch = epoch
        log.info("epoch %d train %.5f val %.5f", epoch, history[-1].train_loss, val)
        if stopper.should_stop:
            reason = "patience"
            break
        if callback is not None and callback(epoch, params):
            reason = "callback"
            break
    return FitResult(best, history, best_epoch, reason)


def write_history_csv(path, history: Sequence[EpochRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.seconds:.3f}"])

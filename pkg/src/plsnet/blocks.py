"""Network assembly: convolution units, dilated residual dense blocks, the
input-reinforced encoder, the conv-upsample-merge decoder and the parameter
store that holds every tensor by name.

Backward passes are written per block. Each forward returns a state object
holding whatever the matching backward needs; gradients are accumulated into
a ``dict`` keyed by parameter name.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .config import ConvUnit, DRDBConfig, NetworkConfig, Plan, build_plan
from .tensor import ShapeMismatchError, concat_channels, shape4, split_channels

CHECKPOINT_MAGIC = b"PLSNETCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered ``name -> array`` mapping for one network.

    Holds trainable kernels and batch-norm affine terms together with the
    (non-trainable) running statistics. Arrays are updated in place by the
    optimiser and by train-mode batch norm.
    """

    def __init__(self, config: NetworkConfig, tensors: dict, trainable):
        self.config = config
        self.tensors = dict(tensors)
        self.trainable = frozenset(trainable)

    @classmethod
    def for_config(cls, config: NetworkConfig, dtype=np.float32) -> "ParamStore":
        tensors, trainable = {}, set()
        for name, shape, train in build_plan(config).param_shapes():
            init = 1.0 if name.endswith((".gamma", ".running_var")) else 0.0
            tensors[name] = np.full(shape, init, dtype=dtype)
            if train:
                trainable.add(name)
        return cls(config, tensors, trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self.tensors:
            raise KeyError(name)
        if value.shape != self.tensors[name].shape:
            raise ShapeMismatchError(f"{name}: expected {self.tensors[name].shape}, got {value.shape}")
        self.tensors[name] = value

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n in self.trainable]

    def num_trainable(self) -> int:
        return sum(self.tensors[n].size for n in self.trainable_names())

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, {k: v.copy() for k, v in self.tensors.items()},
                          self.trainable)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()},
                          self.trainable)

    def bn(self, unit_name: str) -> ops.BatchNormParams:
        p = f"{unit_name}.bn"
        return ops.BatchNormParams(self[f"{p}.gamma"], self[f"{p}.beta"],
                                   self[f"{p}.running_mean"], self[f"{p}.running_var"])

    def equals(self, other: "ParamStore") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )

    # checkpoint container -- layout documented in README.md

    def save(self, path):
        header = {
            "config": self.config.to_dict(),
            "dtype": "<f4",
            "tensors": [
                {"name": n, "shape": list(a.shape), "trainable": n in self.trainable}
                for n, a in self.tensors.items()
            ],
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            for a in self.tensors.values():
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        if len(raw) < 20:
            raise CheckpointError(f"{path}: truncated header")
        version, hlen = struct.unpack("<IQ", raw[8:20])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[20:20 + hlen].decode("utf-8"))
            config = NetworkConfig.from_dict(header["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: malformed header ({exc})") from exc
        store = cls.for_config(config)
        entries = header["tensors"]
        expected = [(n, list(a.shape)) for n, a in store.tensors.items()]
        if [(e["name"], e["shape"]) for e in entries] != expected:
            raise CheckpointError(f"{path}: tensor table does not match the stored config")
        body = raw[20 + hlen:]
        need = 4 * sum(a.size for a in store.tensors.values())
        if len(body) != need:
            raise CheckpointError(f"{path}: body has {len(body)} bytes, expected {need}")
        offset = 0
        for name, a in store.tensors.items():
            n = a.size * 4
            store.tensors[name] = (
                np.frombuffer(body[offset:offset + n], dtype="<f4").reshape(a.shape)
                .astype(np.float32)
            )
            offset += n
        return store


def _accumulate(grads: dict, name: str, g: np.ndarray):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


# --- convolution units ---------------------------------------------------------------


def unit_forward(unit: ConvUnit, x: np.ndarray, params: ParamStore, train: bool,
                 track: bool = True):
    """Run one unit. Returns ``(y, cache)``; the cache holds the input, the
    depthwise output ``z`` (separable units), the convolution output ``u``
    and the batch-norm output ``b``."""
    cache = {"x": x}
    if unit.kind == "pointwise":
        u = ops.pointwise_conv3d(x, params[f"{unit.name}.pw"])
    elif unit.kind == "ds-conv":
        z = ops.depthwise_conv3d(x, params[f"{unit.name}.dw"], unit.geom)
        cache["z"] = z
        u = ops.pointwise_conv3d(z, params[f"{unit.name}.pw"])
    else:
        u = ops.conv3d(x, params[f"{unit.name}.w"], unit.geom)
    cache["u"] = u
    if not unit.bn_relu:
        return u, cache
    b = ops.batch_norm(u, params.bn(unit.name), train, track=track)
    cache["b"] = b
    return ops.relu(b), cache


def unit_backward(unit: ConvUnit, grad: np.ndarray, cache: dict, params: ParamStore,
                  grads: dict, train: bool) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; return the input gradient."""
    g = grad
    if unit.bn_relu:
        g = ops.relu_backward(g, cache["b"])
        g, g_gamma, g_beta = ops.batch_norm_backward(g, cache["u"], params.bn(unit.name), train)
        _accumulate(grads, f"{unit.name}.bn.gamma", g_gamma)
        _accumulate(grads, f"{unit.name}.bn.beta", g_beta)
    if unit.kind == "pointwise":
        gx, gp = ops.pointwise_conv3d_backward(g, cache["x"], params[f"{unit.name}.pw"])
        _accumulate(grads, f"{unit.name}.pw", gp)
    elif unit.kind == "ds-conv":
        gz, gp = ops.pointwise_conv3d_backward(g, cache["z"], params[f"{unit.name}.pw"])
        _accumulate(grads, f"{unit.name}.pw", gp)
        gx, gd = ops.depthwise_conv3d_backward(gz, cache["x"], params[f"{unit.name}.dw"],
                                               unit.geom)
        _accumulate(grads, f"{unit.name}.dw", gd)
    else:
        gx, gw = ops.conv3d_backward(g, cache["x"], params[f"{unit.name}.w"], unit.geom)
        _accumulate(grads, f"{unit.name}.w", gw)
    return gx


# --- dilated residual dense block ----------------------------------------------------


@dataclass
class DRDBState:
    """Saved-for-backward state of one block.

    ``buffers`` maps a buffer name to the array kept alive; its length is the
    retained-buffer count. A checkpointed state keeps only the block input and
    the convolution outputs (depthwise ``z`` and pre-norm ``u``).
    """

    config: DRDBConfig
    prefix: str
    train: bool
    checkpointed: bool
    buffers: dict = field(default_factory=dict)

    @property
    def retained(self) -> int:
        return len(self.buffers)


def drdb_forward(x: np.ndarray, bc: DRDBConfig, prefix: str, params: ParamStore,
                 train: bool, checkpoint: bool = False, taps: dict | None = None):
    """Dense cascade of dilated convolutions, 1x1x1 projection back to ``g0``
    channels, and the residual addition. Returns ``(y, DRDBState)``."""
    if shape4(x).c != bc.g0:
        raise ShapeMismatchError(f"{prefix}: input has {x.shape[3]} channels, block expects {bc.g0}")
    state = DRDBState(bc, prefix, train, checkpoint)
    keep = state.buffers
    keep["x0"] = x
    feats = [x]
    for i, layer in enumerate(bc.layers(prefix)):
        inp = concat_channels(*feats) if bc.dense else feats[-1]
        xi, cache = unit_forward(layer, inp, params, train)
        _keep_unit(keep, f"conv{i + 1}", cache, xi, checkpoint)
        if taps is not None:
            taps[layer.name] = xi
        feats.append(xi)
    xt = concat_channels(*feats) if bc.dense else feats[-1]
    proj = bc.projection(prefix)
    xdr, cache = unit_forward(proj, xt, params, train)
    _keep_unit(keep, "proj", cache, xdr, checkpoint)
    y = xdr + x if bc.residual else xdr
    if taps is not None:
        taps[proj.name] = xdr
        taps[prefix] = y
    return y, state


def drdb_forward_checkpointed(x, bc, prefix, params, train, taps=None):
    """Same output as :func:`drdb_forward`; the state keeps convolution outputs only."""
    return drdb_forward(x, bc, prefix, params, train, checkpoint=True, taps=taps)


def _keep_unit(keep: dict, key: str, cache: dict, y: np.ndarray, checkpoint: bool):
    if "z" in cache:
        keep[f"{key}.z"] = cache["z"]
    keep[f"{key}.u"] = cache["u"]
    if not checkpoint:
        keep[f"{key}.x"] = cache["x"]
        keep[f"{key}.b"] = cache["b"]
        keep[f"{key}.y"] = y


def _rebuild_caches(state: DRDBState, params: ParamStore):
    """Per-unit caches for the backward pass. In the checkpointed case the
    concatenations, normalised values and activations are recomputed from
    the stored convolution outputs (running statistics left untouched)."""
    bc, keep = state.config, state.buffers
    layers = bc.layers(state.prefix)
    caches = []
    if not state.checkpointed:
        for i in range(len(layers)):
            key = f"conv{i + 1}"
            caches.append({k: keep[f"{key}.{k}"] for k in ("x", "z", "u", "b") if f"{key}.{k}" in keep})
        caches.append({k: keep[f"proj.{k}"] for k in ("x", "u", "b")})
        return caches
    feats = [keep["x0"]]
    for i, layer in enumerate(layers):
        key = f"conv{i + 1}"
        cache = {"x": concat_channels(*feats) if bc.dense else feats[-1], "u": keep[f"{key}.u"]}
        if f"{key}.z" in keep:
            cache["z"] = keep[f"{key}.z"]
        cache["b"] = ops.batch_norm(cache["u"], params.bn(layer.name), state.train, track=False)
        feats.append(ops.relu(cache["b"]))
        caches.append(cache)
    proj = bc.projection(state.prefix)
    u = keep["proj.u"]
    caches.append({
        "x": concat_channels(*feats) if bc.dense else feats[-1],
        "u": u,
        "b": ops.batch_norm(u, params.bn(proj.name), state.train, track=False),
    })
    return caches


def drdb_backward(grad: np.ndarray, state: DRDBState, params: ParamStore,
                  grads: dict) -> np.ndarray:
    """Gradient w.r.t. the block input; flows through both the residual
    shortcut and every dense connection."""
    bc = state.config
    layers = bc.layers(state.prefix)
    caches = _rebuild_caches(state, params)
    n = len(layers)
    g_feats: list = [None] * (n + 1)

    def add(j, g):
        g_feats[j] = g if g_feats[j] is None else g_feats[j] + g

    g_xt = unit_backward(bc.projection(state.prefix), grad, caches[n], params, grads, state.train)
    if bc.dense:
        for j, part in enumerate(split_channels(g_xt, [bc.g0] + [bc.g] * n)):
            add(j, part)
    else:
        add(n, g_xt)
    for i in reversed(range(n)):
        if g_feats[i + 1] is None:
            continue
        g_in = unit_backward(layers[i], g_feats[i + 1], caches[i], params, grads, state.train)
        if bc.dense:
            for j, part in enumerate(split_channels(g_in, [bc.g0] + [bc.g] * i)):
                add(j, part)
        else:
            add(i, g_in)
    g_x = g_feats[0] if g_feats[0] is not None else np.zeros_like(grad)
    if bc.residual:
        g_x = g_x + grad
    return g_x


def zero_projection(params: ParamStore, prefix: str):
    """Zero a block's projection kernel and its batch-norm affine terms, which
    makes the block output equal its input in every mode."""
    for suffix in (".proj.pw", ".proj.bn.gamma", ".proj.bn.beta"):
        params[prefix + suffix][...] = 0


# --- encoder / decoder -----------------------------------------------------------------


@dataclass
class EncoderState:
    train: bool
    stem: dict = field(default_factory=dict)
    downs: dict = field(default_factory=dict)
    blocks: dict = field(default_factory=dict)
    widths: dict = field(default_factory=dict)


def encoder_forward(ct: np.ndarray, plan: Plan, params: ParamStore, train: bool,
                    checkpoint: bool = False, taps: dict | None = None):
    """Return ``(features, state)`` where ``features[l]`` is the output of
    resolution level ``l`` (``l = 0..3``)."""
    s = shape4(ct)
    if s.c != plan.config.in_channels:
        raise ShapeMismatchError(f"expected {plan.config.in_channels} input channel(s), got {s.c}")
    if any(n % 8 for n in s.spatial):
        raise ShapeMismatchError(f"input extents {s.spatial} must be multiples of 8; pad first")
    state = EncoderState(train)
    y, state.stem = unit_forward(plan.stem, ct, params, train)
    if taps is not None:
        taps[plan.stem.name] = y
    feats = [y]
    for lv in plan.levels[1:]:
        y, state.downs[lv.index] = unit_forward(lv.down, y, params, train)
        state.widths[lv.index] = y.shape[3]
        if taps is not None:
            taps[lv.down.name] = y
        if plan.config.input_reinforcement:
            ir = ops.trilinear_resample(ct, size=y.shape[:3])
            y = concat_channels(y, ir)
        if taps is not None:
            taps[f"enc{lv.index}.input"] = y
        for prefix, bc in lv.blocks:
            y, state.blocks[prefix] = drdb_forward(y, bc, prefix, params, train, checkpoint, taps)
        if taps is not None:
            taps[f"enc{lv.index}"] = y
        feats.append(y)
    return feats, state


def encoder_backward(g_feats: list, plan: Plan, state: EncoderState, params: ParamStore,
                     grads: dict):
    """Backpropagate gradients on the four level outputs into ``grads``."""
    g = g_feats[3]
    for lv in reversed(plan.levels[1:]):
        if lv.index < 3:
            g = g + g_feats[lv.index]
        for prefix, _ in reversed(lv.blocks):
            g = drdb_backward(g, state.blocks[prefix], params, grads)
        g = g[..., :state.widths[lv.index]]
        g = unit_backward(lv.down, np.ascontiguousarray(g), state.downs[lv.index], params,
                          grads, state.train)
    g = g + g_feats[0]
    unit_backward(plan.stem, g, state.stem, params, grads, state.train)


@dataclass
class DecoderState:
    train: bool
    top: dict = field(default_factory=dict)
    laterals: dict = field(default_factory=dict)
    convs: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)


def decoder_forward(feats: list, plan: Plan, params: ParamStore, train: bool,
                    taps: dict | None = None):
    """Conv-upsample-merge back to full resolution. Returns ``(logits, state)``;
    apply :func:`plsnet.ops.softmax_channels` for the class probabilities."""
    for level in range(1, 4):
        expected = tuple(n // 2 for n in feats[level - 1].shape[:3])
        if feats[level].shape[:3] != expected:
            raise ShapeMismatchError(
                f"level {level} features {feats[level].shape[:3]} inconsistent with {expected}"
            )
    state = DecoderState(train)
    t, state.top = unit_forward(plan.dec_top, feats[3], params, train)
    if taps is not None:
        taps[plan.dec_top.name] = t
    for level in (2, 1, 0):
        state.shapes[level] = t.shape
        up = ops.trilinear_resample(t, size=feats[level].shape[:3])
        lat_unit = plan.dec_laterals[level]
        lat, state.laterals[level] = unit_forward(lat_unit, feats[level], params, train)
        t = concat_channels(up, lat)
        if taps is not None:
            taps[lat_unit.name] = lat
            taps[f"dec{level}.merge"] = t
        if level in plan.dec_convs:
            t, state.convs[level] = unit_forward(plan.dec_convs[level], t, params, train)
            if taps is not None:
                taps[plan.dec_convs[level].name] = t
    logits, state.head = unit_forward(plan.head, t, params, train)
    if taps is not None:
        taps[plan.head.name] = logits
    return logits, state


def decoder_backward(g_logits: np.ndarray, plan: Plan, state: DecoderState,
                     params: ParamStore, grads: dict) -> list:
    """Return the gradients on the four encoder level outputs."""
    g_feats = [None] * 4
    g = unit_backward(plan.head, g_logits, state.head, params, grads, state.train)
    two_c = 2 * plan.config.num_classes
    for level in (0, 1, 2):
        if level in plan.dec_convs:
            g = unit_backward(plan.dec_convs[level], g, state.convs[level], params, grads,
                              state.train)
        g_up, g_lat = split_channels(g, [two_c, two_c])
        g_feats[level] = unit_backward(plan.dec_laterals[level], np.ascontiguousarray(g_lat),
                                       state.laterals[level], params, grads, state.train)
        g = ops.trilinear_resample_backward(g_up, state.shapes[level])
    g_feats[3] = unit_backward(plan.dec_top, g, state.top, params, grads, state.train)
    return g_feats


# --- full network ----------------------------------------------------------------------


@dataclass
class NetState:
    plan: Plan
    encoder: EncoderState
    decoder: DecoderState
    input_size: tuple
    padded_size: tuple
    params: ParamStore


def pad_to_multiple(x: np.ndarray, multiple: int = 8) -> np.ndarray:
    """Zero-pad the high end of each spatial axis up to a multiple of ``multiple``."""
    pads = [(0, -n % multiple) for n in x.shape[:3]] + [(0, 0)]
    if not any(p for _, p in pads):
        return x
    return np.pad(x, pads)


def plsnet_forward(ct: np.ndarray, params: ParamStore, train: bool,
                   checkpoint: bool = False, taps: dict | None = None,
                   plan: Plan | None = None):
    """Full forward pass. ``ct`` is a single-channel ``(h, w, d, 1)`` volume of
    any size; it is padded to a multiple of 8 internally and the output is
    cropped back. Returns ``(probabilities, logits, NetState)``."""
    plan = plan or build_plan(params.config)
    if ct.ndim == 3:
        ct = ct[..., None]
    size = ct.shape[:3]
    x = pad_to_multiple(ct)
    feats, enc = encoder_forward(x, plan, params, train, checkpoint, taps)
    logits, dec = decoder_forward(feats, plan, params, train, taps)
    h, w, d = size
    logits = logits[:h, :w, :d]
    if logits.shape[:3] != x.shape[:3]:
        logits = np.ascontiguousarray(logits)
    probs = ops.softmax_channels(logits)
    return probs, logits, NetState(plan, enc, dec, tuple(size), tuple(x.shape[:3]), params)


def plsnet_backward(g_logits: np.ndarray, state: NetState) -> dict:
    """Gradients for every trainable tensor given the gradient on the
    (cropped) logits. Requires a train-mode forward."""
    if state is None:
        raise ValueError("missing saved forward state")
    if g_logits.shape[:3] != state.input_size:
        raise ShapeMismatchError(f"gradient {g_logits.shape[:3]} vs output {state.input_size}")
    return _backward(g_logits, state, state.params)


def network_gradients(ct: np.ndarray, labels: np.ndarray, params: ParamStore,
                      checkpoint: bool = True):
    """Train-mode forward, cross-entropy loss and backward in one call.
    Returns ``(loss, grads, probs)``."""
    probs, _, state = plsnet_forward(ct, params, train=True, checkpoint=checkpoint)
    loss = ops.cross_entropy_loss(probs, labels)
    g_logits = ops.softmax_cross_entropy_backward(probs, labels)
    grads = plsnet_backward(g_logits, state)
    return loss, grads, probs


def _backward(g_logits, state: NetState, params: ParamStore) -> dict:
    plan = state.plan
    pads = [(0, p - n) for n, p in zip(state.input_size, state.padded_size)] + [(0, 0)]
    g = np.pad(g_logits, pads) if any(p for _, p in pads) else g_logits
    grads: dict = {}
    g_feats = decoder_backward(g, plan, state.decoder, params, grads)
    encoder_backward(g_feats, plan, state.encoder, params, grads)
    for name in params.trainable_names():
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    return grads

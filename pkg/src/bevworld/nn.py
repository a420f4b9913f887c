"""Parameterized building blocks: linear maps, layer norms, motion-conditioned
layer norm, single-head cross-attention, a gated recurrent cell, 2D
convolutions over grid features, and embedding tables.

All blocks are pure functions of their inputs and ParamGroups and build onto
the autodiff graph. Initialization: weights uniform in +/-sqrt(1/fan_in),
biases zero, embedding rows normal(0, 0.02).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Value
from .rng import RngState


class DimensionError(ValueError):
    """Raised when a block's inputs have incompatible dimensions."""


# ---------------------------------------------------------------------------
# parameters


class ParamGroup:
    """Named collection of trainable Values (one functional unit, e.g. the
    posterior head). Entry names are unique within the group; full paths
    "group.entry" are unique within a model."""

    def __init__(self, name: str):
        self.name = name
        self.entries: dict[str, Value] = {}
        self.init_specs: dict[str, tuple] = {}

    def add(self, key: str, shape: tuple, rng: RngState, init: str = "fan_in", fan_in: int | None = None) -> Value:
        if key in self.entries:
            raise ValueError(f"duplicate parameter {self.name}.{key}")
        shape = tuple(shape)
        if init == "fan_in":
            fi = fan_in if fan_in is not None else (shape[-1] if shape else 1)
            limit = float(np.sqrt(1.0 / max(1, fi)))
            data = rng.uniform(-limit, limit, shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "normal02":
            data = 0.02 * rng.normal(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        v = Value(data, requires_grad=True)
        self.entries[key] = v
        self.init_specs[key] = (shape, init)
        return v

    def __getitem__(self, key: str) -> Value:
        return self.entries[key]

    def freeze(self) -> None:
        for v in self.entries.values():
            v.requires_grad = False

    def unfreeze(self) -> None:
        for v in self.entries.values():
            v.requires_grad = True

    def named_values(self):
        for key in self.entries:
            yield f"{self.name}.{key}", self.entries[key]


def linear_params(group: ParamGroup, key: str, n_in: int, n_out: int, rng: RngState, bias: bool = True):
    prefix = f"{key}." if key else ""
    w = group.add(f"{prefix}w", (n_out, n_in), rng, fan_in=n_in)
    b = group.add(f"{prefix}b", (n_out,), rng, init="zeros") if bias else None
    return w, b


def linear(x: Value, w: Value, b: Value | None = None) -> Value:
    out = ad.matmul(w, x)
    return out if b is None else ad.add(out, b)


def conv_params(group: ParamGroup, key: str, c_in: int, c_out: int, k: int, rng: RngState, bias: bool = True):
    w = group.add(f"{key}.w", (c_out, c_in, k, k), rng, fan_in=c_in * k * k)
    b = group.add(f"{key}.b", (c_out,), rng, init="zeros") if bias else None
    return w, b


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Value, scale=1.0, shift=0.0, eps: float = 1e-5) -> Value:
    """scale * (x - mean) / sqrt(var + eps) + shift over a vector."""
    if x.data.size == 0:
        raise DimensionError("layer_norm: empty input")
    mu = ad.vmean(x)
    centered = ad.sub(x, mu)
    var = ad.vmean(ad.square(centered))
    # rsqrt composed from primitives: exp(-0.5 * log(var + eps))
    rstd = ad.exp(ad.mul(ad.log(ad.add(var, Value(eps))), Value(-0.5)))
    out = ad.mul(centered, rstd)
    if not (isinstance(scale, float) and scale == 1.0):
        out = ad.mul(out, scale if isinstance(scale, Value) else Value(scale))
    if not (isinstance(shift, float) and shift == 0.0):
        out = ad.add(out, shift if isinstance(shift, Value) else Value(shift))
    return out


@dataclass
class MotionContext:
    """Per-step motion attributes: planar velocity (grid cells/step) and the
    time interval to the modulated state (>= 0, 1 for adjacent frames)."""

    v: np.ndarray  # shape (2,)
    dt: float = 1.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64).reshape(2)
        if self.dt < 0:
            raise ValueError("dt must be >= 0")

    def as_value(self) -> Value:
        return Value(np.array([self.v[0], self.v[1], self.dt]))


def motion_layer_norm(s: Value, ctx, scale_map: ParamGroup, shift_map: ParamGroup) -> Value:
    """Affine-modulated layer norm: gamma * LN(s) + beta where gamma/beta are
    linear in the flattened motion attributes (vx, vy, dt).

    `ctx` is a MotionContext or a length-3 Value (the latter lets gradients
    flow from predicted actions during imagination).
    """
    vec = ctx.as_value() if isinstance(ctx, MotionContext) else ctx
    if vec.data.shape != (3,):
        raise DimensionError(f"motion context must be a 3-vector, got {vec.data.shape}")
    gamma = linear(vec, scale_map["w"], scale_map["b"])
    beta = linear(vec, shift_map["w"], shift_map["b"])
    if gamma.data.shape != s.data.shape:
        raise DimensionError(f"modulation dim {gamma.data.shape} != state dim {s.data.shape}")
    return ad.add(ad.mul(gamma, layer_norm(s)), beta)


# ---------------------------------------------------------------------------
# attention


def cross_attention(query: Value, keys: list[Value], values: list[Value], params: ParamGroup) -> Value:
    """Single-head scaled-dot-product attention with a residual connection.

    weights = softmax(<Wq q, Wk k_i> / sqrt(d)); output = q + sum_i w_i Wv v_i.
    """
    if not keys:
        raise DimensionError("cross_attention: empty key/value bank")
    if len(keys) != len(values):
        raise DimensionError("cross_attention: |keys| != |values|")
    d = params["q.w"].data.shape[0]
    qp = linear(query, params["q.w"], params["q.b"])
    kp = ad.concat([ad.reshape(linear(k, params["k.w"], params["k.b"]), (1, d)) for k in keys], axis=0)
    vp = ad.concat([ad.reshape(linear(v, params["v.w"], params["v.b"]), (1, d)) for v in values], axis=0)
    scores = ad.mul(ad.matmul(kp, qp), Value(1.0 / np.sqrt(d)))
    weights = ad.softmax(scores, axis=0)
    mixed = ad.matmul(weights, vp)
    return ad.add(query, mixed)


def attention_params(group: ParamGroup, dim: int, rng: RngState) -> ParamGroup:
    for part in ("q", "k", "v"):
        linear_params(group, part, dim, dim, rng)
    return group


# ---------------------------------------------------------------------------
# recurrence


def gru_params(group: ParamGroup, d_hidden: int, d_in: int, rng: RngState) -> ParamGroup:
    for gate in ("update", "reset", "cand"):
        linear_params(group, gate, d_hidden + d_in, d_hidden, rng)
    return group


def gru_cell(h: Value, x: Value, params: ParamGroup) -> Value:
    """Gated update: h' = (1 - z) * h + z * tanh-candidate."""
    d_h = h.data.shape[0]
    if params["update.w"].data.shape != (d_h, d_h + x.data.shape[0]):
        raise DimensionError(
            f"gru_cell: weights expect dims {params['update.w'].data.shape}, "
            f"got h {h.data.shape} x {x.data.shape}"
        )
    hx = ad.concat([h, x])
    z = ad.sigmoid(linear(hx, params["update.w"], params["update.b"]))
    r = ad.sigmoid(linear(hx, params["reset.w"], params["reset.b"]))
    cand = ad.tanh(linear(ad.concat([ad.mul(r, h), x]), params["cand.w"], params["cand.b"]))
    one = Value(np.ones(d_h))
    return ad.add(ad.mul(ad.sub(one, z), h), ad.mul(z, cand))


# ---------------------------------------------------------------------------
# convolution (custom graph node over the kernel backend)


def conv2d(x: Value, w: Value, b: Value | None = None, stride: int = 1, pad: int = 0) -> Value:
    """Cross-correlation of a (C,H,W) grid with (F,C,kh,kw) kernels."""
    c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {cw}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({h + 2 * pad},{wd + 2 * pad})")
    out_data = kernels.conv2d_forward(x.data, w.data, None if b is None else b.data, stride, pad)

    parents = (x, w) if b is None else (x, w, b)

    def _back(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_grad_input(g, w.data, stride, pad, h, wd) if x.requires_grad else None
        gw = kernels.conv2d_grad_weights(g, x.data, stride, pad, kh, kw) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=(1, 2)) if b.requires_grad else None
        return gx, gw, gb

    return ad._make_node(out_data, parents, _back)


def upsample2x(x: Value) -> Value:
    """Nearest-neighbor 2x upsampling of a (C,H,W) grid (composed from
    reshape/broadcast primitives)."""
    c, h, w = x.data.shape
    y = ad.reshape(x, (c, h, 1, w, 1))
    y = ad.broadcast_to(y, (c, h, 2, w, 2))
    return ad.reshape(y, (c, 2 * h, 2 * w))


# ---------------------------------------------------------------------------
# embeddings


def embed(table: Value, key: int) -> Value:
    """Differentiable row lookup."""
    n, d = table.data.shape
    if not 0 <= key < n:
        raise IndexError(f"embedding key {key} out of range [0, {n})")
    row = ad.slice_(table, (slice(key, key + 1), slice(None)))
    return ad.reshape(row, (d,))


def mlp_params(group: ParamGroup, key: str, dims: list[int], rng: RngState) -> None:
    for i in range(len(dims) - 1):
        linear_params(group, f"{key}{i}", dims[i], dims[i + 1], rng)


def mlp(x: Value, group: ParamGroup, key: str, n_layers: int, activation=ad.tanh) -> Value:
    out = x
    for i in range(n_layers):
        out = linear(out, group[f"{key}{i}.w"], group[f"{key}{i}.b"])
        if i < n_layers - 1:
            out = activation(out)
    return out

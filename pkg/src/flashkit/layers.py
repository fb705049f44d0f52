"""Parametric building blocks: projections, norms, positions.

Parameter arrays are created through ParamInit, which derives one RNG
stream per parameter name. Two models that share a parameter name draw
identical values regardless of what else they allocate, and a wider
head-stack [4, s] starts with the same rows as a narrower [2, s] drawn
under the same name (row-major fill from the same stream). Weight matrices
initialize to normal(0, 0.02), biases and offsets to zero, norm gains to
one.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

WEIGHT_STD = 0.02
NORM_EPS = 1e-5
REL_BIAS_DIRECT_LIMIT = 512  # below: direct Toeplitz; at or above: factorized
REL_BIAS_FACTOR_DIM = 128


class ParamInit:
    """Creates named parameter tensors with per-name deterministic streams."""

    def __init__(self, seed: int, dtype=np.float64):
        self.seed = int(seed)
        self.dtype = dtype
        self.table: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.table:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True)
        self.table[name] = t
        return t

    def normal(self, name: str, shape, std: float = WEIGHT_STD) -> Tensor:
        rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
        return self._register(name, rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._register(name, np.ones(shape))

    def full(self, name: str, shape, value: float) -> Tensor:
        return self._register(name, np.full(shape, float(value)))


def iter_params(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk (possibly nested) param dataclasses yielding (name, tensor)."""
    for f in fields(obj):
        val = getattr(obj, f.name)
        name = f"{prefix}.{f.name}" if prefix else f.name
        if isinstance(val, Tensor):
            yield name, val
        elif hasattr(val, "__dataclass_fields__"):
            yield from iter_params(val, name)


def param_count(obj) -> int:
    return sum(t.size for _, t in iter_params(obj))


# ---------------------------------------------------------------------------
# Dense projection
# ---------------------------------------------------------------------------


@dataclass
class DenseParams:
    weight: Tensor  # [d_in, d_out]
    bias: Tensor    # [d_out]


def make_dense(init: ParamInit, name: str, d_in: int, d_out: int) -> DenseParams:
    return DenseParams(
        weight=init.normal(f"{name}.weight", (d_in, d_out)),
        bias=init.zeros(f"{name}.bias", (d_out,)),
    )


def dense(x: Tensor, p: DenseParams) -> Tensor:
    d_in, d_out = p.weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"dense expects last extent {d_in}, got {x.shape}")
    lead = x.shape[:-1]
    n = int(np.prod(lead, dtype=np.int64)) if lead else 1
    h = ops.reshape(x, (n, d_in))
    y = ops.add(ops.contract(h, p.weight, "nd,de->ne"), p.bias)
    return ops.reshape(y, (*lead, d_out))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class NormParams:
    kind: str                      # "layer" | "scale"
    gamma: Optional[Tensor] = None  # [d] (layer norm)
    beta: Optional[Tensor] = None   # [d] (layer norm)
    scalar: Optional[Tensor] = None  # () (scale norm)
    eps: float = NORM_EPS


def make_norm(init: ParamInit, name: str, d: int, kind: str = "layer") -> NormParams:
    if kind == "layer":
        return NormParams(kind, gamma=init.ones(f"{name}.gamma", (d,)),
                          beta=init.zeros(f"{name}.beta", (d,)))
    if kind == "scale":
        return NormParams(kind, scalar=init.ones(f"{name}.scalar", ()))
    raise ValueError(f"unknown norm kind {kind!r}")


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    mu = ops.reduce(x, "mean", axes=-1, keepdims=True)
    xc = ops.sub(x, mu)
    var = ops.reduce(ops.unary(xc, "square"), "mean", axes=-1, keepdims=True)
    y = ops.div(xc, ops.unary(ops.shift(var, p.eps), "sqrt"))
    return ops.add(ops.mul(y, p.gamma), p.beta)


def scale_norm(x: Tensor, p: NormParams) -> Tensor:
    ms = ops.reduce(ops.unary(x, "square"), "mean", axes=-1, keepdims=True)
    y = ops.div(x, ops.unary(ops.shift(ms, p.eps), "sqrt"))
    return ops.mul(y, p.scalar)


def norm(x: Tensor, p: NormParams) -> Tensor:
    return layer_norm(x, p) if p.kind == "layer" else scale_norm(x, p)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    # Shift by a detached row max: gradients are unchanged by any constant shift.
    m = ops.stop_gradient(ops.reduce(x, "max", axes=-1, keepdims=True))
    e = ops.unary(ops.sub(x, m), "exp")
    z = ops.reduce(e, "sum", axes=-1, keepdims=True)
    return ops.div(e, z)


def log_softmax_rows(x: Tensor) -> Tensor:
    m = ops.stop_gradient(ops.reduce(x, "max", axes=-1, keepdims=True))
    shifted = ops.sub(x, m)
    z = ops.reduce(ops.unary(shifted, "exp"), "sum", axes=-1, keepdims=True)
    return ops.sub(shifted, ops.unary(z, "log"))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "softmax_rows":
        return softmax_rows(x)
    if kind in ("relu2", "silu", "gelu"):
        return ops.unary(x, kind)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# Per-head scale/offset
# ---------------------------------------------------------------------------


@dataclass
class ScaleOffsetParams:
    gamma: Tensor  # [H, s]
    beta: Tensor   # [H, s]


def make_scale_offset(init: ParamInit, name: str, heads: int, s: int) -> ScaleOffsetParams:
    if heads not in (2, 4):
        raise ValueError(f"scale/offset head count must be 2 or 4, got {heads}")
    return ScaleOffsetParams(
        gamma=init.normal(f"{name}.gamma", (heads, s)),
        beta=init.zeros(f"{name}.beta", (heads, s)),
    )


def scale_offset(z: Tensor, p: ScaleOffsetParams, head: int) -> Tensor:
    """Per-dim affine of z using row `head` of the gamma/beta stack."""
    heads, s = p.gamma.shape
    if not 0 <= head < heads:
        raise ShapeError(f"head {head} out of range for {heads} heads")
    if z.shape[-1] != s:
        raise ShapeError(f"scale_offset expects last extent {s}, got {z.shape}")
    gamma_h = ops.reshape(ops.slice_axis(p.gamma, 0, head, head + 1), (s,))
    beta_h = ops.reshape(ops.slice_axis(p.beta, 0, head, head + 1), (s,))
    return ops.add(ops.mul(z, gamma_h), beta_h)


# ---------------------------------------------------------------------------
# Positions: ScaledSin, RoPE, relative bias
# ---------------------------------------------------------------------------


def sinusoid_tables(positions: np.ndarray, half: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """sin/cos of position*inv_freq with inv_freq_k = 10000^(-k/half)."""
    inv_freq = 10000.0 ** (-np.arange(half, dtype=np.float64) / float(half))
    angles = positions.astype(np.float64)[..., None] * inv_freq
    return np.sin(angles).astype(dtype), np.cos(angles).astype(dtype)


@dataclass
class ScaledSinParams:
    scalar: Tensor  # (), initialized 1/sqrt(d)


def make_scaled_sin(init: ParamInit, name: str, d: int) -> ScaledSinParams:
    return ScaledSinParams(scalar=init.full(f"{name}.scalar", (), 1.0 / d ** 0.5))


@lru_cache(maxsize=64)
def _scaled_sin_table(t: int, offset: int, d: int, dtype_name: str) -> np.ndarray:
    if d % 2:
        raise ShapeError(f"scaled_sin needs an even width, got {d}")
    pos = np.arange(offset, offset + t, dtype=np.float64)
    sin, cos = sinusoid_tables(pos, d // 2, np.dtype(dtype_name))
    table = np.concatenate([sin, cos], axis=-1)
    table.flags.writeable = False
    return table


def scaled_sin(t: int, d: int, p: ScaledSinParams, offset: int = 0) -> Tensor:
    """[t, d] sinusoidal absolute positions times the learned scalar."""
    table = _scaled_sin_table(t, offset, d, p.scalar.dtype.name)
    return ops.mul(ops.constant(table), p.scalar)


@lru_cache(maxsize=256)
def _rope_tables(spatial: tuple[int, ...], middle: int, half: int, offset: int,
                 dtype_name: str, negate: bool) -> tuple[np.ndarray, np.ndarray]:
    total = int(np.prod(spatial, dtype=np.int64))
    pos = np.arange(offset, offset + total, dtype=np.float64).reshape(spatial)
    sin, cos = sinusoid_tables(pos, half, np.dtype(dtype_name))
    if negate:
        sin = -sin
    shape = spatial + (1,) * middle + (half,)
    sin, cos = sin.reshape(shape), cos.reshape(shape)
    sin.flags.writeable = False
    cos.flags.writeable = False
    return sin, cos


def rope(x: Tensor, axes, offset: int = 0, negate: bool = False) -> Tensor:
    """Rotary positions over the row-major flattening of `axes`.

    Splits the feature axis in half and rotates pairs (x1[k], x2[k]) by
    angle position*inv_freq_k. Axes between the last position axis and the
    feature axis (e.g. a head-stack axis) broadcast. `offset` shifts all
    positions (streaming decode uses the global token index); `negate`
    rotates backwards, the exact inverse.
    """
    if isinstance(axes, int):
        axes = [axes]
    axes = [a % x.ndim for a in axes]
    if axes != list(range(axes[0], axes[0] + len(axes))) or axes[-1] >= x.ndim - 1:
        raise ShapeError(f"rope axes {axes} must be consecutive and before the feature axis")
    feature = x.shape[-1]
    if feature % 2:
        raise ShapeError(f"rope needs an even feature extent, got {feature}")
    half = feature // 2
    spatial = tuple(x.shape[a] for a in axes)
    middle = x.ndim - 2 - axes[-1]
    sin, cos = _rope_tables(spatial, middle, half, offset, x.dtype.name, negate)
    sin_t, cos_t = ops.constant(sin), ops.constant(cos)
    x1, x2 = ops.split(x, [half, half], axis=-1)
    out1 = ops.sub(ops.mul(x1, cos_t), ops.mul(x2, sin_t))
    out2 = ops.add(ops.mul(x2, cos_t), ops.mul(x1, sin_t))
    return ops.concat([out1, out2], axis=-1)


@dataclass
class RelBiasParams:
    n: int
    w: Optional[Tensor] = None  # [2n-1] when n < REL_BIAS_DIRECT_LIMIT
    a: Optional[Tensor] = None  # [128] otherwise
    b: Optional[Tensor] = None  # [128]


def make_rel_bias(init: ParamInit, name: str, n: int) -> RelBiasParams:
    if n < 1:
        raise ValueError(f"bias length must be >= 1, got {n}")
    if n < REL_BIAS_DIRECT_LIMIT:
        return RelBiasParams(n=n, w=init.normal(f"{name}.w", (2 * n - 1,)))
    return RelBiasParams(
        n=n,
        a=init.normal(f"{name}.a", (REL_BIAS_FACTOR_DIM,)),
        b=init.normal(f"{name}.b", (REL_BIAS_FACTOR_DIM,)),
    )


def rel_pos_bias(n: int, p: RelBiasParams) -> Tensor:
    """[n, n] Toeplitz attention bias.

    Short lengths assemble the matrix from a length-2n-1 vector by the
    pad/tile/reshape route, laid out so that t[i][j] = w[(n-1) + (i-j)].
    Long lengths take the outer product of two rotary-encoded vectors,
    which is Toeplitz because rotary inner products depend only on the
    position difference.
    """
    if n != p.n:
        raise ShapeError(f"bias built for length {p.n}, asked for {n}")
    if p.w is not None:
        w = ops.flip(p.w, 0)                                   # [2n-1]
        t = ops.pad(w, [(0, n)])                               # [3n-1]
        t = ops.broadcast_to(ops.reshape(t, (1, 3 * n - 1)), (n, 3 * n - 1))
        t = ops.reshape(t, (n * (3 * n - 1),))
        t = ops.slice_axis(t, 0, 0, n * (3 * n - 1) - n)
        t = ops.reshape(t, (n, 3 * n - 2))
        r = (2 * n - 1) // 2
        return ops.slice_axis(t, 1, r, (3 * n - 2) - r)        # [n, n]
    dim = p.a.shape[0]
    a = rope(ops.broadcast_to(ops.reshape(p.a, (1, dim)), (n, dim)), axes=[0])
    b = rope(ops.broadcast_to(ops.reshape(p.b, (1, dim)), (n, dim)), axes=[0])
    return ops.contract(a, b, "mk,nk->mn")

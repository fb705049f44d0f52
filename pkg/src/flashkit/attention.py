"""Gated attention blocks: quadratic, mixed chunk, and reference baselines.

The quadratic block computes O = (U ⊙ A V) W_o + x where U, V and the
shared head representation come from one fused SiLU projection and A is a
squared-ReLU kernel over scaled q·k plus a Toeplitz bias. The mixed chunk
block splits the sequence into G chunks of size C and combines exact
quadratic attention inside each chunk with a chunk-level linear attention
across chunks; all major tensors (U, V, head base) are shared between the
two components, and only two extra scale/offset head rows are introduced.

Causal masking of the squared-ReLU kernel is multiplicative zeroing after
the kernel: there is no normalizer, so no -inf trick is needed. The
softmax kernel (ablation switch) masks additively before normalizing.

Chunk-level aggregation follows the normalized form: per-chunk summaries
K_h^T V_h / C averaged over visible chunks with a row-normalized segment
mask (0/0 -> 0). The unnormalized plain-sum form (exclusive cumulative sum
over chunks) is kept behind `form="plain_sum"` for oracle comparisons; it
assumes a single document.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import layers, ops
from .layers import (DenseParams, NormParams, ParamInit, RelBiasParams,
                     ScaleOffsetParams)
from .tensor import ShapeError, Tensor

NEG_INF = -1e30  # additive mask for softmax kernels; underflows to exact 0


@lru_cache(maxsize=32)
def causal_keep_mask(n: int, dtype_name: str) -> np.ndarray:
    """[n, n] lower triangle (incl. diagonal) of ones: multiplicative mask."""
    m = np.tril(np.ones((n, n), dtype=np.dtype(dtype_name)))
    m.flags.writeable = False
    return m


@lru_cache(maxsize=32)
def causal_additive_mask(n: int, dtype_name: str) -> np.ndarray:
    m = np.triu(np.full((n, n), NEG_INF, dtype=np.dtype(dtype_name)), k=1)
    m.flags.writeable = False
    return m


# ---------------------------------------------------------------------------
# Segment mask
# ---------------------------------------------------------------------------


def segment_ids_to_mask(segment_ids: np.ndarray, causal: bool, dtype=np.float64) -> Tensor:
    """[B, G, G] chunk-visibility weights from per-token document ids.

    Chunk g sees chunk h iff their id ranges overlap (ids are non-decreasing
    within an example) and, causally, h < g. Rows are normalized by their
    sum with 0/0 -> 0, so aggregation over visible chunks is a mean.
    """
    ids = np.asarray(segment_ids)
    if ids.ndim != 3:
        raise ShapeError(f"segment ids must be [B, G, C], got {ids.shape}")
    mn = ids.min(axis=-1)  # [B, G]
    mx = ids.max(axis=-1)
    mask = np.logical_and(
        mn[:, :, None] <= mx[:, None, :],
        mx[:, :, None] >= mn[:, None, :],
    ).astype(dtype)
    if causal:
        g = ids.shape[1]
        mask = mask * (1.0 - np.tril(np.ones((g, g), dtype=dtype)).T)  # strictly lower
    row = mask.sum(axis=-1, keepdims=True)
    mask = np.divide(mask, row, out=np.zeros_like(mask), where=row != 0)
    return ops.constant(mask)


def single_segment_ids(batch: int, g: int, c: int) -> np.ndarray:
    return np.zeros((batch, g, c), dtype=np.int64)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def quad_kernel(q: Tensor, k: Tensor, bias: Tensor, length_scale: int,
                causal: bool, kind: str = "relu2") -> Tensor:
    """Token-token attention weights for q, k of shape [..., n, s].

    relu2: relu(q k^T / length_scale + bias)^2, then multiplicative causal
    zeroing. softmax: rows of softmax(q k^T / sqrt(s) + bias) with an
    additive causal mask.
    """
    n = q.shape[-2]
    if bias.shape != (n, n):
        raise ShapeError(f"bias shape {bias.shape} does not match length {n}")
    if q.ndim == 3:
        spec = "bns,bms->bnm"
    elif q.ndim == 4:
        spec = "bgns,bgms->bgnm"
    else:
        raise ShapeError(f"quad_kernel expects rank 3 or 4, got {q.shape}")
    scores = ops.contract(q, k, spec)
    if kind == "relu2":
        a = ops.unary(ops.add(ops.scale(scores, 1.0 / length_scale), bias), "relu2")
        if causal:
            a = ops.mul(a, ops.constant(causal_keep_mask(n, a.dtype.name)))
        return a
    if kind == "softmax":
        logits = ops.add(ops.scale(scores, 1.0 / math.sqrt(q.shape[-1])), bias)
        if causal:
            logits = ops.add(logits, ops.constant(causal_additive_mask(n, logits.dtype.name)))
        return layers.softmax_rows(logits)
    raise ValueError(f"unknown kernel kind {kind!r}")


# ---------------------------------------------------------------------------
# Gated attention unit (quadratic)
# ---------------------------------------------------------------------------


@dataclass
class GauParams:
    norm: NormParams
    fused: DenseParams              # d -> 2e + s
    heads: ScaleOffsetParams        # [2, s] quadratic / [4, s] mixed chunk
    bias: Optional[RelBiasParams]   # over T (quadratic) or C (mixed chunk)
    out: DenseParams                # e -> d
    e: int
    s: int
    identity_attn: bool = False     # test hook: short-circuit A to identity


def make_gau(init: ParamInit, name: str, d: int, e: int, s: int,
             bias_len: Optional[int], heads: int = 2, norm_kind: str = "layer",
             identity_attn: bool = False) -> GauParams:
    return GauParams(
        norm=layers.make_norm(init, f"{name}.norm", d, norm_kind),
        fused=layers.make_dense(init, f"{name}.fused", d, 2 * e + s),
        heads=layers.make_scale_offset(init, f"{name}.heads", heads, s),
        bias=layers.make_rel_bias(init, f"{name}.bias", bias_len) if bias_len else None,
        out=layers.make_dense(init, f"{name}.out", e, d),
        e=e,
        s=s,
        identity_attn=identity_attn,
    )


def _fused_split(x: Tensor, p: GauParams) -> tuple[Tensor, Tensor, Tensor]:
    uvb = ops.unary(layers.dense(layers.norm(x, p.norm), p.fused), "silu")
    u, v, base = ops.split(uvb, [p.e, p.e, p.s], axis=-1)
    return u, v, base


def gau_forward(x: Tensor, p: GauParams, causal: bool, kernel: str = "relu2") -> Tensor:
    """Quadratic GAU over x: [B, T, d] -> [B, T, d]."""
    t = x.shape[1]
    u, v, base = _fused_split(x, p)
    if p.identity_attn:
        vhat = v  # A = I retrieves each token's own value: the gating-only layer
    else:
        q = layers.rope(layers.scale_offset(base, p.heads, 0), axes=[1])
        k = layers.rope(layers.scale_offset(base, p.heads, 1), axes=[1])
        a = quad_kernel(q, k, layers.rel_pos_bias(t, p.bias), t, causal, kernel)
        vhat = ops.contract(a, v, "bnm,bme->bne")
    return ops.add(layers.dense(ops.mul(u, vhat), p.out), x)


def gau_gating_only(x: Tensor, p: GauParams) -> Tensor:
    """The gated-MLP computation O = (U ⊙ V) W_o + x on GAU's own parameters."""
    u, v, _ = _fused_split(x, p)
    return ops.add(layers.dense(ops.mul(u, v), p.out), x)


# ---------------------------------------------------------------------------
# Mixed chunk attention
# ---------------------------------------------------------------------------


def local_quadratic_attn(q: Tensor, k: Tensor, v: Tensor, bias: Tensor,
                         causal: bool, kind: str = "relu2") -> Tensor:
    """Exact attention within each chunk; no cross-chunk flow.

    q, k: [B, G, C, s]; v: [B, G, C, e]; bias: [C, C] shared across chunks.
    """
    c = q.shape[2]
    a = quad_kernel(q, k, bias, c, causal, kind)
    return ops.contract(a, v, "bgnm,bgme->bgne")


def global_linear_attn(lin_q: Tensor, lin_k: Tensor, v: Tensor,
                       mask: Optional[Tensor], causal: bool,
                       form: str = "normalized") -> Tensor:
    """Chunk-level linear attention: summaries K_h^T V_h aggregated across chunks.

    normalized: S_h = K_h^T V_h / C, combined with the row-normalized segment
    mask (mean over visible chunks; causal rows see h < g only).
    plain_sum: unnormalized sums of the mixed-chunk equations — exclusive
    cumulative sum over the chunk axis (causal) or a total sum (non-causal);
    single-document only, no mask.
    """
    c = lin_q.shape[2]
    if form == "normalized":
        if mask is None:
            raise ValueError("normalized aggregation needs a segment mask")
        summaries = ops.scale(ops.contract(lin_k, v, "bgcs,bgce->bgse"), 1.0 / c)
        agg = ops.contract(summaries, mask, "bhse,bgh->bgse")
    elif form == "plain_sum":
        summaries = ops.contract(lin_k, v, "bgcs,bgce->bgse")
        if causal:
            agg = ops.cumulative_sum(summaries, 1, exclusive=True)
        else:
            total = ops.reduce(summaries, "sum", axes=1, keepdims=True)
            agg = ops.broadcast_to(total, summaries.shape)
    else:
        raise ValueError(f"unknown aggregation form {form!r}")
    return ops.contract(lin_q, agg, "bgcs,bgse->bgce")


def flash_forward(x: Tensor, p: GauParams, segment_ids: Optional[np.ndarray],
                  causal: bool, kernel: str = "relu2",
                  linear_form: str = "normalized") -> Tensor:
    """Mixed chunk attention over x: [B, G, C, d] -> [B, G, C, d].

    Four heads come from the shared base (order: quad_q, quad_k, lin_q,
    lin_k), rotary positions span the flattened [G, C] grid, and the
    quadratic and linear contributions are added before gating.
    """
    b, g, c, _ = x.shape
    u, v, base = _fused_split(x, p)
    quad_q = layers.rope(layers.scale_offset(base, p.heads, 0), axes=[1, 2])
    quad_k = layers.rope(layers.scale_offset(base, p.heads, 1), axes=[1, 2])
    lin_q = layers.rope(layers.scale_offset(base, p.heads, 2), axes=[1, 2])
    lin_k = layers.rope(layers.scale_offset(base, p.heads, 3), axes=[1, 2])

    v_quad = local_quadratic_attn(quad_q, quad_k, v, layers.rel_pos_bias(c, p.bias),
                                  causal, kernel)
    if linear_form == "normalized":
        if segment_ids is None:
            segment_ids = single_segment_ids(b, g, c)
        mask = segment_ids_to_mask(segment_ids, causal, dtype=x.dtype)
    else:
        mask = None
    v_lin = global_linear_attn(lin_q, lin_k, v, mask, causal, linear_form)

    vhat = ops.add(v_quad, v_lin)
    return ops.add(layers.dense(ops.mul(u, vhat), p.out), x)


# ---------------------------------------------------------------------------
# Token-level linear attention (oracle and slow baseline)
# ---------------------------------------------------------------------------


def token_linear_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool) -> Tensor:
    """Linear attention at token granularity.

    Non-causal: Q (K^T V). Causal: out_t = Q_t M_{t-1} with M_t = M_{t-1}
    + K_t V_t^T — the exclusive form, realized as a cumulative sum with a
    T-step sequential dependency. Used as the chunk-level oracle and as the
    slow training baseline.
    """
    if causal:
        outer = ops.contract(k, v, "bts,bte->btse")
        state = ops.cumulative_sum(outer, 1, exclusive=True)
        return ops.contract(q, state, "bts,btse->bte")
    kv = ops.contract(k, v, "bts,bte->bse")
    return ops.contract(q, kv, "bts,bse->bte")


def linear_gau_forward(x: Tensor, p: GauParams, causal: bool) -> Tensor:
    """GAU gating around token-level linear attention (bias-free baseline)."""
    t = x.shape[1]
    u, v, base = _fused_split(x, p)
    q = layers.rope(layers.scale_offset(base, p.heads, 0), axes=[1])
    k = layers.rope(layers.scale_offset(base, p.heads, 1), axes=[1])
    vhat = ops.scale(token_linear_attention(q, k, v, causal), 1.0 / t)
    return ops.add(layers.dense(ops.mul(u, vhat), p.out), x)


# ---------------------------------------------------------------------------
# Multi-head softmax attention baseline
# ---------------------------------------------------------------------------


@dataclass
class MhsaParams:
    norm: NormParams
    q: DenseParams
    k: DenseParams
    v: DenseParams
    o: DenseParams
    heads: int


def make_mhsa(init: ParamInit, name: str, d: int, heads: int,
              norm_kind: str = "layer") -> MhsaParams:
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    if (d // heads) % 2:
        raise ValueError(f"head width {d // heads} must be even for rotary positions")
    return MhsaParams(
        norm=layers.make_norm(init, f"{name}.norm", d, norm_kind),
        q=layers.make_dense(init, f"{name}.q", d, d),
        k=layers.make_dense(init, f"{name}.k", d, d),
        v=layers.make_dense(init, f"{name}.v", d, d),
        o=layers.make_dense(init, f"{name}.o", d, d),
        heads=heads,
    )


def mhsa_forward(x: Tensor, p: MhsaParams, causal: bool, return_weights: bool = False):
    """Softmax multi-head self-attention with rotary q/k, pre-norm, residual."""
    b, t, d = x.shape
    hd = d // p.heads
    h = layers.norm(x, p.norm)

    def heads_view(dp: DenseParams) -> Tensor:
        y = ops.reshape(layers.dense(h, dp), (b, t, p.heads, hd))
        return ops.transpose(y, (0, 2, 1, 3))  # [B, H, T, hd]

    q = layers.rope(heads_view(p.q), axes=[2])
    k = layers.rope(heads_view(p.k), axes=[2])
    v = heads_view(p.v)
    scores = ops.scale(ops.contract(q, k, "bhts,bhms->bhtm"), 1.0 / math.sqrt(hd))
    if causal:
        scores = ops.add(scores, ops.constant(causal_additive_mask(t, scores.dtype.name)))
    weights = layers.softmax_rows(scores)
    ctx = ops.contract(weights, v, "bhtm,bhme->bhte")
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = ops.add(layers.dense(ctx, p.o), x)
    if return_weights:
        return out, weights
    return out

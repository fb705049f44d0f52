"""Incremental auto-regressive decoding.

The streaming path is written directly against numpy arrays (no tape):
decoding is forward-only, and keeping it independent of the parallel
Tensor path makes the streaming/parallel equivalence check a genuine
two-route comparison.

Mixed chunk layers keep constant state per layer: an [s, e] running mean
of folded chunk summaries plus fixed [C, *] buffers for the in-progress
chunk. Folding chunk g adds K_g^T V_g / C into the running mean, matching
the row-normalized causal segment mask of the parallel pass (single
document). Quadratic layers keep the full roped key/value history — the
O(T) baseline the mixed chunk cache is measured against.

Rotary positions use the global token index, and the quadratic kernel is
scaled by the configured context length (mixed chunk: by the chunk size),
exactly as a parallel pass over the full context sees them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers
from .attention import GauParams
from .model import Model, ModelConfig, ConfigError
from .tensor import Tensor


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _norm_row(x: np.ndarray, p: layers.NormParams) -> np.ndarray:
    if p.kind == "layer":
        mu = x.mean()
        xc = x - mu
        return xc / np.sqrt(xc.var() + p.eps) * p.gamma.data + p.beta.data
    ms = float(np.mean(x * x))
    return x / np.sqrt(ms + p.eps) * p.scalar.data


def _rope_row(x: np.ndarray, position: int) -> np.ndarray:
    half = x.shape[-1] // 2
    sin, cos = layers.sinusoid_tables(np.array([float(position)]), half, x.dtype)
    x1, x2 = x[:half], x[half:]
    return np.concatenate([x1 * cos[0] - x2 * sin[0], x2 * cos[0] + x1 * sin[0]])


def _bias_matrix(p: GauParams) -> np.ndarray:
    return layers.rel_pos_bias(p.bias.n, p.bias).data


@dataclass
class _FlashLayerState:
    aggregate: np.ndarray  # [s, e] mean of folded chunk summaries
    folded: int
    quad_k: np.ndarray     # [C, s], roped
    lin_k: np.ndarray      # [C, s], roped
    v: np.ndarray          # [C, e]
    fill: int
    bias: np.ndarray       # [C, C] constant

    def count(self) -> int:
        c = self.quad_k.shape[0]
        s = self.quad_k.shape[1]
        e = self.v.shape[1]
        return s * e + c * (2 * s + e)


@dataclass
class _QuadLayerState:
    k: np.ndarray          # [max_len, s] roped history (length rows used)
    v: np.ndarray          # [max_len, e]
    length: int
    bias: np.ndarray       # [T, T] constant

    def count(self) -> int:
        return self.length * (self.k.shape[1] + self.v.shape[1])


@dataclass
class DecodeCache:
    position: int = 0
    max_len: Optional[int] = None
    layers: list = field(default_factory=list)

    def footprint(self) -> int:
        """Streaming-state float count (excludes fixed bias tables)."""
        return sum(st.count() for st in self.layers)


def init_cache(model: Model, max_len: Optional[int] = None) -> DecodeCache:
    """Fresh decoding state. Errors on non-causal models."""
    cfg = model.cfg
    if not cfg.causal:
        raise ConfigError("decoding needs a causal model")
    if cfg.kind not in ("flash", "flash_quad"):
        raise ConfigError(f"no streaming decoder for kind {cfg.kind!r}")
    dtype = model.dtype
    s, e = cfg.head_size, cfg.e
    states = []
    for _, p in model.blocks:
        if cfg.kind == "flash":
            c = cfg.chunk
            states.append(_FlashLayerState(
                aggregate=np.zeros((s, e), dtype=dtype),
                folded=0,
                quad_k=np.zeros((c, s), dtype=dtype),
                lin_k=np.zeros((c, s), dtype=dtype),
                v=np.zeros((c, e), dtype=dtype),
                fill=0,
                bias=_bias_matrix(p).astype(dtype),
            ))
        else:
            limit = max_len or cfg.context
            states.append(_QuadLayerState(
                k=np.zeros((limit, s), dtype=dtype),
                v=np.zeros((limit, e), dtype=dtype),
                length=0,
                bias=_bias_matrix(p).astype(dtype),
            ))
    if cfg.kind == "flash_quad":
        max_len = max_len or cfg.context
        if max_len > cfg.context:
            raise ConfigError(
                f"quadratic decode is bounded by the trained context {cfg.context}")
    return DecodeCache(position=0, max_len=max_len, layers=states)


def _kernel_row(qk: np.ndarray, bias_row: np.ndarray, length_scale: int,
                head_size: int, kind: str) -> np.ndarray:
    # mirrors quad_kernel: relu2 scales q.k by the span length, softmax by sqrt(s)
    if kind == "relu2":
        return np.square(np.maximum(qk / length_scale + bias_row, 0.0))
    logits = qk / np.sqrt(float(head_size)) + bias_row
    w = np.exp(logits - logits.max())
    return w / w.sum()


def decode_step(model: Model, cache: DecodeCache, token: int) -> np.ndarray:
    """Feed one token, return next-token logits [table_size]."""
    cfg = model.cfg
    pos = cache.position
    if cache.max_len is not None and pos >= cache.max_len:
        raise ConfigError(f"decode position {pos} exceeds max length {cache.max_len}")
    dtype = model.dtype

    h = model.embedding.data[int(token)].copy()
    half_pos = layers.sinusoid_tables(np.array([float(pos)]), cfg.d // 2, dtype)
    h += np.concatenate([half_pos[0][0], half_pos[1][0]]) * model.pos.scalar.data

    for (tag, p), st in zip(model.blocks, cache.layers):
        shortcut = h
        hn = _norm_row(h, p.norm)
        uvb = _silu(hn @ p.fused.weight.data + p.fused.bias.data)
        u = uvb[:p.e]
        v_row = uvb[p.e:2 * p.e]
        base = uvb[2 * p.e:]

        def head(i: int) -> np.ndarray:
            row = base * p.heads.gamma.data[i] + p.heads.beta.data[i]
            return _rope_row(row, pos)

        if cfg.kind == "flash":
            r = st.fill
            st.quad_k[r] = head(1)
            st.lin_k[r] = head(3)
            st.v[r] = v_row
            qq = head(0)
            weights = _kernel_row(st.quad_k[:r + 1] @ qq, st.bias[r, :r + 1],
                                  cfg.chunk, cfg.head_size, cfg.kernel)
            vhat = weights @ st.v[:r + 1]
            if st.folded:
                vhat = vhat + head(2) @ st.aggregate
            st.fill += 1
            if st.fill == cfg.chunk:
                summary = st.lin_k.T @ st.v / cfg.chunk
                st.aggregate = (st.aggregate * st.folded + summary) / (st.folded + 1)
                st.folded += 1
                st.fill = 0
        else:
            t = st.length
            st.k[t] = head(1)
            st.v[t] = v_row
            st.length += 1
            qq = head(0)
            weights = _kernel_row(st.k[:t + 1] @ qq, st.bias[t, :t + 1],
                                  cfg.context, cfg.head_size, cfg.kernel)
            vhat = weights @ st.v[:t + 1]

        h = (u * vhat) @ p.out.weight.data + p.out.bias.data + shortcut

    h = _norm_row(h, model.final_norm)
    if model.out_proj is not None:
        logits = h @ model.out_proj.weight.data + model.out_proj.bias.data
    else:
        logits = model.embedding.data @ h
    cache.position += 1
    return logits


def greedy_decode(model: Model, prompt: bytes, max_new_tokens: int,
                  max_len: Optional[int] = None,
                  step_times: Optional[list] = None) -> bytes:
    """Feed the prompt, then emit argmax tokens; returns the new bytes."""
    if not prompt:
        raise ValueError("prompt must hold at least one byte")
    cache = init_cache(model, max_len=max_len)
    logits = None
    for b in prompt:
        t0 = time.perf_counter()
        logits = decode_step(model, cache, b)
        if step_times is not None:
            step_times.append(time.perf_counter() - t0)
    out = bytearray()
    for _ in range(max_new_tokens):
        nxt = int(np.argmax(logits[:model.cfg.vocab]))  # never emit the mask id
        out.append(nxt)
        t0 = time.perf_counter()
        logits = decode_step(model, cache, nxt)
        if step_times is not None:
            step_times.append(time.perf_counter() - t0)
    return bytes(out)

"""Differentiable ops over Tensors.

Every op computes its value eagerly with numpy and, when a tape is active
and an input requires grad, records a backward rule. Elementwise binaries
broadcast numpy-style (trailing-axis alignment only); their backward sums
the gradient over broadcast axes.

contract() is a two-operand einsum. The forward is lowered to a batched
matmul (transpose/reshape + np.matmul) whenever the spec is a plain
contraction, falling back to np.einsum otherwise; gradients are themselves
contractions, so the backward reuses the same lowering.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, active_tape, as_contiguous

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _StepCounter:
    """Counts elements folded by sequential scans (cumulative sums).

    One cumulative sum over an axis of extent n is n dependent accumulation
    steps; this is what shrinks from T to T/C when causal aggregation moves
    from tokens to chunks.
    """

    def __init__(self):
        self.value = 0

    def reset(self) -> None:
        self.value = 0

    def add(self, n: int) -> None:
        self.value += int(n)


sequential_steps = _StepCounter()


def _record(inputs: tuple[Tensor, ...], out_data: np.ndarray, make_backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, make_backward())
    return out


def constant(data, dtype=None) -> Tensor:
    """A tensor that never takes gradient (masks, position tables, ...)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# contract: two-operand einsum
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _contract_plan(spec: str):
    try:
        lhs, out = spec.split("->")
        a_lab, b_lab = lhs.split(",")
    except ValueError as exc:
        raise ShapeError(f"contraction spec must look like 'ab,bc->ac', got {spec!r}") from exc
    for part in (a_lab, b_lab, out):
        if not all(c.isalpha() for c in part):
            raise ShapeError(f"bad index letters in contraction spec {spec!r}")
    if len(set(a_lab)) != len(a_lab) or len(set(b_lab)) != len(b_lab) or len(set(out)) != len(out):
        raise ShapeError(f"repeated index within one operand/output in {spec!r}")
    known = set(a_lab) | set(b_lab)
    if not set(out) <= known:
        raise ShapeError(f"output index not present in inputs in {spec!r}")

    lone_a = [c for c in a_lab if c not in b_lab and c not in out]
    lone_b = [c for c in b_lab if c not in a_lab and c not in out]
    eff_a = [c for c in a_lab if c not in lone_a]
    eff_b = [c for c in b_lab if c not in lone_b]
    batch = [c for c in out if c in eff_a and c in eff_b]
    con = [c for c in eff_a if c in eff_b and c not in out]
    a_only = [c for c in eff_a if c not in eff_b]
    b_only = [c for c in eff_b if c not in eff_a]
    return {
        "a_lab": a_lab,
        "b_lab": b_lab,
        "out": out,
        "lone_a": lone_a,
        "lone_b": lone_b,
        "eff_a": eff_a,
        "eff_b": eff_b,
        "batch": batch,
        "con": con,
        "a_only": a_only,
        "b_only": b_only,
    }


def _contract_arrays(spec: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    plan = _contract_plan(spec)
    a_lab, b_lab = plan["a_lab"], plan["b_lab"]
    if a.ndim != len(a_lab) or b.ndim != len(b_lab):
        raise ShapeError(
            f"operand rank does not match spec {spec!r}: got {a.shape} and {b.shape}"
        )
    ext: dict[str, int] = {}
    for lab, shape in ((a_lab, a.shape), (b_lab, b.shape)):
        for c, n in zip(lab, shape):
            if c in ext and ext[c] != n:
                raise ShapeError(f"extent mismatch for index '{c}': {ext[c]} vs {n}")
            ext[c] = n

    if plan["lone_a"]:
        a = a.sum(axis=tuple(a_lab.index(c) for c in plan["lone_a"]))
    if plan["lone_b"]:
        b = b.sum(axis=tuple(b_lab.index(c) for c in plan["lone_b"]))

    eff_a, eff_b = plan["eff_a"], plan["eff_b"]
    batch, con, a_only, b_only = plan["batch"], plan["con"], plan["a_only"], plan["b_only"]
    bshape = [ext[c] for c in batch]
    m = int(np.prod([ext[c] for c in a_only], dtype=np.int64)) if a_only else 1
    k = int(np.prod([ext[c] for c in con], dtype=np.int64)) if con else 1
    n = int(np.prod([ext[c] for c in b_only], dtype=np.int64)) if b_only else 1

    a2 = a.transpose([eff_a.index(c) for c in batch + a_only + con]).reshape(bshape + [m, k])
    b2 = b.transpose([eff_b.index(c) for c in batch + con + b_only]).reshape(bshape + [k, n])
    c2 = np.matmul(a2, b2)
    cur = batch + a_only + b_only
    c2 = c2.reshape([ext[c] for c in cur])
    out = plan["out"]
    if cur != list(out):
        c2 = as_contiguous(c2.transpose([cur.index(c) for c in out]))
    return c2


def _grad_contract(g: np.ndarray, other: np.ndarray, out_lab: str, other_lab: str,
                   target_lab: str, target_shape: tuple[int, ...]) -> np.ndarray:
    kept = [c for c in target_lab if c in out_lab or c in other_lab]
    grad = _contract_arrays(f"{out_lab},{other_lab}->{''.join(kept)}", g, other)
    if len(kept) != len(target_lab):
        # Indices summed out alone in the forward: gradient broadcasts there.
        for ax, c in enumerate(target_lab):
            if c not in kept:
                grad = np.expand_dims(grad, ax)
        grad = np.broadcast_to(grad, target_shape)
    return grad


def contract(a: Tensor, b: Tensor, spec: str) -> Tensor:
    """Batched contraction of two tensors per an einsum-style spec."""
    out_data = _contract_arrays(spec, a.data, b.data)
    plan = _contract_plan(spec)

    def make_backward():
        a_dat, b_dat = a.data, b.data
        a_lab, b_lab, out = plan["a_lab"], plan["b_lab"], plan["out"]
        need_a, need_b = a.requires_grad, b.requires_grad

        def bwd(g: np.ndarray):
            ga = _grad_contract(g, b_dat, out, b_lab, a_lab, a_dat.shape) if need_a else None
            gb = _grad_contract(g, a_dat, out, a_lab, b_lab, b_dat.shape) if need_b else None
            return ga, gb

        return bwd

    return _record((a, b), out_data, make_backward)


# ---------------------------------------------------------------------------
# Elementwise maps
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: stable at both tails, one vectorized transcendental
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# kind -> (forward, d/dx as a function of (x, y=forward(x)))
_UNARY = {
    "neg": (np.negative, lambda x, y: -1.0),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / y),
    "square": (np.square, lambda x, y: 2.0 * x),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype)),
    "relu2": (
        lambda x: np.square(np.maximum(x, 0.0)),
        lambda x, y: 2.0 * np.maximum(x, 0.0),
    ),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "silu": (
        lambda x: x * _sigmoid(x),
        lambda x, y: (lambda s: s * (1.0 + x * (1.0 - s)))(_sigmoid(x)),
    ),
    "gelu": (
        lambda x: 0.5 * x * (1.0 + erf(x * _INV_SQRT2)),
        lambda x, y: 0.5 * (1.0 + erf(x * _INV_SQRT2))
        + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI,
    ),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
}


def unary(x: Tensor, kind: str) -> Tensor:
    if kind == "silu":  # cache the sigmoid: it is most of both passes
        sig = _sigmoid(x.data)
        out_data = x.data * sig

        def make_silu_backward():
            x_dat = x.data

            def bwd(g):
                return (g * (sig * (1.0 + x_dat * (1.0 - sig))),)

            return bwd

        return _record((x,), out_data, make_silu_backward)
    try:
        fwd, deriv = _UNARY[kind]
    except KeyError:
        raise ShapeError(f"unknown unary kind {kind!r}") from None
    out_data = fwd(x.data)

    def make_backward():
        x_dat = x.data

        def bwd(g):
            return (g * deriv(x_dat, out_data),)

        return bwd

    return _record((x,), out_data, make_backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


_BINARY = {
    "add": (np.add, lambda a, b, g: g, lambda a, b, g: g),
    "sub": (np.subtract, lambda a, b, g: g, lambda a, b, g: -g),
    "mul": (np.multiply, lambda a, b, g: g * b, lambda a, b, g: g * a),
    "div": (np.divide, lambda a, b, g: g / b, lambda a, b, g: -g * a / (b * b)),
}


def binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        fwd, da, db = _BINARY[kind]
    except KeyError:
        raise ShapeError(f"unknown binary kind {kind!r}") from None
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"cannot broadcast shapes {a.shape} and {b.shape} for {kind!r}"
        ) from exc

    def make_backward():
        a_dat, b_dat = a.data, b.data
        need_a, need_b = a.requires_grad, b.requires_grad

        def bwd(g):
            ga = _unbroadcast(da(a_dat, b_dat, g), a_dat.shape) if need_a else None
            gb = _unbroadcast(db(a_dat, b_dat, g), b_dat.shape) if need_b else None
            return ga, gb

        return bwd

    return _record((a, b), out_data, make_backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return binary(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return binary(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return binary(a, b, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    return binary(a, b, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = x.data * c

    def make_backward():
        def bwd(g):
            return (g * c,)

        return bwd

    return _record((x,), out_data, make_backward)


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = x.data + c

    def make_backward():
        def bwd(g):
            return (g,)

        return bwd

    return _record((x,), out_data, make_backward)


# ---------------------------------------------------------------------------
# Reductions and scans
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x: Tensor, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    if kind == "sum":
        out_data = x.data.sum(axis=axes, keepdims=keepdims)
    elif kind == "mean":
        out_data = x.data.mean(axis=axes, keepdims=keepdims)
    elif kind == "max":
        out_data = x.data.max(axis=axes, keepdims=keepdims)
    else:
        raise ShapeError(f"unknown reduce kind {kind!r}")

    def make_backward():
        x_dat = x.data
        count = int(np.prod([x_dat.shape[ax] for ax in axes], dtype=np.int64))

        def expand(g):
            if not keepdims:
                for ax in axes:
                    g = np.expand_dims(g, ax)
            return g

        if kind == "sum":
            def bwd(g):
                return (np.broadcast_to(expand(g), x_dat.shape),)
        elif kind == "mean":
            def bwd(g):
                return (np.broadcast_to(expand(g) / count, x_dat.shape),)
        else:  # max: split evenly over ties
            kept_max = x_dat.max(axis=axes, keepdims=True)

            def bwd(g):
                mask = (x_dat == kept_max).astype(x_dat.dtype)
                ties = mask.sum(axis=axes, keepdims=True)
                return (np.broadcast_to(expand(g), x_dat.shape) * mask / ties,)

        return bwd

    return _record((x,), out_data, make_backward)


def _cumsum_arr(a: np.ndarray, axis: int, exclusive: bool) -> np.ndarray:
    if exclusive:
        incl = np.cumsum(a, axis=axis)
        zshape = list(a.shape)
        zshape[axis] = 1
        head = np.zeros(zshape, dtype=a.dtype)
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(0, a.shape[axis] - 1)
        return np.concatenate([head, incl[tuple(idx)]], axis=axis)
    return np.cumsum(a, axis=axis)


def cumulative_sum(x: Tensor, axis: int, exclusive: bool = False) -> Tensor:
    (axis,) = _norm_axes(axis, x.ndim)
    sequential_steps.add(x.shape[axis])
    out_data = _cumsum_arr(x.data, axis, exclusive)

    def make_backward():
        def bwd(g):
            rev = np.flip(g, axis=axis)
            return (as_contiguous(np.flip(_cumsum_arr(rev, axis, exclusive), axis=axis)),)

        return bwd

    return _record((x,), out_data, make_backward)


# ---------------------------------------------------------------------------
# Data movement
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc

    def make_backward():
        in_shape = x.shape

        def bwd(g):
            return (g.reshape(in_shape),)

        return bwd

    return _record((x,), out_data, make_backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {x.ndim}")
    out_data = as_contiguous(x.data.transpose(axes))

    def make_backward():
        inv = tuple(np.argsort(axes))

        def bwd(g):
            return (as_contiguous(g.transpose(inv)),)

        return bwd

    return _record((x,), out_data, make_backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    (axis,) = _norm_axes(axis, x.ndim)
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    out_data = as_contiguous(x.data[tuple(idx)])

    def make_backward():
        in_shape = x.shape

        def bwd(g):
            full = np.zeros(in_shape, dtype=g.dtype)
            full[tuple(idx)] = g
            return (full,)

        return bwd

    return _record((x,), out_data, make_backward)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    (axis,) = _norm_axes(axis, x.ndim)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    pieces, start = [], 0
    for size in sizes:
        pieces.append(slice_axis(x, axis, start, start + size))
        start += size
    return pieces


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    (axis,) = _norm_axes(axis, parts[0].ndim)
    out_data = np.concatenate([p.data for p in parts], axis=axis)

    def make_backward():
        sizes = [p.shape[axis] for p in parts]
        needs = [p.requires_grad for p in parts]

        def bwd(g):
            grads, start = [], 0
            for size, need in zip(sizes, needs):
                if need:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(start, start + size)
                    grads.append(as_contiguous(g[tuple(idx)]))
                else:
                    grads.append(None)
                start += size
            return grads

        return bwd

    return _record(tuple(parts), out_data, make_backward)


def pad(x: Tensor, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    pad_width = [(int(lo), int(hi)) for lo, hi in pad_width]
    if len(pad_width) != x.ndim:
        raise ShapeError(f"pad_width rank {len(pad_width)} != tensor rank {x.ndim}")
    out_data = np.pad(x.data, pad_width)

    def make_backward():
        idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))

        def bwd(g):
            return (as_contiguous(g[idx]),)

        return bwd

    return _record((x,), out_data, make_backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    try:
        out_data = as_contiguous(np.broadcast_to(x.data, shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc

    def make_backward():
        in_shape = x.shape

        def bwd(g):
            return (_unbroadcast(g, in_shape).reshape(in_shape),)

        return bwd

    return _record((x,), out_data, make_backward)


def flip(x: Tensor, axis: int) -> Tensor:
    (axis,) = _norm_axes(axis, x.ndim)
    out_data = as_contiguous(np.flip(x.data, axis=axis))

    def make_backward():
        def bwd(g):
            return (as_contiguous(np.flip(g, axis=axis)),)

        return bwd

    return _record((x,), out_data, make_backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids] (embedding); backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"gather ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather id out of range for table with {table.shape[0]} rows")
    out_data = table.data[ids]

    def make_backward():
        shape = table.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, ids, g)
            return (full,)

        return bwd

    return _record((table,), out_data, make_backward)

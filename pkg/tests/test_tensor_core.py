"""Tensor engine: contraction/elementwise/reduction oracles and tape gradients."""

import numpy as np
import pytest

from flashkit import ShapeError, Tensor, backward, record_tape
from flashkit import ops
from flashkit.gradcheck import finite_difference_check


def loop_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


# ---------------------------------------------------------------------------
# contract
# ---------------------------------------------------------------------------


def test_contract_identity():
    eye = Tensor(np.eye(2))
    v = Tensor([5.0, 7.0])
    out = ops.contract(eye, v, "ij,j->i")
    assert out.data.tolist() == [5.0, 7.0]


def test_contract_zeros_annihilate():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3, 4)))
    z = Tensor(np.zeros((2, 4, 5)))
    out = ops.contract(a, z, "bnm,bme->bne")
    assert np.all(out.data == 0.0)


def test_contract_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
    got = ops.contract(Tensor(a), Tensor(b), "ij,jk->ik").data
    assert np.allclose(got, loop_matmul(a, b), atol=1e-12)


def test_contract_bilinear():
    rng = np.random.default_rng(2)
    a1, a2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    lhs = ops.contract(Tensor(a1 + a2), Tensor(b), "ij,jk->ik").data
    rhs = (ops.contract(Tensor(a1), Tensor(b), "ij,jk->ik").data
           + ops.contract(Tensor(a2), Tensor(b), "ij,jk->ik").data)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_contract_shared_label_mismatch():
    with pytest.raises(ShapeError, match="extent mismatch for index 'j'"):
        ops.contract(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), "ij,jk->ik")


def test_contract_rejects_repeated_labels():
    with pytest.raises(ShapeError):
        ops.contract(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2,))), "ii,i->i")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def test_add_and_mul_identity():
    assert ops.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    x = np.random.default_rng(3).normal(size=(3, 2))
    out = ops.mul(Tensor(x), Tensor(np.ones_like(x)))
    assert np.array_equal(out.data, x)


def test_broadcast_matches_explicit_tiling():
    rng = np.random.default_rng(4)
    mat = rng.normal(size=(3, 2))
    row = rng.normal(size=(2,))
    got = ops.add(Tensor(mat), Tensor(row)).data
    want = mat + np.tile(row, (3, 1))
    assert np.array_equal(got, want)


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError, match="broadcast"):
        ops.add(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3,))))


# ---------------------------------------------------------------------------
# reduce
# ---------------------------------------------------------------------------


def test_reduce_mean_trivial():
    assert ops.reduce(Tensor([1.0, 2.0, 3.0]), "mean").item() == 2.0


def test_reduce_sum_empty_axis_is_zero():
    out = ops.reduce(Tensor(np.zeros((3, 0))), "sum", axes=1)
    assert out.shape == (3,)
    assert np.all(out.data == 0.0)


def test_moments_match_two_pass_loop():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 8))
    mean = ops.reduce(Tensor(x), "mean", axes=1).data
    xc = x - mean[:, None]
    var = ops.reduce(Tensor(xc * xc), "mean", axes=1).data
    for i in range(4):
        m = sum(x[i]) / 8
        v = sum((x[i] - m) ** 2) / 8
        assert abs(mean[i] - m) < 1e-12
        assert abs(var[i] - v) < 1e-12


def test_reduce_axis_out_of_range():
    with pytest.raises(ShapeError, match="out of range"):
        ops.reduce(Tensor(np.zeros((2, 2))), "sum", axes=2)


# ---------------------------------------------------------------------------
# cumulative sum
# ---------------------------------------------------------------------------


def test_cumsum_inclusive_exclusive():
    x = Tensor([1.0, 2.0, 3.0])
    assert ops.cumulative_sum(x, 0).data.tolist() == [1.0, 3.0, 6.0]
    assert ops.cumulative_sum(x, 0, exclusive=True).data.tolist() == [0.0, 1.0, 3.0]


def test_cumsum_exclusive_matches_slice_loop():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 4, 3))
    got = ops.cumulative_sum(Tensor(x), 1, exclusive=True).data
    want = np.zeros_like(x)
    for b in range(2):
        for i in range(4):
            for j in range(i):
                want[b, i] += x[b, j]
    assert np.allclose(got, want, atol=1e-12)


def test_exclusive_is_shifted_inclusive():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5,))
    incl = ops.cumulative_sum(Tensor(x), 0).data
    excl = ops.cumulative_sum(Tensor(x), 0, exclusive=True).data
    assert np.allclose(incl[:-1], excl[1:], atol=1e-12)


def test_cumsum_counts_sequential_steps():
    ops.sequential_steps.reset()
    ops.cumulative_sum(Tensor(np.zeros((2, 16, 3))), 1, exclusive=True)
    assert ops.sequential_steps.value == 16


# ---------------------------------------------------------------------------
# data movement
# ---------------------------------------------------------------------------


def test_split_concat_round_trip():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 5))
    parts = ops.split(Tensor(x), [2, 2, 1], axis=1)
    assert [p.shape for p in parts] == [(3, 2), (3, 2), (3, 1)]
    back = ops.concat(parts, axis=1)
    assert np.array_equal(back.data, x)


def test_transpose_twice_is_identity():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 4))
    out = ops.transpose(ops.transpose(Tensor(x), (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(out.data, x)


def test_pad_then_slice_recovers_interior():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 4))
    padded = ops.pad(Tensor(x), [(1, 2), (0, 3)])
    assert padded.shape == (6, 7)
    # index arithmetic: interior of the padded array is the original
    inner = ops.slice_axis(ops.slice_axis(padded, 0, 1, 4), 1, 0, 4)
    assert np.array_equal(inner.data, x)
    assert np.array_equal(padded.data[1:4, 0:4], x)


def test_split_sizes_must_sum():
    with pytest.raises(ShapeError, match="sum"):
        ops.split(Tensor(np.zeros((2, 5))), [2, 2], axis=1)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with record_tape() as tape:
        loss = ops.mul(x, x)
        backward(tape, loss)
    assert x.grad == pytest.approx(6.0)


def test_backward_relu2():
    # d/dx relu(x)^2 = 2*relu(x): 0 at -1, 4 at 2 (central differences agree).
    x = Tensor([-1.0, 2.0], requires_grad=True)
    with record_tape() as tape:
        loss = ops.reduce(ops.unary(x, "relu2"), "sum")
        backward(tape, loss)
    assert x.grad.tolist() == [0.0, 4.0]


def test_backward_two_layer_composition_vs_fd():
    rng = np.random.default_rng(11)
    w1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)))

    def f():
        h = ops.unary(ops.contract(x, w1, "ni,io->no"), "tanh")
        y = ops.contract(h, w2, "ni,io->no")
        return ops.reduce(ops.unary(y, "square"), "sum")

    assert finite_difference_check(f, [w1, w2]) < 1e-4


def test_fanout_accumulates():
    # x used twice: d(x*x + 3x)/dx = 2x + 3
    x = Tensor(2.0, requires_grad=True)
    with record_tape() as tape:
        loss = ops.add(ops.mul(x, x), ops.scale(x, 3.0))
        backward(tape, loss)
    assert x.grad == pytest.approx(7.0)


def test_leaf_off_path_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    with record_tape() as tape:
        tape.watch(unused)
        loss = ops.reduce(ops.mul(x, x), "sum")
        backward(tape, loss)
    assert np.array_equal(unused.grad, np.zeros(1))


def test_backward_rejects_nonscalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with record_tape() as tape:
        y = ops.mul(x, x)
        with pytest.raises(ShapeError, match="scalar"):
            backward(tape, y)


def test_no_tape_means_no_grad_tracking():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ops.mul(x, x)  # no active tape: plain forward
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# finite differences across the whole op set
# ---------------------------------------------------------------------------


def test_fd_linear_function_is_exact():
    x = Tensor([1.0, -2.0, 0.5], requires_grad=True)

    def f():
        return ops.reduce(ops.scale(x, 3.0), "sum")

    assert finite_difference_check(f, [x]) < 1e-9


def test_fd_relu_away_from_kink():
    # relu is non-differentiable at 0; the check is specified for inputs
    # bounded away from the kink, so probe points are kept at |x| >> eps.
    x = Tensor([-1.0, 2.0, 0.5, -0.25], requires_grad=True)

    def f():
        return ops.reduce(ops.unary(x, "relu"), "sum")

    assert finite_difference_check(f, [x], eps=1e-6) < 1e-9


UNARY_KINDS = ["neg", "exp", "sigmoid", "silu", "gelu", "tanh", "square", "relu2"]


@pytest.mark.parametrize("kind", UNARY_KINDS)
def test_fd_unary(kind):
    rng = np.random.default_rng(hash(kind) % 2**31)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def f():
        return ops.reduce(ops.unary(x, kind), "sum")

    assert finite_difference_check(f, [x]) < 1e-4


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_fd_binary_with_broadcast(kind):
    rng = np.random.default_rng(100)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)) + 3.0, requires_grad=True)  # away from 0 for div

    def f():
        return ops.reduce(ops.unary(ops.binary(a, b, kind), "square"), "sum")

    assert finite_difference_check(f, [a, b]) < 1e-4


@pytest.mark.parametrize("kind,axes,keep", [("sum", 1, False), ("mean", (0, 2), True), ("max", 2, False)])
def test_fd_reduce(kind, axes, keep):
    rng = np.random.default_rng(101)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

    def f():
        return ops.reduce(ops.unary(ops.reduce(x, kind, axes=axes, keepdims=keep), "square"), "sum")

    assert finite_difference_check(f, [x]) < 1e-4


@pytest.mark.parametrize("exclusive", [False, True])
def test_fd_cumsum(exclusive):
    rng = np.random.default_rng(102)
    x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)

    def f():
        return ops.reduce(ops.unary(ops.cumulative_sum(x, 1, exclusive=exclusive), "square"), "sum")

    assert finite_difference_check(f, [x]) < 1e-4


def test_fd_data_movement_chain():
    rng = np.random.default_rng(103)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)

    def f():
        a, b, c = ops.split(x, [2, 3, 1], axis=1)
        y = ops.concat([c, a, b], axis=1)
        y = ops.transpose(y, (1, 0))
        y = ops.pad(y, [(1, 0), (0, 2)])
        y = ops.reshape(y, (7, 6))
        y = ops.flip(y, 0)
        y = ops.slice_axis(y, 0, 1, 6)
        return ops.reduce(ops.unary(y, "square"), "sum")

    assert finite_difference_check(f, [x]) < 1e-4


def test_fd_broadcast_and_contract():
    rng = np.random.default_rng(104)
    w = Tensor(rng.normal(size=(5,)), requires_grad=True)
    m = Tensor(rng.normal(size=(3, 5)), requires_grad=True)

    def f():
        tiled = ops.broadcast_to(ops.reshape(w, (1, 5)), (3, 5))
        y = ops.contract(tiled, m, "nk,mk->nm")
        return ops.reduce(ops.unary(y, "square"), "sum")

    assert finite_difference_check(f, [w, m]) < 1e-4


def test_fd_gather_rows():
    rng = np.random.default_rng(105)
    table = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    ids = np.array([[0, 2, 2], [5, 0, 1]])

    def f():
        return ops.reduce(ops.unary(ops.gather_rows(table, ids), "square"), "sum")

    assert finite_difference_check(f, [table]) < 1e-4


def test_fd_aborts_on_nonfinite():
    x = Tensor([-1.0], requires_grad=True)

    def f():
        with np.errstate(invalid="ignore"):  # nan is the point here
            return ops.reduce(ops.unary(x, "log"), "sum")

    with pytest.raises(RuntimeError, match="non-finite|aborted"):
        finite_difference_check(f, [x])


def test_forward_stays_finite_on_finite_inputs():
    rng = np.random.default_rng(106)
    x = Tensor(rng.normal(size=(4, 4)) * 50.0)
    for kind in UNARY_KINDS + ["relu"]:
        out = ops.unary(x, kind)
        assert np.all(np.isfinite(out.data)), kind

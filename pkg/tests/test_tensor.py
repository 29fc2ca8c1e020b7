import math

import numpy as np
import pytest

import sasenet.tensor as T
from sasenet.tensor import (NumericError, ShapeError, Tensor, as_tensor,
                            backward, concat, full, matmul, randn, reduce,
                            reshape, softmax, split, transpose, zeros)


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


# ---------------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------------

def test_zeros():
    t = zeros((2, 2))
    assert t.shape == (2, 2)
    assert (t.data == 0).all()


def test_full_constant():
    t = full((3,), 1.5)
    assert np.array_equal(t.data, [1.5, 1.5, 1.5])


def test_randn_deterministic():
    a = randn((4,), seed=7)
    b = randn((4,), seed=7)
    assert np.array_equal(a.data, b.data)
    c = randn((4,), seed=8)
    assert not np.array_equal(a.data, c.data)


def test_randn_requires_seed():
    with pytest.raises(ValueError):
        randn((4,), seed=None)


def test_from_values_length_mismatch():
    with pytest.raises(ShapeError):
        T.from_values([1.0, 2.0, 3.0], shape=(2, 2))


def test_invalid_extent():
    with pytest.raises(ShapeError):
        zeros((0, 3))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def test_mul_broadcast_scalar_like():
    out = as_tensor([1.0, 2.0, 3.0]) * as_tensor([2.0, 2.0, 2.0])
    assert np.array_equal(out.data, [2.0, 4.0, 6.0])


def test_sigmoid_at_zero():
    out = T.sigmoid(zeros((1,)))
    assert out.data[0] == pytest.approx(0.5, abs=0)


def test_broadcast_channel_times_spatial():
    # (C,1,1) * (1,H,W) -> (C,H,W)
    q = randn((5, 1, 1), seed=0)
    k = randn((1, 4, 6), seed=1)
    out = q * k
    assert out.shape == (5, 4, 6)
    assert np.allclose(out.data, q.data * k.data)


@pytest.mark.parametrize("seed", range(5))
def test_broadcast_mul_randomized_shapes(seed):
    rng = np.random.default_rng(seed)
    c, h, w = rng.integers(1, 7, size=3)
    out = randn((int(c), 1, 1), seed=seed) * randn((1, int(h), int(w)), seed=seed + 99)
    assert out.shape == (c, h, w)


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError):
        as_tensor([1.0, 2.0]) + as_tensor([1.0, 2.0, 3.0])


def test_div_by_zero_rejected():
    with pytest.raises(NumericError):
        as_tensor([1.0]) / as_tensor([0.0])


def test_elementwise_dispatch():
    a = as_tensor([1.0, 2.0])
    assert np.allclose(T.elementwise("exp", a).data, np.exp(a.data))
    assert np.allclose(T.elementwise("add", a, a).data, 2 * a.data)
    with pytest.raises(ValueError):
        T.elementwise("nope", a)


def test_debug_nan_check():
    T.set_debug_checks(True)
    try:
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            T.exp(full((2,), 1e9))  # overflows to inf
    finally:
        T.set_debug_checks(False)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    eye = as_tensor(np.eye(2))
    m = as_tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(eye, m).data, m.data)


def test_matmul_hand():
    out = matmul(as_tensor([[1.0, 2.0]]), as_tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(42)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            acc = 0.0
            for k in range(7):
                acc += a[i, k] * b[k, j]
            ref[i, j] = acc
    out = matmul(as_tensor(a), as_tensor(b))
    assert np.abs(out.data - ref).max() <= 1e-12


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(as_tensor(np.ones((2, 3))), as_tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        matmul(as_tensor(np.ones(3)), as_tensor(np.ones((3, 2))))


# ---------------------------------------------------------------------------
# reductions / softmax
# ---------------------------------------------------------------------------

def test_sum_axis():
    out = reduce("sum", as_tensor([[1.0, 2.0], [3.0, 4.0]]), axes=(1,))
    assert np.array_equal(out.data, [3.0, 7.0])


def test_mean_of_constant():
    out = reduce("mean", full((3, 4), 2.5), axes=(0, 1))
    assert out.item() == pytest.approx(2.5, abs=0)


def test_max_axis():
    out = reduce("max", as_tensor([[-1.0, 5.0], [2.0, 2.0]]), axes=(0,))
    assert np.array_equal(out.data, [2.0, 5.0])


def test_empty_axis_set_rejected():
    with pytest.raises(ShapeError):
        reduce("sum", as_tensor([1.0, 2.0]), axes=())


def test_softmax_uniform_on_constant():
    out = softmax(zeros((3,)), axis=0)
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_reference_values():
    # independent scalar evaluation of exp(x_i)/sum exp(x_j)
    xs = [1.0, 2.0, 3.0]
    z = sum(math.exp(v) for v in xs)
    expected = [math.exp(v) / z for v in xs]
    assert expected == pytest.approx([0.09003, 0.24473, 0.66524], abs=1e-5)
    out = softmax(as_tensor(xs), axis=0)
    assert np.abs(out.data - expected).max() <= 1e-5


def test_softmax_shift_invariance():
    x = randn((6,), seed=3)
    shifted = x + full((6,), 123.456)
    a = softmax(x, axis=0)
    b = softmax(shifted, axis=0)
    assert np.abs(a.data - b.data).max() <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_softmax_positive_and_normalized(seed):
    x = randn((4, 5), seed=seed, std=3.0)
    out = softmax(x, axis=1)
    assert (out.data > 0).all()
    assert np.abs(out.data.sum(axis=1) - 1).max() <= 1e-10


# ---------------------------------------------------------------------------
# layout ops
# ---------------------------------------------------------------------------

def test_split_shapes():
    x = randn((8, 4, 4), seed=0)
    parts = split(x, 0, 4)
    assert len(parts) == 4
    assert all(p.shape == (2, 4, 4) for p in parts)


def test_concat_split_inverse_bitwise():
    x = randn((8, 4, 4), seed=5)
    again = concat(split(x, 0, 4), axis=0)
    assert np.array_equal(again.data, x.data)


def test_split_non_divisible():
    with pytest.raises(ShapeError):
        split(randn((7, 2), seed=0), 0, 4)


def test_reshape_token_layout_roundtrip():
    c, h, w = 5, 3, 4
    x = randn((c, h, w), seed=9)
    tokens = transpose(reshape(x, (c, h * w)))       # (N, c)
    assert tokens.shape == (h * w, c)
    back = reshape(transpose(tokens), (c, h, w))
    assert np.array_equal(back.data, x.data)


def test_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        reshape(randn((2, 3), seed=0), (4, 2))


def test_transpose_permutation():
    x = randn((2, 3, 4), seed=1)
    y = transpose(x, (2, 0, 1))
    assert y.shape == (4, 2, 3)
    assert np.array_equal(y.data, x.data.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = randn((3, 2), seed=0)
    x.requires_grad_(True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_quadratic():
    x = randn((4,), seed=1)
    x.requires_grad_(True)
    backward((x * x).sum())
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_accumulates_until_zeroed():
    x = randn((3,), seed=2)
    x.requires_grad_(True)
    y = x.sum()
    backward(y)
    backward(y)
    assert np.allclose(x.grad, 2 * np.ones(3))
    x.zero_grad()
    backward(y)
    assert np.allclose(x.grad, np.ones(3))


def test_backward_rejects_non_scalar():
    x = randn((3,), seed=0)
    x.requires_grad_(True)
    with pytest.raises(ShapeError):
        backward(x * x)


def test_backward_rejects_detached():
    x = randn((1,), seed=0)
    with pytest.raises(ValueError):
        backward(x)


def test_backward_reused_operand():
    x = randn((3,), seed=4)
    x.requires_grad_(True)
    backward((x * x * x).sum())     # d/dx x^3 = 3x^2
    assert np.allclose(x.grad, 3 * x.data ** 2)


def test_grad_flows_through_broadcast():
    a = randn((3, 1), seed=0)
    a.requires_grad_(True)
    b = randn((1, 4), seed=1)
    b.requires_grad_(True)
    backward((a * b).sum())
    assert a.grad.shape == (3, 1)
    assert b.grad.shape == (1, 4)
    assert np.allclose(a.grad, b.data.sum(axis=1, keepdims=True).T)


def test_no_grad_suppresses_recording():
    x = randn((3,), seed=0)
    x.requires_grad_(True)
    with T.no_grad():
        y = (x * x).sum()
    assert y.node is None


def test_determinism_same_ops_same_bits():
    def run():
        x = randn((16,), seed=11)
        return softmax(x * x, axis=0).data.copy()

    assert np.array_equal(run(), run())


def test_tape_is_topologically_ordered():
    x = randn((3, 3), seed=0)
    x.requires_grad_(True)
    y = softmax((x * x) + x, axis=1).sum()
    nodes = T.tape().nodes
    position = {id(n.out): i for i, n in enumerate(nodes)}
    for i, node in enumerate(nodes):
        for parent in node.parents:
            if parent.node is not None:
                assert position[id(parent)] < i

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oafuser import tensor as T
from oafuser.errors import DegenerateBatchError, DimensionError, NonFiniteError
from oracles import check_op_grads, conv2d_loop, conv3d_loop, numeric_grad, rel_err

rng = np.random.default_rng(1234)


def rand(*shape):
    return rng.normal(size=shape)


def away_from_zero(*shape):
    x = rand(*shape)
    return np.where(np.abs(x) < 0.1, 0.3, x)


OP_CASES = {
    "add": (lambda a, b: T.add(a, b), [rand(2, 3, 4), rand(2, 1, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [rand(3, 4), rand(1, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [rand(2, 3, 4), rand(2, 3, 1)]),
    "scale": (lambda a: T.scale(a, -2.5), [rand(3, 3)]),
    "abs": (lambda a: T.abs_(a), [away_from_zero(3, 4)]),
    "leaky_relu": (lambda a: T.leaky_relu(a, 0.01), [away_from_zero(4, 5)]),
    "gelu": (lambda a: T.gelu(a), [rand(4, 5)]),
    "sigmoid": (lambda a: T.sigmoid(a), [rand(4, 5)]),
    "sum_axis": (lambda a: T.sum_(a, axis=1), [rand(2, 3, 4)]),
    "mean_axes": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [rand(2, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (4, 6)), [rand(2, 3, 4)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [rand(2, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [rand(2, 3, 2), rand(2, 1, 2)]),
    "stack": (lambda a, b: T.stack([a, b], axis=1), [rand(2, 3), rand(2, 3)]),
    "split": (lambda a: T.mul(T.split(a, 1, 2)[1], T.split(a, 1, 2)[0]), [rand(2, 4, 3)]),
    "pad2d": (lambda a: T.pad2d(a, (1, 2, 0, 1)), [rand(1, 2, 3, 3)]),
    "matmul": (lambda a, b: T.matmul(a, b), [rand(2, 3, 4), rand(2, 4, 5)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [rand(2, 3, 4), rand(4, 5), rand(5)]),
    "conv2d_s1p1": (lambda x, w, b: T.conv2d(x, w, b, 1, 1), [rand(2, 2, 5, 5), rand(3, 2, 3, 3), rand(3)]),
    "conv2d_s2p2": (lambda x, w, b: T.conv2d(x, w, b, 2, 2), [rand(1, 3, 6, 7), rand(2, 3, 5, 5), rand(2)]),
    "conv2d_s4p3": (lambda x, w: T.conv2d(x, w, None, 4, 3), [rand(1, 2, 8, 8), rand(2, 2, 7, 7)]),
    "dwconv": (lambda x, w, b: T.depthwise_conv2d(x, w, b, 1), [rand(2, 3, 4, 5), rand(3, 3, 3), rand(3)]),
    "conv3d": (lambda x, w, b: T.conv3d(x, w, b), [rand(1, 2, 2, 4, 3), rand(2, 2, 3, 3, 3), rand(2)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [rand(3, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [rand(3, 6), rand(6), rand(6)]),
    "resize_up": (lambda a: T.resize_bilinear(a, (7, 5)), [rand(1, 2, 3, 4)]),
    "resize_down": (lambda a: T.resize_bilinear(a, (2, 3)), [rand(1, 2, 5, 6)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    op, arrays = OP_CASES[name]
    assert check_op_grads(op, arrays) <= 1e-5


def test_cross_entropy_gradient_and_loop_oracle():
    logits = rand(2, 3, 4, 4)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels[0, 0, :2] = 255
    t = T.Tensor(logits.copy(), requires_grad=True)
    loss = T.cross_entropy(t, labels)
    T.backward(loss)

    def loop(x):
        total, n = 0.0, 0
        for b in range(2):
            for i in range(4):
                for j in range(4):
                    y = labels[b, i, j]
                    if y == 255:
                        continue
                    z = x[b, :, i, j]
                    total += -(z[y] - math.log(sum(math.exp(v) for v in z)))
                    n += 1
        return total / n

    assert abs(loss.item() - loop(logits)) <= 1e-10
    (num,) = numeric_grad(loop, [logits.copy()])
    assert rel_err(t.grad, num) <= 1e-5


def test_cross_entropy_all_ignored_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        T.cross_entropy(T.Tensor(rand(1, 3, 2, 2)), np.full((1, 2, 2), 255))


@pytest.mark.parametrize("h,w,k,stride,pad", [(5, 5, 3, 1, 1), (7, 6, 3, 2, 1), (7, 7, 7, 4, 3),
                                              (6, 7, 5, 2, 2), (4, 4, 1, 1, 0), (7, 5, 4, 4, 0)])
def test_conv2d_matches_loop(h, w, k, stride, pad):
    x, wt, b = rand(2, 3, h, w), rand(4, 3, k, k), rand(4)
    with T.no_grad():
        y = T.conv2d(T.Tensor(x), T.Tensor(wt), T.Tensor(b), stride, pad).data
    assert np.abs(y - conv2d_loop(x, wt, b, stride, pad)).max() <= 1e-10


@pytest.mark.parametrize("d,h,w,k", [(2, 3, 4, 3), (2, 5, 5, 3), (3, 4, 2, 1), (2, 7, 6, 5), (4, 3, 3, 3)])
def test_conv3d_matches_loop(d, h, w, k):
    x, wt, b = rand(1, 2, d, h, w), rand(3, 2, k, k, k), rand(3)
    with T.no_grad():
        y = T.conv3d(T.Tensor(x), T.Tensor(wt), T.Tensor(b)).data
    assert np.abs(y - conv3d_loop(x, wt, b)).max() <= 1e-10


def test_depthwise_matches_grouped_loop():
    x, wt, b = rand(2, 3, 5, 6), rand(3, 3, 3), rand(3)
    with T.no_grad():
        y = T.depthwise_conv2d(T.Tensor(x), T.Tensor(wt), T.Tensor(b), 1).data
    for c in range(3):
        ref = conv2d_loop(x[:, c: c + 1], wt[c][None, None], b[c: c + 1], 1, 1)
        assert np.abs(y[:, c: c + 1] - ref).max() <= 1e-10


def test_flop_conventions():
    with T.count_flops() as c, T.flop_scope("m", 1):
        x = T.Tensor(rand(2, 5, 4))
        T.linear(x, T.Tensor(rand(4, 3)), T.Tensor(rand(3)))
        T.gelu(x)
        T.add(x, x)
        T.reshape(x, (10, 4))
        T.conv2d(T.Tensor(rand(1, 2, 6, 6)), T.Tensor(rand(3, 2, 3, 3)), None, 1, 1)
        T.resize_bilinear(T.Tensor(rand(1, 2, 3, 3)), (6, 6))
    tally = c.per_op_tally
    assert tally["m.s1.linear"] == 2 * 10 * 4 * 3 + 10 * 3
    assert tally["m.s1.gelu"] == 5 * 40
    assert tally["m.s1.add"] == 40
    assert tally.get("m.s1.reshape", 0) == 0
    assert tally["m.s1.conv2d"] == 2 * 3 * 36 * 2 * 9
    assert tally["m.s1.resize"] == 7 * 2 * 36


def test_shape_only_counts_the_same_flops():
    def run():
        x = T.Tensor(rand(2, 3, 8, 8)) if not shape else T.Tensor(None, shape=(2, 3, 8, 8))
        w = T.Tensor(rand(4, 3, 3, 3)) if not shape else T.Tensor(None, shape=(4, 3, 3, 3))
        y = T.conv2d(x, w, None, 2, 1)
        y = T.softmax(T.reshape(y, (2, 4, 16)), axis=-1)
        return T.mean(y, axis=(1, 2))

    shape = False
    with T.count_flops() as real:
        out = run()
    shape = True
    with T.shape_only(), T.count_flops() as traced:
        out2 = run()
    assert real.per_op_tally == traced.per_op_tally
    assert out.shape == out2.shape and out2.data is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_names_op():
    with T.flop_scope("carm", 2):
        with pytest.raises(NonFiniteError) as info:
            T.mul(T.Tensor(np.array([1e308, 1.0])), T.Tensor(np.array([1e10, 1.0])))
    assert info.value.op == "carm.s2.mul"


def test_broadcast_requires_equal_rank():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(rand(2, 3)), T.Tensor(rand(3)))


def test_backward_accumulates_over_shared_use():
    a = T.Tensor(np.array([[2.0, -3.0]]), requires_grad=True)
    T.backward(T.sum_(T.mul(a, a)))
    assert np.array_equal(a.grad, 2 * a.data)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12))
def test_bilinear_rows_are_convex_combinations(n_in, n_out):
    m = T.bilinear_matrix(n_in, n_out)
    assert np.allclose(m.sum(axis=1), 1.0)
    assert (m >= 0).all()
    if n_in == n_out:
        assert np.array_equal(m, np.eye(n_in))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.floats(-30, 30))
def test_softmax_rows_sum_to_one(rows, cols, shift):
    x = rng.normal(size=(rows, cols)) + shift
    with T.no_grad():
        p = T.softmax(T.Tensor(x)).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# small hand-checked cases


def test_matmul_identity_and_hand_case():
    with T.no_grad():
        y = T.matmul(T.Tensor(np.eye(2)), T.Tensor(np.array([[3.0, 4.0], [5.0, 6.0]])))
    assert np.array_equal(y.data, [[3, 4], [5, 6]])
    with T.count_flops() as c:
        y = T.matmul(T.Tensor(np.array([[1.0, 2.0]])), T.Tensor(np.array([[3.0], [4.0]])))
    assert y.data.tolist() == [[11.0]]
    assert T.flop_report(c).total == 4


def test_matmul_sum_gradient_tight():
    assert check_op_grads(lambda a, b: T.matmul(a, b), [rand(3, 5), rand(5, 2)]) <= 1e-6


def test_conv2d_hand_cases():
    with T.no_grad():
        y = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))), None, 1, 0)
    assert y.shape == (1, 1, 1, 1) and y.data.item() == 9.0
    x, w, b = rand(1, 3, 8, 8), rand(4, 3, 3, 3), rand(4)
    with T.count_flops() as c:
        y = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 2, 1)
    assert y.shape == (1, 4, 4, 4)
    # bias is one add per output element (64), same as every other elementwise add
    assert T.flop_report(c).total == 3456 + 64 == 2 * 4 * 4 * 4 * 3 * 9 + 4 * 4 * 4
    assert check_op_grads(lambda a, k: T.conv2d(a, k, None, 1, 1), [rand(1, 2, 5, 5), rand(2, 2, 3, 3)]) <= 1e-5


def test_conv3d_hand_cases():
    x = rand(1, 2, 2, 3, 4)
    delta = np.zeros((2, 2, 3, 3, 3))
    delta[0, 0, 1, 1, 1] = delta[1, 1, 1, 1, 1] = 1.0
    with T.no_grad():
        assert np.array_equal(T.conv3d(T.Tensor(x), T.Tensor(delta)).data, x)
        y = T.conv3d(T.Tensor(np.ones((1, 1, 2, 2, 2))), T.Tensor(np.ones((1, 1, 3, 3, 3)))).data
    assert np.array_equal(y, np.full((1, 1, 2, 2, 2), 8.0))
    with T.no_grad():
        z = T.conv3d(T.Tensor(np.ones((1, 1, 2, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3, 3)))).data[0, 0]
    counts = np.array([[[len([1 for dd in (-1, 0, 1) for di in (-1, 0, 1) for dj in (-1, 0, 1)
                              if 0 <= d + dd < 2 and 0 <= i + di < 3 and 0 <= j + dj < 3])
                         for j in range(3)] for i in range(3)] for d in range(2)])
    assert np.array_equal(z, counts)
    assert z[0, 0, 0] == 8
    assert check_op_grads(lambda a, k: T.conv3d(a, k), [rand(1, 2, 2, 3, 3), rand(2, 2, 3, 3, 3)]) <= 1e-5


def test_softmax_hand_cases():
    with T.no_grad():
        assert np.allclose(T.softmax(T.Tensor(np.zeros(3))).data, 1 / 3, atol=1e-15)
        assert np.array_equal(T.softmax(T.Tensor(np.array([1000.0, 1000.0]))).data, [0.5, 0.5])
        p = T.softmax(T.Tensor(np.log([1.0, 2.0, 3.0]))).data
    assert np.allclose(p, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_layer_norm_hand_cases():
    one, zero = T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))
    with T.no_grad():
        assert np.array_equal(T.layer_norm(T.Tensor(np.full(3, 5.0)), one, zero).data, np.zeros(3))
        y = T.layer_norm(T.Tensor(np.array([1.0, 3.0])), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2))).data
        assert np.abs(y - [-1, 1]).max() <= 1e-5
        c = T.layer_norm(T.Tensor(rand(3)), zero, T.Tensor(np.full(3, 7.0))).data
    assert np.array_equal(c, np.full(3, 7.0))


def test_backward_hand_cases():
    x = T.Tensor(rand(2, 3), requires_grad=True)
    T.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    x = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.backward(T.sum_(T.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_flop_report_trivial_totals():
    with T.count_flops() as c:
        pass
    assert T.flop_report(c).total == 0
    with T.count_flops() as c:
        T.matmul(T.Tensor(rand(2, 3)), T.Tensor(rand(3, 4)))
    assert T.flop_report(c).total == 48

"""Engine correctness: finite-difference oracles, adjointness, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays as h_arrays

from metast import tensor as T
from metast.errors import GraphError, NumericsError, ShapeError
from metast.gradcheck import check_gradients, numeric_grad, relative_error

RNG = np.random.default_rng(0)


def finite_floats(shape, lo=-3.0, hi=3.0):
    return h_arrays(np.float64, shape,
                    elements=st.floats(lo, hi, allow_nan=False, width=64))


# -- forward oracles -----------------------------------------------------


def naive_conv2d(x, kernel, bias):
    """Direct six-loop zero-padded stride-1 convolution (test oracle)."""
    b, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((b, h, w, cout))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            acc += float(xp[n, i + di, j + dj] @ kernel[di, dj, :, o])
                    out[n, i, j, o] = acc + bias[o]
    return out


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_conv2d_forward_matches_naive_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 4, 3))
    k = rng.standard_normal((3, 3, 3, 2))
    b = rng.standard_normal(2)
    got = T.conv2d(T.tensor(x), T.tensor(k), T.tensor(b)).data
    assert relative_error(got, naive_conv2d(x, k, b)) < 1e-12


def test_matmul_forward_matches_triple_loop():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 2))
    got = T.matmul(T.tensor(a), T.tensor(b)).data
    assert relative_error(got, naive_matmul(a, b)) < 1e-12


def test_matmul_vector_promotions():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3, 4))
    v = rng.standard_normal(4)
    u = rng.standard_normal(3)
    assert T.matmul(T.tensor(a), T.tensor(v)).shape == (3,)
    assert T.matmul(T.tensor(u), T.tensor(a)).shape == (4,)
    s = T.matmul(T.tensor(v), T.tensor(v))
    assert s.shape == ()
    assert abs(s.item() - float(v @ v)) < 1e-12


# -- gradient oracles ------------------------------------------------------

GRAD_CASES = [
    ("add", lambda ts: T.add(ts[0], ts[1]), [(3, 4), (3, 4)]),
    ("add_broadcast", lambda ts: T.add(ts[0], ts[1]), [(3, 4), (4,)]),
    ("sub", lambda ts: T.sub(ts[0], ts[1]), [(3, 4), (3, 4)]),
    ("mul", lambda ts: T.mul(ts[0], ts[1]), [(3, 4), (3, 4)]),
    ("scale", lambda ts: T.scale(ts[0], -1.7), [(3, 4)]),
    ("square", lambda ts: T.square(ts[0]), [(3, 4)]),
    ("sum", lambda ts: T.sum(ts[0]), [(3, 4)]),
    ("sum_axis0", lambda ts: T.sum(ts[0], axis=0), [(3, 4)]),
    ("mean_keep", lambda ts: T.mean(ts[0], axis=1, keepdims=True), [(3, 4)]),
    ("reshape", lambda ts: T.reshape(ts[0], (2, 6)), [(3, 4)]),
    ("transpose", lambda ts: T.transpose(ts[0]), [(3, 4)]),
    ("broadcast", lambda ts: T.broadcast_to(ts[0], (2, 3, 4)), [(3, 4)]),
    ("concat", lambda ts: T.concat(ts, axis=0), [(2, 3), (4, 3)]),
    ("narrow", lambda ts: T.narrow(ts[0], 0, 1, 2), [(4, 3)]),
    ("matmul", lambda ts: T.matmul(ts[0], ts[1]), [(3, 4), (4, 2)]),
    ("sigmoid", lambda ts: T.sigmoid(ts[0]), [(3, 4)]),
    ("tanh", lambda ts: T.tanh(ts[0]), [(3, 4)]),
    ("softmax", lambda ts: T.softmax(ts[0], axis=-1), [(3, 4)]),
    ("im2col", lambda ts: T.im2col(ts[0], 3, 3), [(2, 4, 5, 2)]),
    ("conv2d", lambda ts: T.conv2d(ts[0], ts[1], ts[2]),
     [(2, 4, 4, 2), (3, 3, 2, 3), (3,)]),
]


@pytest.mark.parametrize("name,fn,shapes", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradients_match_finite_differences(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(3):
        arrays = [rng.standard_normal(s) for s in shapes]
        assert check_gradients(fn, arrays, rng=rng) < 1e-6


def test_relu_gradient_off_the_kink():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 4))
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    assert check_gradients(lambda ts: T.relu(ts[0]), [x], rng=rng) < 1e-6


def test_div_and_log_gradients():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((3, 3))
    b = np.sign(rng.standard_normal((3, 3))) * (0.5 + np.abs(rng.standard_normal((3, 3))))
    assert check_gradients(lambda ts: T.div(ts[0], ts[1]), [a, b], rng=rng) < 1e-6
    pos = np.abs(rng.standard_normal((3, 3))) + 0.5
    assert check_gradients(lambda ts: T.log(ts[0]), [pos], rng=rng) < 1e-6


def test_conv2d_gradient_strict_tolerance():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 5, 5, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    err = check_gradients(lambda ts: T.conv2d(ts[0], ts[1], ts[2]), [x, k, b], rng=rng)
    assert err < 1e-8


# -- adjointness ------------------------------------------------------------


def test_im2col_col2im_are_adjoint():
    # <im2col(x), y> == <x, col2im(y)> for all x, y defines the adjoint pair
    rng = np.random.default_rng(11)
    b, h, w, c, kh, kw = 2, 4, 5, 3, 3, 3
    for _ in range(10):
        x = rng.standard_normal((b, h, w, c))
        y = rng.standard_normal((b * h * w, kh * kw * c))
        lhs = float(np.sum(T.im2col(T.tensor(x), kh, kw).data * y))
        rhs = float(np.sum(x * T.col2im(T.tensor(y), b, h, w, c, kh, kw).data))
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_narrow_pad_adjoint_roundtrip():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((5, 6))
    cut = T.narrow(T.tensor(x), 1, 2, 3)
    assert np.array_equal(cut.data, x[:, 2:5])
    back = T._pad_slice(cut, 1, 2, 6)
    assert np.array_equal(back.data[:, 2:5], x[:, 2:5])
    assert np.all(back.data[:, :2] == 0.0) and np.all(back.data[:, 5:] == 0.0)


# -- second order ------------------------------------------------------------


def test_tanh_double_backward_matches_analytic():
    # d2/dx2 tanh = -2 t (1 - t^2)
    x = np.linspace(-1.5, 1.5, 7)
    leaf = T.param(x)
    y = T.sum(T.tanh(leaf))
    g = T.backward(y, [leaf], create_graph=True)[0]
    gg = T.backward(T.sum(g), [leaf])[0]
    t = np.tanh(x)
    assert relative_error(gg.data, -2.0 * t * (1.0 - t * t)) < 1e-12


def test_square_double_backward_is_constant_two():
    leaf = T.param(np.array([1.3, -0.2, 4.0]))
    y = T.sum(T.square(leaf))
    g = T.backward(y, [leaf], create_graph=True)[0]
    gg = T.backward(T.sum(g), [leaf])[0]
    assert np.array_equal(gg.data, np.full(3, 2.0))


def test_matmul_double_backward_finite_difference():
    rng = np.random.default_rng(13)
    a0 = rng.standard_normal((3, 3))
    b0 = rng.standard_normal((3, 2))
    proj = rng.standard_normal((3, 2))
    proj2 = rng.standard_normal((3, 3))

    def hval(a_arr):
        leaf = T.param(a_arr.copy())
        f = T.sum(T.mul(T.matmul(leaf, T.tensor(b0)), T.Tensor(proj)))
        g = T.backward(f, [leaf], create_graph=True)[0]
        return T.sum(T.mul(g, T.Tensor(proj2)))

    leaf = T.param(a0.copy())
    f = T.sum(T.mul(T.matmul(leaf, T.tensor(b0)), T.Tensor(proj)))
    g = T.backward(f, [leaf], create_graph=True)[0]
    h = T.sum(T.mul(g, T.Tensor(proj2)))
    hg = T.backward(h, [leaf])[0]

    num = numeric_grad(lambda arrs: hval(arrs[0]).item(), [a0.copy()], 0)
    assert relative_error(hg.data, num) < 1e-6


# -- numerics guards ---------------------------------------------------------


def test_sigmoid_is_finite_at_extreme_inputs():
    x = T.tensor(np.array([-745.0, -100.0, 0.0, 100.0, 745.0]))
    y = T.sigmoid(x)
    assert np.all(np.isfinite(y.data))
    assert y.data[0] <= 1e-300 and y.data[-1] == 1.0
    assert y.data[2] == 0.5


def test_log_clamps_at_floor_instead_of_diverging():
    y = T.log(T.tensor(np.array([0.0, 1e-300, 1.0])))
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == y.data[1] == np.log(T.LOG_FLOOR)


def test_nan_input_raises_numerics_error():
    with pytest.raises(NumericsError):
        T.tensor(np.array([1.0, np.nan]))
    with pytest.raises(NumericsError):
        T.div(T.tensor(np.array([1.0])), T.tensor(np.array([0.0])))


def test_softmax_rows_sum_to_one_even_with_huge_logits():
    x = T.tensor(np.array([[1e300, 0.0, -1e300], [5.0, 5.0, 5.0]]))
    p = T.softmax(x, axis=-1)
    assert np.max(np.abs(p.data.sum(axis=1) - 1.0)) < 1e-12


# -- graph mechanics ----------------------------------------------------------


def test_backward_requires_scalar_loss():
    leaf = T.param(np.ones(3))
    with pytest.raises(GraphError):
        T.backward(T.scale(leaf, 2.0), [leaf])


def test_unreached_leaf_gets_zero_gradient():
    a = T.param(np.ones(3))
    b = T.param(np.ones(3))
    loss = T.sum(T.square(a))
    ga, gb = T.backward(loss, [a, b])
    assert np.array_equal(gb.data, np.zeros(3))
    assert np.array_equal(ga.data, 2.0 * np.ones(3))


def test_no_grad_blocks_recording():
    leaf = T.param(np.ones(3))
    with T.no_grad():
        out = T.square(leaf)
    assert out.parents == ()
    g = T.backward(T.sum(T.square(leaf)), [leaf])[0]
    assert np.array_equal(g.data, 2.0 * np.ones(3))


def test_gradients_are_bitwise_deterministic():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((6, 6))
    w = rng.standard_normal((6, 4))

    def run():
        lx, lw = T.param(x.copy()), T.param(w.copy())
        y = T.tanh(T.matmul(lx, lw))
        loss = T.mean(T.square(y))
        return [g.data.tobytes() for g in T.backward(loss, [lx, lw])]

    assert run() == run()


def test_detach_cuts_the_graph():
    leaf = T.param(np.array([2.0]))
    y = T.square(leaf).detach()
    loss = T.sum(T.mul(y, leaf))
    g = T.backward(loss, [leaf])[0]
    # only the direct factor contributes: d/dx (const * x) = const = x^2
    assert np.allclose(g.data, [4.0])


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.transpose(T.tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.narrow(T.tensor(np.ones((2, 2))), 0, 1, 5)
    with pytest.raises(ShapeError):
        T.im2col(T.tensor(np.ones((1, 3, 3, 1))), 2, 2)
    with pytest.raises(ShapeError):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((4, 2))))


# -- properties ----------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(finite_floats((3, 4)), finite_floats((3, 4)))
def test_property_mul_matches_numpy(a, b):
    assert np.array_equal(T.mul(T.tensor(a), T.tensor(b)).data, a * b)


@settings(max_examples=50, deadline=None)
@given(finite_floats((4, 3)))
def test_property_softmax_shift_invariant(x):
    p1 = T.softmax(T.tensor(x), axis=-1).data
    p2 = T.softmax(T.tensor(x + 7.5), axis=-1).data
    assert np.max(np.abs(p1 - p2)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(finite_floats((2, 5)))
def test_property_relu_splits_signs(x):
    pos = T.relu(T.tensor(x)).data
    neg = T.relu(T.neg(T.tensor(x))).data
    assert np.array_equal(pos - neg, x)
    assert np.all(pos * neg == 0.0)


@settings(max_examples=50, deadline=None)
@given(finite_floats((3, 2)), finite_floats((5, 2)))
def test_property_concat_sum_decomposes(a, b):
    whole = T.sum(T.concat([T.tensor(a), T.tensor(b)], axis=0)).item()
    parts = T.sum(T.tensor(a)).item() + T.sum(T.tensor(b)).item()
    assert abs(whole - parts) <= 1e-9 * max(1.0, abs(whole))


@settings(max_examples=30, deadline=None)
@given(finite_floats((4, 4)))
def test_property_im2col_center_column_is_input(x):
    # with a 3x3 kernel the center tap of each row is the pixel itself
    cols = T.im2col(T.tensor(x.reshape(1, 4, 4, 1)), 3, 3).data
    center = cols.reshape(16, 3, 3)[:, 1, 1]
    assert np.array_equal(center, x.reshape(-1))

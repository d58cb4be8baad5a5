import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mnmmol import diffgraph as dg
from mnmmol.operators import ScoreNetwork


def central_fd(f, x, h=1e-4):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def conv_matrix(w, shape):
    cin = w.shape[1]
    n = cin * shape[0] * shape[1]
    cols = [dg.conv2d(dg.Var(e.reshape((cin,) + shape)), dg.Var(w), dg.Var(np.zeros(w.shape[0]))).value.ravel()
            for e in np.eye(n)]
    return np.stack(cols, axis=1)


def test_relu_definition():
    assert dg.relu(dg.Var([-1.0, 0.0, 2.0])).value.tolist() == [0.0, 0.0, 2.0]


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 5, 6))
    out = dg.conv2d(dg.Var(x), dg.Var(np.ones((1, 1, 1, 1))), dg.Var(np.zeros(1))).value
    np.testing.assert_array_equal(out, x)


def test_inner_self_is_norm_squared():
    x = np.random.default_rng(1).standard_normal((2, 4, 4))
    assert dg.inner(x, x).value == pytest.approx(float(dg.norm2(x).value) ** 2, rel=1e-14)


def test_grad_of_square_at_three():
    x = dg.leaf(3.0)
    (g,) = dg.grad(dg.mul(x, x), [x])
    assert g == 6.0


def test_grad_of_linear_functional():
    c = np.random.default_rng(2).standard_normal((2, 3, 3))
    x = dg.leaf(np.zeros((2, 3, 3)))
    (g,) = dg.grad(dg.inner(c, x), [x])
    np.testing.assert_array_equal(g, c)


def test_unused_leaf_gets_zero():
    x, y = dg.leaf(np.ones(3)), dg.leaf(np.ones(4))
    gx, gy = dg.grad(dg.sumsq(x), [x, y])
    np.testing.assert_array_equal(gy, np.zeros(4))
    np.testing.assert_array_equal(gx, 2 * np.ones(3))


def test_grad_requires_scalar_root():
    x = dg.leaf(np.ones(3))
    with pytest.raises(ValueError):
        dg.grad(dg.scale(x, 2.0), [x])


def test_shape_error_names_op_and_shapes():
    with pytest.raises(dg.ShapeError) as exc:
        dg.add(np.ones(3), np.ones(4))
    assert exc.value.op == "add"
    assert "(3,)" in str(exc.value) and "(4,)" in str(exc.value)


def test_conv_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(dg.ShapeError):
        dg.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(dg.ShapeError):
        dg.conv2d(np.ones((2, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1))


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = ScoreNetwork.init(seed=3, hidden=4, gain=0.5, noise=1.0)
    net = net.with_theta(net.theta + 0.2 * rng.standard_normal(net.n_params))
    x = rng.standard_normal((2, 5, 5))

    def loss(theta):
        return float(dg.sumsq(net.with_theta(theta)(dg.Var(x))).value)

    leaves = net.leaves()
    g = np.concatenate([a.ravel() for a in dg.grad(dg.sumsq(net(dg.Var(x), leaves)), leaves)])
    fd = central_fd(loss, net.theta)
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < 1e-4


PRIMITIVES = {
    "add": lambda a, b: dg.add(a, b),
    "sub": lambda a, b: dg.sub(a, b),
    "mul": lambda a, b: dg.mul(a, b),
    "scale": lambda a, b: dg.scale(a, 1.7),
    "relu": lambda a, b: dg.relu(a),
    "tanh": lambda a, b: dg.tanh(a),
    "inner": lambda a, b: dg.inner(a, b),
    "norm2": lambda a, b: dg.norm2(a),
    "square": lambda a, b: dg.square(a),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(4)
    a0 = rng.standard_normal((2, 3))
    a0[np.abs(a0) < 0.05] = 0.3  # keep relu away from its kink
    b0 = rng.standard_normal((2, 3))
    f = PRIMITIVES[name]
    w = rng.standard_normal(np.shape(f(a0, b0).value))

    def value(a, b):
        return float(np.sum(w * f(a, b).value))

    a, b = dg.leaf(a0), dg.leaf(b0)
    ga, gb = dg.grad(dg.inner(dg.Var(w), f(a, b)) if w.ndim else dg.scale(f(a, b), float(w)), [a, b])
    np.testing.assert_allclose(ga, central_fd(lambda t: value(t, b0), a0), rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(gb, central_fd(lambda t: value(a0, t), b0), rtol=1e-4, atol=1e-7)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    x0, w0, b0 = rng.standard_normal((2, 4, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    c = rng.standard_normal((3, 4, 5))
    f = lambda x, w, b: float(np.vdot(c, dg.conv2d(x, w, b).value))
    x, w, b = dg.leaf(x0), dg.leaf(w0), dg.leaf(b0)
    gx, gw, gb = dg.grad(dg.inner(c, dg.conv2d(x, w, b)), [x, w, b])
    np.testing.assert_allclose(gx, central_fd(lambda t: f(t, w0, b0), x0), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gw, central_fd(lambda t: f(x0, t, b0), w0), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, central_fd(lambda t: f(x0, w0, t), b0), rtol=1e-6, atol=1e-8)


def test_vjp_linear_and_identity():
    v = np.random.default_rng(6).standard_normal(5)
    np.testing.assert_array_equal(dg.vjp(lambda x: dg.scale(x, 2.0), np.ones(5), v), 2 * v)
    np.testing.assert_array_equal(dg.vjp(lambda x: x, np.ones(5), v), v)


def test_vjp_conv_equals_transpose_matrix():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((2, 2, 3, 3))
    M = conv_matrix(w, (4, 4))
    v = rng.standard_normal((2, 4, 4))
    got = dg.vjp(lambda x: dg.conv2d(x, w, np.zeros(2)), np.zeros((2, 4, 4)), v)
    np.testing.assert_allclose(got.ravel(), M.T @ v.ravel(), atol=1e-12)


def test_vjp_shape_mismatch():
    with pytest.raises(dg.ShapeError):
        dg.vjp(lambda x: dg.scale(x, 2.0), np.ones(3), np.ones(4))


def test_backward_is_deterministic():
    rng = np.random.default_rng(8)
    net = ScoreNetwork.init(seed=1, noise=1.0)
    x = rng.standard_normal((2, 8, 8))
    runs = []
    for _ in range(2):
        leaves = net.leaves()
        runs.append(dg.grad(dg.sumsq(net(dg.Var(x), leaves)), leaves))
    for a, b in zip(*runs):
        assert a.tobytes() == b.tobytes()


def test_shared_subexpression_accumulates():
    x = dg.leaf(2.0)
    y = dg.mul(x, x)
    (g,) = dg.grad(dg.add(y, y), [x])
    assert g == 8.0


def test_constants_build_no_graph():
    out = dg.add(dg.Var(np.ones(2)), np.ones(2))
    assert not out.requires_grad and out.parents == ()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-1e3, 1e3)))
def test_primitives_stay_finite(a):
    for f in PRIMITIVES.values():
        assert np.all(np.isfinite(f(a, a).value))

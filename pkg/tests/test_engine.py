import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfcrn import engine as E
from cfcrn.engine import ShapeError, Tensor
from cfcrn.gradcheck import check_graph, op_checks


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


# ----------------------------------------------------------------- conv

def test_conv_identity_1x1():
    out = E.conv2d_same(_t([[[[5.0]]]]), _t(np.ones((1, 1, 1, 1))), _t([0.0]))
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 5.0


def test_conv_ones_3x3_hand_values():
    # zero padding: a corner sees a 2x2 block of ones, an edge 2x3, the centre 3x3
    out = E.conv2d_same(_t(np.ones((1, 1, 3, 3))), _t(np.ones((1, 1, 3, 3))), _t([0.0])).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(E.conv2d_same(_t(x), _t(w), _t(b)).data, ref, rtol=1e-5, atol=1e-5)


def test_conv_full_layer_shape():
    x = _t(np.zeros((1, 32, 128, 128)))
    out = E.conv2d_same(x, _t(np.zeros((64, 32, 3, 3))), _t(np.zeros(64)))
    assert out.shape == (1, 64, 128, 128)


def test_conv_shape_errors():
    x = _t(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        E.conv2d_same(x, _t(np.zeros((1, 3, 3, 3))), _t(np.zeros(1)))
    with pytest.raises(ShapeError):
        E.conv2d_same(x, _t(np.zeros((1, 2, 2, 2))), _t(np.zeros(1)))


# ----------------------------------------------------------------- relu

def test_relu_values_and_grad():
    x = _t(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3), grad=True)
    y = E.relu(x)
    np.testing.assert_array_equal(y.data.ravel(), [0, 0, 2])
    E.backward(E.mse_loss(y, np.zeros((1, 1, 1, 3))))
    # d/dy of y^2 is 2y; passes only where x > 0
    np.testing.assert_array_equal(x.grad.ravel(), [0, 0, 4])


def test_relu_positive_unchanged(rng):
    a = rng.uniform(0.1, 2.0, (1, 2, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(E.relu(_t(a)).data, a)


# -------------------------------------------------------------- maxpool

def test_maxpool_window():
    assert E.maxpool2(_t([[[[1, 2], [3, 4]]]])).data.ravel().tolist() == [4]


def test_maxpool_shape():
    assert E.maxpool2(_t(np.zeros((1, 3, 128, 128)))).shape == (1, 3, 64, 64)


def test_maxpool_odd_raises():
    with pytest.raises(ShapeError):
        E.maxpool2(_t(np.zeros((1, 1, 3, 4))))


def test_maxpool_tie_goes_to_first():
    x = _t(np.full((1, 1, 4, 4), 2.0), grad=True)
    y = E.maxpool2(x)
    np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 2.0))
    E.backward(E.mse_loss(y, np.zeros((1, 1, 2, 2))))
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 4.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_one_nonzero_per_window(rng):
    x = _t(rng.standard_normal((2, 3, 8, 6)), grad=True)
    y = E.maxpool2(x)
    y_sum = E.mse_loss(y, y.data - 0.5)  # constant nonzero upstream gradient
    E.backward(y_sum)
    g = x.grad.reshape(2, 3, 4, 2, 3, 2)
    nz = (g != 0).sum(axis=(3, 5))
    assert np.all(nz == 1)


# -------------------------------------------------------------- upsample

def _bilinear_oracle(a):
    """Pointwise half-pixel bilinear evaluation with edge clamping."""
    h, w = a.shape
    out = np.zeros((2 * h, 2 * w))
    for oi in range(2 * h):
        for oj in range(2 * w):
            si = min(max((oi + 0.5) / 2 - 0.5, 0.0), h - 1)
            sj = min(max((oj + 0.5) / 2 - 0.5, 0.0), w - 1)
            i0, j0 = int(np.floor(si)), int(np.floor(sj))
            i1, j1 = min(i0 + 1, h - 1), min(j0 + 1, w - 1)
            fi, fj = si - i0, sj - j0
            out[oi, oj] = ((1 - fi) * (1 - fj) * a[i0, j0] + (1 - fi) * fj * a[i0, j1]
                           + fi * (1 - fj) * a[i1, j0] + fi * fj * a[i1, j1])
    return out


def test_upsample_hand_example():
    out = E.upsample_bilinear2(_t([[[[0, 1], [2, 3]]]])).data[0, 0]
    expected = np.array([[0.0, 0.25, 0.75, 1.0],
                         [0.5, 0.75, 1.25, 1.5],
                         [1.5, 1.75, 2.25, 2.5],
                         [2.0, 2.25, 2.75, 3.0]])
    np.testing.assert_allclose(out, expected, atol=1e-7)
    np.testing.assert_allclose(_bilinear_oracle(np.array([[0, 1], [2, 3]], float)), expected, atol=1e-12)


def test_upsample_matches_oracle(rng):
    a = rng.standard_normal((5, 3))
    np.testing.assert_allclose(E.upsample_bilinear2(_t(a[None, None])).data[0, 0], _bilinear_oracle(a),
                               rtol=1e-5, atol=1e-6)


def test_upsample_constant_and_shape():
    out = E.upsample_bilinear2(_t(np.full((1, 512, 16, 16), 1.5)))
    assert out.shape == (1, 512, 32, 32)
    np.testing.assert_allclose(out.data, 1.5, rtol=0, atol=1e-6)


# -------------------------------------------------------------- concat

def test_concat_shapes_and_order():
    a = _t(np.zeros((1, 128, 16, 16)))
    b = _t(np.ones((1, 512, 16, 16)))
    out = E.concat_channels(a, b)
    assert out.shape == (1, 640, 16, 16)
    assert out.data[0, :128].sum() == 0 and out.data[0, 128:].min() == 1


def test_concat_empty_channel():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(E.concat_channels(_t(x), _t(np.zeros((1, 0, 4, 4)))).data, x)


def test_concat_gradient_of_sum_is_ones():
    a = _t(np.zeros((1, 2, 3, 3)), grad=True)
    b = _t(np.zeros((1, 1, 3, 3)), grad=True)
    # mse against -0.5 gives d/dout = 2*(0+0.5)/1 = 1 everywhere
    E.backward(E.mse_loss(E.concat_channels(a, b), np.full((1, 3, 3, 3), -0.5)))
    np.testing.assert_array_equal(a.grad, 1.0)
    np.testing.assert_array_equal(b.grad, 1.0)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        E.concat_channels(_t(np.zeros((1, 1, 4, 4))), _t(np.zeros((1, 1, 2, 2))))


# ------------------------------------------------------------------ mse

def test_mse_values():
    assert float(E.mse_loss(_t(np.ones((2, 1, 2, 2))), np.ones((2, 1, 2, 2))).data) == 0.0
    assert float(E.mse_loss(_t(np.array([1.0, 2.0]).reshape(1, 1, 1, 2)), np.zeros((1, 1, 1, 2))).data) == 5.0


def test_mse_gradient_is_2_over_b(rng):
    p = rng.standard_normal((3, 1, 2, 2)).astype(np.float32)
    t = rng.standard_normal((3, 1, 2, 2))
    x = _t(p, grad=True)
    E.backward(E.mse_loss(x, t))
    np.testing.assert_allclose(x.grad, (2 / 3) * (p - t), rtol=1e-5, atol=1e-6)


def test_mse_shape_error():
    with pytest.raises(ShapeError):
        E.mse_loss(_t(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


# ------------------------------------------------------------ backward

def test_backward_finite_difference_conv(rng):
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    t = rng.standard_normal((1, 3, 6, 6))
    res = check_graph("conv w", lambda: E.mse_loss(E.conv2d_same(x, w, b), t), [w], h=1e-3, tol=1e-3)
    assert res.ok, res.line()


def test_backward_accumulates_exactly(rng):
    w = E.Param("w", rng.standard_normal((2, 1, 3, 3)))
    b = E.Param("b", np.zeros(2))
    x = Tensor(rng.standard_normal((1, 1, 4, 4)))
    t = rng.standard_normal((1, 2, 4, 4))
    E.backward(E.mse_loss(E.conv2d_same(x, w, b), t))
    g1 = w.grad.copy()
    E.backward(E.mse_loss(E.conv2d_same(x, w, b), t))
    np.testing.assert_array_equal(w.grad, 2 * g1)


def test_backward_untouched_param_has_no_grad(rng):
    w = E.Param("w", rng.standard_normal((1, 1, 1, 1)))
    b = E.Param("b", np.zeros(1))
    unused = E.Param("u", np.ones((1, 1, 1, 1)))
    E.backward(E.mse_loss(E.conv2d_same(Tensor(np.ones((1, 1, 2, 2))), w, b), np.zeros((1, 1, 2, 2))))
    assert unused.grad is None or not unused.grad.any()


def test_backward_on_detached_raises():
    with pytest.raises(RuntimeError):
        E.backward(Tensor(np.float64(1.0)))
    with pytest.raises(RuntimeError):
        E.backward(E.mse_loss(Tensor(np.ones((1, 1, 2, 2))), np.zeros((1, 1, 2, 2))))


def test_all_op_gradient_checks():
    for res in op_checks(seed=3):
        assert res.ok, res.line()


# --------------------------------------------------------- properties

@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3), st.integers(0, 10_000))
def test_linear_ops_are_homogeneous(a, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 6)).astype(np.float32)
    y = rng.standard_normal((1, 3, 4, 6)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    zero_b = np.zeros(2, np.float32)
    fs = [lambda v: E.conv2d_same(_t(v), _t(w), _t(zero_b)).data,
          lambda v: E.upsample_bilinear2(_t(v)).data,
          lambda v: E.concat_channels(_t(v), _t(y * 0)).data]
    for f in fs:
        lhs = f(np.float32(a) * x)
        rhs = np.float32(a) * f(x)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)


def test_ops_deterministic(rng):
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        h = E.relu(E.conv2d_same(_t(x), _t(w), _t(np.zeros(4))))
        return E.upsample_bilinear2(E.maxpool2(h)).data

    assert run().tobytes() == run().tobytes()


# ------------------------------------------------------- init / update

def test_orthogonal_rows():
    w = E.orthogonal_init((64, 32, 3, 3), np.random.default_rng(0))
    m = w.data.reshape(64, -1).astype(np.float64)
    np.testing.assert_allclose(m @ m.T, np.eye(64), atol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-5)


def test_orthogonal_columns_when_tall():
    w = E.orthogonal_init((64, 8, 1, 1), np.random.default_rng(0)).data.reshape(64, 8).astype(np.float64)
    np.testing.assert_allclose(w.T @ w, np.eye(8), atol=1e-5)


def test_orthogonal_deterministic():
    a = E.orthogonal_init((8, 4, 3, 3), np.random.default_rng(7))
    b = E.orthogonal_init((8, 4, 3, 3), np.random.default_rng(7))
    assert a.data.tobytes() == b.data.tobytes()


def _param(value, grad, momentum=0.0):
    p = E.Param("p", np.array([value]))
    p.grad = np.array([grad], dtype=np.float32)
    p.momentum[:] = momentum
    return p


def test_sgd_plain_descent():
    p = _param(1.0, 2.0)
    E.sgd_momentum_step([p], lr=0.1, beta=0.0, lam=0.0)
    np.testing.assert_allclose(p.data, [0.8], rtol=1e-6)
    assert p.grad is None


def test_sgd_momentum_only():
    p = _param(1.0, 0.0, momentum=0.5)
    E.sgd_momentum_step([p], lr=0.1, beta=0.9, lam=0.0)
    np.testing.assert_allclose(p.data, [1.0 - 0.45], rtol=1e-6)


def test_sgd_hand_example():
    p = _param(1.0, 1.0)
    E.sgd_momentum_step([p], lr=0.1, beta=0.99, lam=0.01)
    np.testing.assert_allclose(p.momentum, [0.00102], rtol=1e-5)
    np.testing.assert_allclose(p.data, [0.99898], rtol=1e-6)


def test_sgd_literal_form_goes_uphill():
    p = _param(1.0, 1.0)
    E.sgd_momentum_step([p], lr=0.1, beta=0.5, lam=0.0, form="literal")
    assert p.data[0] > 1.0


def test_sgd_nan_aborts():
    p = _param(1.0, np.nan)
    with pytest.raises(FloatingPointError, match="p"):
        E.sgd_momentum_step([p], lr=0.1, beta=0.9, lam=0.0)


def test_precision_context_restores_dtype():
    with E.precision(np.float64):
        assert Tensor(np.ones(3, np.float32)).data.dtype == np.float64
    assert Tensor(np.ones(3)).data.dtype == np.float32
    with pytest.raises(KeyError):
        with E.precision(np.float64):
            raise KeyError("boom")
    assert E.DTYPE is np.float32

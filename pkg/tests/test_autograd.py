import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfpp import autograd as ag
from sfpp.autograd import GradTape, Tensor, backward, finite_diff_check, precision


def grad_of(f, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        y = f(*ts)
    g = backward(tape, y)
    return [g.get(t, np.zeros_like(t.data)) for t in ts]


def conv_reference(x, w, b=None, stride=1, pad=0):
    """Direct four-loop convolution."""
    cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * w[o]) + (0 if b is None else b[o])
    return out


# ------------------------------------------------------------------- conv2d

def test_conv2d_one_by_one_kernel_hand_value():
    x = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3))
    out = ag.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data[0], [[2, 4, 6], [8, 10, 12], [14, 16, 18]])


def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 6, 5)).astype(np.float32)
    k = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        k[c, c, 1, 1] = 1
    np.testing.assert_allclose(ag.conv2d(Tensor(x), Tensor(k), pad=1).data, x, atol=1e-6)


def test_conv2d_stride_two_shape():
    out = ag.conv2d(Tensor(np.ones((1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)
    assert out.shape == (1, 4, 4)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_loop_reference(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    with precision(np.float64):
        out = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, conv_reference(x, w, b, stride, pad), rtol=1e-10)


def test_conv2d_batched_equals_per_sample():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(4, 2, 3, 3))
    with precision(np.float64):
        batch = ag.conv2d(Tensor(x), Tensor(w), pad=1).data
        single = np.stack([ag.conv2d(Tensor(xi), Tensor(w), pad=1).data for xi in x])
    np.testing.assert_allclose(batch, single, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_conv2d_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y, k = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    with precision(np.float64):
        lhs = ag.conv2d(Tensor(a * x + b * y), Tensor(k), pad=1).data
        rhs = a * ag.conv2d(Tensor(x), Tensor(k), pad=1).data + b * ag.conv2d(Tensor(y), Tensor(k), pad=1).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


def test_conv2d_shape_errors():
    with pytest.raises(ag.ShapeError, match="channels"):
        ag.conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ag.ShapeError):
        ag.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ag.ShapeError):
        ag.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), stride=0)


def test_conv2d_non_finite_output_is_an_error():
    with pytest.raises(ag.NonFiniteError):
        ag.conv2d(Tensor(np.array([[[np.inf]]])), Tensor(np.ones((1, 1, 1, 1))))


def test_conv_backward_input_grad_equals_kernel_value():
    (gx,) = grad_of(lambda t: ag.sum_all(ag.conv2d(t, Tensor(np.full((1, 1, 1, 1), 3.0)))),
                    np.ones((1, 4, 4)))
    np.testing.assert_allclose(gx, 3.0)


# ------------------------------------------------------------- xcorr

def test_xcorr_hand_value():
    out = ag.xcorr_depthwise(Tensor([[[3.0]]]), Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_array_equal(out.data, [[[3, 6], [9, 12]]])


def test_xcorr_delta_template_extracts_windows():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(2, 6, 6)).astype(np.float32)
    t = np.zeros((2, 3, 3), np.float32)
    t[:, 0, 0] = 1
    np.testing.assert_allclose(ag.xcorr_depthwise(Tensor(t), Tensor(s)).data, s[:, :4, :4], atol=1e-6)


def test_xcorr_self_is_sum_of_squares():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4, 4))
    with precision(np.float64):
        out = ag.xcorr_depthwise(Tensor(x), Tensor(x)).data
    assert out.shape == (3, 1, 1)
    np.testing.assert_allclose(out[:, 0, 0], (x ** 2).sum(axis=(1, 2)))


def test_xcorr_equals_per_channel_conv():
    rng = np.random.default_rng(4)
    t, s = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 7, 6))
    with precision(np.float64):
        out = ag.xcorr_depthwise(Tensor(t), Tensor(s)).data
        for c in range(3):
            ref = ag.conv2d(Tensor(s[c:c + 1]), Tensor(t[c][None, None])).data[0]
            np.testing.assert_allclose(out[c], ref, rtol=1e-12)


def test_xcorr_template_larger_than_search_errors():
    with pytest.raises(ag.ShapeError, match="larger"):
        ag.xcorr_depthwise(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 4, 4))))


# ----------------------------------------------------------- elementwise

def test_relu_add_exp_values():
    np.testing.assert_array_equal(ag.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = Tensor([1.5, -2.0])
    np.testing.assert_array_equal(ag.elementwise("add", x, Tensor([0.0, 0.0])).data, x.data)
    np.testing.assert_allclose(ag.elementwise("exp", Tensor([0.0, 1.0])).data, [1, np.e], rtol=1e-6)
    np.testing.assert_allclose(ag.elementwise("scale", x, 2).data, [3.0, -4.0])


def test_broadcast_only_scalar_or_equal_shape():
    ag.mul(Tensor(np.ones((2, 3))), Tensor(2.0))
    with pytest.raises(ag.ShapeError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ValueError):
        ag.elementwise("tanh", Tensor([1.0]))


def test_exp_overflow_is_surfaced():
    with pytest.raises(ag.NonFiniteError):
        ag.exp(Tensor([1000.0]))


def test_float32_default_and_float64_mode():
    assert Tensor([1.0]).data.dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


# --------------------------------------------------------------- backward

def test_backward_linear_map():
    (g,) = grad_of(lambda t: ag.sum_all(ag.scale(t, 2.0)), np.ones(5))
    np.testing.assert_array_equal(g, 2.0)


def test_backward_relu_negative_region_is_zero():
    (g,) = grad_of(lambda t: ag.sum_all(ag.relu(t)), -np.ones(4))
    np.testing.assert_array_equal(g, 0.0)


def test_gradients_accumulate_over_consumers():
    # y = x*x + 3x  ->  dy/dx = 2x + 3
    x = np.array([1.0, -2.0, 0.5])
    with precision(np.float64):
        (g,) = grad_of(lambda t: ag.sum_all(ag.add(ag.mul(t, t), ag.scale(t, 3.0))), x)
    np.testing.assert_allclose(g, 2 * x + 3)


def test_backward_visits_ops_in_reverse_order():
    order = []

    def tagged(t, tag):
        return ag.record_op(t.data.copy(), (t,), lambda g: (order.append(tag) or g,), tag)

    x = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        y = ag.sum_all(tagged(tagged(tagged(x, "a"), "b"), "c"))
    backward(tape, y)
    assert order == ["c", "b", "a"]


def test_backward_rejects_foreign_and_non_scalar_losses():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = ag.scale(x, 2.0)
    with pytest.raises(ag.ShapeError):
        backward(tape, y)
    with pytest.raises(ag.TapeError):
        backward(tape, Tensor(1.0))


def test_tape_is_consumed_by_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = ag.sum_all(x)
    backward(tape, y)
    with pytest.raises(ag.TapeError):
        backward(tape, y)


def _jacobian_fd(f, x, eps=1e-6):
    y0 = f(x)
    J = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        J[:, i] = ((f(xp) - f(xm)) / (2 * eps)).ravel()
    return J


def test_chain_vjp_matches_brute_force_jacobian():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(2, 1, 3, 3))
    x0 = rng.normal(size=(1, 4, 4)) + 0.1
    r = rng.normal(size=(2, 2, 2))

    def net(t):
        h = ag.conv2d(t, Tensor(w), pad=1)
        h = ag.max_pool2d(ag.exp(ag.scale(h, 0.2)), 2, 2)
        return h

    with precision(np.float64):
        J = _jacobian_fd(lambda a: net(Tensor(a)).data, x0)
        (g,) = grad_of(lambda t: ag.sum_all(ag.mul(net(t), Tensor(r))), x0)
    np.testing.assert_allclose(g.ravel(), r.ravel() @ J, rtol=1e-5, atol=1e-8)


def test_max_pool_and_crop_border():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    np.testing.assert_array_equal(ag.max_pool2d(Tensor(x)).data, [[[5, 7], [13, 15]]])
    np.testing.assert_array_equal(ag.crop_border(Tensor(x), 1).data, x[:, 1:3, 1:3])
    (g,) = grad_of(lambda t: ag.sum_all(ag.crop_border(t, 1)), x)
    assert g.sum() == 4 and g[0, 0, 0] == 0
    with pytest.raises(ag.ShapeError):
        ag.crop_border(Tensor(x), 2)


# ------------------------------------------------------ finite differences

def test_fd_check_sum_of_squares_passes():
    rep = finite_diff_check(lambda t: ag.sum_all(ag.mul(t, t)), np.random.default_rng(6).normal(size=7))
    assert rep.passed and rep.max_rel_err < 1e-6


def test_fd_check_constant_passes():
    rep = finite_diff_check(lambda t: ag.sum_all(ag.scale(t, 0.0)), np.ones(3))
    assert rep.passed and rep.max_abs_err == 0


def test_fd_check_wrong_gradient_fails():
    x = np.random.default_rng(7).normal(size=5)
    rep = finite_diff_check(lambda t: ag.sum_all(ag.mul(t, t)), x, analytic=lambda a: 4 * a)
    assert not rep.passed and rep.max_rel_err > 0.4


def test_fd_check_step_ladder_still_rejects_wrong_gradient():
    x = np.random.default_rng(8).normal(size=5)
    rep = finite_diff_check(lambda t: ag.sum_all(ag.mul(t, t)), x, eps=(1e-5, 2e-6),
                            analytic=lambda a: 2 * a * 1.01)
    assert not rep.passed

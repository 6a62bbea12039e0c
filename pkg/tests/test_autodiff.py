import numpy as np
import pytest

from nerfad import autodiff as ad
from nerfad.autodiff import ComputeGraph, Tensor, evaluate, gradient

import gradient_suite as gs


# ---- evaluate / gradient examples ----

def test_evaluate_doubling():
    g = ComputeGraph(lambda x: x * 2.0)
    np.testing.assert_array_equal(evaluate(g, {"x": np.array([3.0])}), [6.0])


def test_evaluate_identity():
    g = ComputeGraph(lambda x: x)
    np.testing.assert_array_equal(evaluate(g, {"x": np.array([1.0, 2.0, 3.0])}), [1.0, 2.0, 3.0])


def test_evaluate_softplus_zero():
    g = ComputeGraph(lambda x: ad.softplus(x))
    np.testing.assert_allclose(evaluate(g, {"x": np.array([0.0])}), [np.log(2.0)], rtol=1e-15)


def test_gradient_square():
    g = ComputeGraph(lambda x: ad.tsum(x * x))
    np.testing.assert_allclose(gradient(g, {"x": np.array([3.0])}, ["x"])["x"], [6.0])


def test_gradient_bilinear():
    g = ComputeGraph(lambda x, y: ad.tsum(x * y))
    out = gradient(g, {"x": np.array([2.0]), "y": np.array([5.0])}, ["x", "y"])
    np.testing.assert_allclose(out["x"], [5.0])
    np.testing.assert_allclose(out["y"], [2.0])


def test_gradient_norm():
    g = ComputeGraph(lambda w: ad.sqrt(ad.tsum(w * w)))
    np.testing.assert_allclose(gradient(g, {"w": np.array([3.0, 4.0])}, ["w"])["w"], [0.6, 0.8], rtol=1e-14)


def test_gradient_of_unused_leaf_is_zero():
    g = ComputeGraph(lambda x, y: ad.tsum(x * x))
    out = gradient(g, {"x": np.ones(2), "y": np.ones((2, 3))}, ["y"])
    np.testing.assert_array_equal(out["y"], np.zeros((2, 3)))


def test_parameters_bound_by_default_and_overridable():
    g = ComputeGraph(lambda x, w: ad.tsum(x * w), parameters={"w": np.array([2.0])})
    assert evaluate(g, {"x": np.array([3.0])})[()] == 6.0
    assert evaluate(g, {"x": np.array([3.0]), "w": np.array([1.0])})[()] == 3.0


# ---- errors ----

def test_unbound_leaf():
    g = ComputeGraph(lambda x, y: x + y)
    with pytest.raises(ad.UnboundLeafError, match="y"):
        evaluate(g, {"x": np.ones(2)})


def test_shape_error_names_node():
    g = ComputeGraph(lambda a, b: ad.matmul(a, b))
    with pytest.raises(ad.ShapeError, match="matmul"):
        evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_non_scalar_root():
    g = ComputeGraph(lambda x: x * 2.0)
    with pytest.raises(ad.AutodiffError, match="scalar"):
        gradient(g, {"x": np.ones(3)}, ["x"])


def test_gradient_wrt_unknown_leaf():
    g = ComputeGraph(lambda x: ad.tsum(x))
    with pytest.raises(ad.UnboundLeafError):
        gradient(g, {"x": np.ones(3)}, ["z"])


@pytest.mark.parametrize("op", [ad.log, ad.sin, ad.cos, ad.tabs, lambda t: ad.cumsum(t, axis=-1)])
def test_first_order_ops_refuse_double_backward(op):
    x = Tensor(np.array([0.3, 0.7]), requires_grad=True)
    with pytest.raises(ad.UnsupportedOpError):
        ad.grad(ad.tsum(op(x)), [x], create_graph=True)


def test_registry_marks_second_order_support():
    assert ad.OP_REGISTRY["matmul"] and ad.OP_REGISTRY["softplus"] and ad.OP_REGISTRY["im2col"]
    assert not ad.OP_REGISTRY["log"]


# ---- input gradient norm / penalty ----

def _linear(w):
    wt = Tensor(np.asarray(w, dtype=float))
    return lambda x: ad.reshape(ad.matmul(x, ad.reshape(wt, (-1, 1))), (x.shape[0],))


def test_unit_linear_critic_has_zero_penalty():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 2)))
    np.testing.assert_allclose(ad.input_gradient_norm(_linear([1.0, 0.0]), x).data, np.ones(3))
    assert ad.gradient_penalty(_linear([1.0, 0.0]), x, 10.0).item() == 0.0


def test_linear_critic_norm_two():
    x = Tensor(np.random.default_rng(1).standard_normal((4, 2)))
    np.testing.assert_allclose(ad.gradient_penalty(_linear([2.0, 0.0]), x, 10.0).item(), 10.0, rtol=1e-12)


def test_constant_critic_penalty_is_lambda():
    x = Tensor(np.ones((2, 3)))
    const = lambda t: ad.tsum(t * 0.0, axis=1) + 5.0
    np.testing.assert_allclose(ad.input_gradient_norm(const, x).data, [0.0, 0.0])
    np.testing.assert_allclose(ad.gradient_penalty(const, x, 7.0).item(), 7.0)


def test_penalty_parameter_gradient_matches_fd_two_layer():
    err = max(gs.check_point(gs.OPS["double_backward"], np.random.default_rng([3, k])) for k in range(4))
    assert err < 1e-3


# ---- invariants ----

def test_gradient_linearity():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(6)
    f = lambda x: ad.tsum(ad.sigmoid(x) * ad.tanh(x))
    g = lambda x: ad.tsum(ad.softplus(x) * x)
    ga = gradient(ComputeGraph(lambda x: f(x) + g(x)), {"x": x}, ["x"])["x"]
    gf = gradient(ComputeGraph(f), {"x": x}, ["x"])["x"]
    gg = gradient(ComputeGraph(g), {"x": x}, ["x"])["x"]
    np.testing.assert_allclose(ga, gf + gg, rtol=0, atol=1e-12)


def test_repeated_calls_bit_identical():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((4, 3))
    g = ComputeGraph(lambda x, w: ad.tsum(ad.softplus(ad.matmul(x, w))))
    b = {"x": rng.standard_normal((5, 4)), "w": w}
    v1, v2 = evaluate(g, b), evaluate(g, b)
    d1, d2 = gradient(g, b, ["w"]), gradient(g, b, ["w"])
    assert v1.tobytes() == v2.tobytes()
    assert d1["w"].tobytes() == d2["w"].tobytes()


def test_grad_check_quadratic():
    err = ad.grad_check(lambda v: float(v[0] ** 2), lambda v: 2 * v, np.array([3.0]), 1e-5)
    assert err < 1e-8


def test_log_clamps_argument():
    assert np.isfinite(ad.log(Tensor(np.array([0.0]))).item())
    np.testing.assert_allclose(ad.log(Tensor(np.array([0.0]))).item(), np.log(ad.LOG_EPS))


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(x * x)
    assert not y.requires_grad


# ---- layers ----

def test_conv_matches_direct_convolution():
    rng = np.random.default_rng(7)
    conv = ad.Conv2d(2, 3, 3, rng, stride=2, pad=1)
    x = rng.standard_normal((1, 5, 5, 2))
    y = conv(Tensor(x)).data
    w = conv.weight.data.reshape(3, 3, 2, 3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 3, 3))
    for oy in range(3):
        for ox in range(3):
            patch = xp[0, 2 * oy : 2 * oy + 3, 2 * ox : 2 * ox + 3, :]
            ref[0, oy, ox] = np.einsum("ijc,ijco->o", patch, w) + conv.bias.data
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv_channel_mismatch():
    conv = ad.Conv2d(2, 3, 3, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        conv(Tensor(np.zeros((1, 4, 4, 3))))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 6, 6, 3))
    cols = ad.im2col(Tensor(x), 3, 2, 1).data
    y = rng.standard_normal(cols.shape)
    back = ad.col2im(Tensor(y), x.shape, 3, 2, 1).data
    np.testing.assert_allclose(np.sum(cols * y), np.sum(x * back), rtol=1e-12)


def test_sumpool_is_adjoint_of_upsample():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 3, 3, 2))
    y = rng.standard_normal((1, 6, 6, 2))
    lhs = np.sum(ad.upsample2(Tensor(x)).data * y)
    rhs = np.sum(x * ad.sumpool2(Tensor(y)).data)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_state_dict_roundtrip():
    rng = np.random.default_rng(10)
    m = ad.Module()
    m.a = ad.Linear(3, 2, rng)
    m.b = ad.Conv2d(2, 2, 3, rng)
    state = m.state_dict()
    m2 = ad.Module()
    m2.a = ad.Linear(3, 2, np.random.default_rng(11))
    m2.b = ad.Conv2d(2, 2, 3, np.random.default_rng(11))
    m2.load_state_dict(state)
    for (k1, v1), (k2, v2) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert k1 == k2 and np.array_equal(v1, v2)


def test_load_state_dict_strict():
    m = ad.Module()
    m.a = ad.Linear(3, 2, np.random.default_rng(0))
    with pytest.raises(Exception):
        m.load_state_dict({"a.weight": np.zeros((3, 2))})


def test_adam_minimises_quadratic():
    m = ad.Module()
    m.l = ad.Linear(2, 1, np.random.default_rng(0))
    opt = ad.Adam(m, 0.05)
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    y = np.array([[1.0], [0.0]])
    for _ in range(500):
        d = m.l(Tensor(x)) - Tensor(y)
        opt.step(ad.module_grads(m, ad.tsum(d * d)))
    d = m.l(Tensor(x)).data - y
    assert np.sum(d * d) < 1e-6

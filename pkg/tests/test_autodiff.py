import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csi_mimic import autodiff as ad
from csi_mimic.autodiff import ConfigError, DimensionError, UsageError
from csi_mimic.gradcheck import TOL, check_gradients


def t(a, grad=True):
    return ad.tensor(a, requires_grad=grad)


# ---------------------------------------------------------------- op examples

def test_matmul_identity():
    a = t(np.eye(2))
    b = t([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(a, b).value, [[1, 2], [3, 4]])


def test_matmul_zero_annihilator():
    y = ad.matmul(t([[1, 2], [3, 4]]), t(np.zeros((2, 2))))
    np.testing.assert_array_equal(y.value, np.zeros((2, 2)))


def test_matmul_hand_product():
    y = ad.matmul(t([[1, 2], [3, 4]]), t([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(y.value, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 5, 4))
    y = ad.conv2d(t(x), t(np.eye(2).reshape(2, 2, 1, 1)), t(np.zeros(2)))
    np.testing.assert_allclose(y.value, x.astype(np.float32))


def test_conv_zero_kernel():
    x = np.random.default_rng(1).standard_normal((1, 3, 6, 6))
    y = ad.conv2d(t(x), t(np.zeros((4, 3, 3, 3))), t(np.zeros(4)))
    assert y.shape == (1, 4, 6, 6)
    assert not y.value.any()


def test_conv_all_ones_direct_sum():
    y = ad.conv2d(t(np.ones((1, 3, 3))), t(np.ones((1, 1, 3, 3))), t(np.zeros(1))).value[0]
    assert y[1, 1] == 9
    assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4
    assert y[0, 1] == 6


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 5, 7))
    w = rng.standard_normal((4, 3, 3, 5))
    b = rng.standard_normal(4)
    with ad.precision(np.float64):
        got = ad.conv2d(t(x), t(w), t(b)).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (2, 2)))
    want = np.zeros((2, 4, 5, 7))
    for n in range(2):
        for o in range(4):
            for h in range(5):
                for q in range(7):
                    want[n, o, h, q] = np.sum(w[o] * xp[n, :, h:h + 3, q:q + 5]) + b[o]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_even_kernel_is_config_error():
    with pytest.raises(ConfigError):
        ad.conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 2, 2, 3))))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(t(np.ones((1, 3, 4, 4))), t(np.ones((1, 2, 3, 3))))


@pytest.mark.parametrize("x, want", [(2.0, 2.0), (-1.0, -0.3)])
def test_leaky_relu_values(x, want):
    assert ad.leaky_relu(t([x]), 0.3).value[0] == pytest.approx(want)


def test_leaky_relu_gradient_at_negative_point():
    x = t([-1.0])
    ad.backward(ad.sum(ad.leaky_relu(x, 0.3)))
    assert x.grad[0] == pytest.approx(0.3)


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.2, 1.5])
def test_leaky_relu_slope_range(slope):
    with pytest.raises(ConfigError):
        ad.leaky_relu(t([1.0]), slope)


def test_sigmoid_examples():
    x = t([0.0])
    y = ad.sigmoid(x)
    ad.backward(ad.sum(y))
    assert y.value[0] == 0.5
    assert x.grad[0] == 0.25


def test_sigmoid_saturation_is_finite():
    with ad.precision(np.float64):
        y = ad.sigmoid(t([100.0, -100.0, 1e6, -1e6]))
    assert np.all(np.isfinite(y.value))
    assert abs(y.value[0] - 1.0) < 1e-12
    assert y.value[3] == 0.0


def test_mse_examples():
    a = t([1.0, 2.0])
    assert ad.mse(a, a).value == 0
    assert ad.mse(t(np.zeros(4)), t(np.ones(4))).value == 1.0
    assert ad.mse(t([1.0, 2.0]), t([3.0, 5.0])).value == pytest.approx(6.5)


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.mse(t(np.zeros(3)), t(np.zeros(4)))


def test_backward_mse_self_is_zero_grad():
    x = t(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.mse(x, x))
    np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))


def test_backward_linear_passthrough():
    x = t(np.random.default_rng(3).standard_normal((3, 2)))
    ad.backward(ad.sum(ad.matmul(ad.constant(np.eye(3)), x)))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_needs_scalar():
    with pytest.raises(UsageError):
        ad.backward(t(np.ones(3)))


def test_backward_grad_shapes_match_values():
    rng = np.random.default_rng(4)
    x = t(rng.standard_normal((2, 2, 5, 5)))
    w = t(rng.standard_normal((3, 2, 3, 3)))
    h = ad.leaky_relu(ad.conv2d(x, w), 0.3)
    flat = ad.reshape(h, (2, -1))
    loss = ad.mse(ad.linear(flat, t(rng.standard_normal((4, 75)))), ad.constant(np.zeros((2, 4))))
    ad.backward(loss)
    for node in ad._topo_order(loss):
        assert node.grad is not None and node.grad.shape == node.value.shape


def test_graph_is_acyclic_and_topologically_ordered():
    x = t(np.ones((2, 2)))
    y = ad.add(ad.matmul(x, x), x)
    order = ad._topo_order(ad.sum(y))
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


# ---------------------------------------------------------------- gradient checks (64-bit)

def _rand(rng, *shape):
    return rng.standard_normal(shape)


OP_CASES = {
    "matmul": (lambda L: ad.sum(ad.matmul(L["a"], L["b"])),
               lambda rng: {"a": _rand(rng, 3, 4), "b": _rand(rng, 4, 2)}),
    "linear": (lambda L: ad.mse(ad.linear(L["x"], L["w"], L["b"]), ad.constant(np.ones((3, 2)))),
               lambda rng: {"x": _rand(rng, 3, 5), "w": _rand(rng, 2, 5), "b": _rand(rng, 2)}),
    "conv2d": (lambda L: ad.mse(ad.conv2d(L["x"], L["w"], L["b"]), ad.constant(np.zeros((2, 3, 4, 5)))),
               lambda rng: {"x": _rand(rng, 2, 2, 4, 5), "w": _rand(rng, 3, 2, 3, 5), "b": _rand(rng, 3)}),
    "leaky_relu": (lambda L: ad.mse(ad.leaky_relu(L["x"], 0.3), ad.constant(np.zeros((3, 4)))),
                   lambda rng: {"x": _rand(rng, 3, 4)}),
    "sigmoid": (lambda L: ad.mse(ad.sigmoid(L["x"]), ad.constant(np.full((4, 3), 0.2))),
                lambda rng: {"x": 3 * _rand(rng, 4, 3)}),
    "mse": (lambda L: ad.mse(L["a"], L["b"]), lambda rng: {"a": _rand(rng, 5), "b": _rand(rng, 5)}),
    "add_sub_scale": (lambda L: ad.mse(ad.sub(ad.add(L["a"], L["b"]), ad.scale(L["a"], 0.7)),
                                       ad.constant(np.zeros((2, 3)))),
                      lambda rng: {"a": _rand(rng, 2, 3), "b": _rand(rng, 3)}),
    "reshape_concat": (lambda L: ad.mse(ad.reshape(ad.concat([L["a"], L["b"]], axis=1), (2, -1)),
                                        ad.constant(np.zeros((2, 5)))),
                       lambda rng: {"a": _rand(rng, 2, 2, 1), "b": _rand(rng, 2, 3, 1)}),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_twenty_instances(op):
    build, draw = OP_CASES[op]
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    worst = 0.0
    for _ in range(20):
        errs = check_gradients(build, draw(rng))
        worst = max(worst, *errs.values())
    assert worst < TOL


def test_three_layer_net_gradients():
    rng = np.random.default_rng(5)

    def build(L):
        h = ad.leaky_relu(ad.linear(L["x"], L["w1"], L["b1"]), 0.3)
        h = ad.sigmoid(ad.linear(h, L["w2"], L["b2"]))
        return ad.mse(ad.linear(h, L["w3"]), ad.constant(np.zeros((4, 2))))

    for _ in range(20):
        inputs = {"x": _rand(rng, 4, 5), "w1": _rand(rng, 6, 5), "b1": _rand(rng, 6),
                  "w2": _rand(rng, 3, 6), "b2": _rand(rng, 3), "w3": _rand(rng, 2, 3)}
        assert max(check_gradients(build, inputs).values()) < TOL


def test_binarize_forward_examples():
    w = np.array([0.5, -0.25, 0.0, -1.0])
    s = np.mean(np.abs(w))
    np.testing.assert_allclose(ad.binarize_forward(w), [s, -s, s, -s])


def test_binarize_ste_definition():
    latent = np.array([0.2, -0.9, 1.0, -1.0, 1.5, -3.0])
    up = np.arange(1.0, 7.0)
    np.testing.assert_array_equal(ad.binarize_backward(up, latent), [1, 2, 3, 4, 0, 0])
    node = t(latent)
    ad.backward(ad.sum(ad.scale(ad.binarize(node), 2.0)))
    np.testing.assert_array_equal(node.grad, [2, 2, 2, 2, 0, 0])


def test_binarize_empty_is_usage_error():
    with pytest.raises(UsageError):
        ad.binarize_forward(np.zeros(0))


# ---------------------------------------------------------------- properties

small = st.integers(1, 5)


@settings(max_examples=25, deadline=None)
@given(m=small, k=small, n=small, seed=st.integers(0, 2**31 - 1))
def test_matmul_backward_is_linear_in_upstream(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a_val, b_val = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    grads = []
    for factor in (1.0, 2.0):
        with ad.precision(np.float64):
            a, b = t(a_val), t(b_val)
            ad.backward(ad.sum(ad.scale(ad.matmul(a, b), factor)))
        grads.append((a.grad, b.grad))
    np.testing.assert_array_equal(grads[1][0], 2 * grads[0][0])
    np.testing.assert_array_equal(grads[1][1], 2 * grads[0][1])


@settings(max_examples=15, deadline=None)
@given(c=st.integers(1, 3), o=st.integers(1, 3), h=small, w=small,
       kh=st.sampled_from([1, 3, 5]), kw=st.sampled_from([1, 3]), seed=st.integers(0, 2**31 - 1))
def test_conv_backward_is_linear_in_upstream(c, o, h, w, kh, kw, seed):
    rng = np.random.default_rng(seed)
    xv, wv = rng.standard_normal((2, c, h, w)), rng.standard_normal((o, c, kh, kw))
    grads = []
    for factor in (1.0, 2.0):
        with ad.precision(np.float64):
            x, k = t(xv), t(wv)
            ad.backward(ad.sum(ad.scale(ad.conv2d(x, k), factor)))
        grads.append((x.grad, k.grad))
    np.testing.assert_array_equal(grads[1][0], 2 * grads[0][0])
    np.testing.assert_array_equal(grads[1][1], 2 * grads[0][1])


@settings(max_examples=25, deadline=None)
@given(n=small, seed=st.integers(0, 2**31 - 1))
def test_fan_out_accumulates_branch_gradients(n, seed):
    rng = np.random.default_rng(seed)
    xv, w1, w2 = rng.standard_normal((n, 3)), rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    with ad.precision(np.float64):
        def branch(w, x):
            return ad.sum(ad.sigmoid(ad.matmul(x, ad.constant(w))))

        x1, x2, both = t(xv), t(xv), t(xv)
        ad.backward(branch(w1, x1))
        ad.backward(branch(w2, x2))
        ad.backward(ad.add(branch(w1, both), branch(w2, both)))
    np.testing.assert_allclose(both.grad, x1.grad + x2.grad, rtol=1e-12, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(shape=st.lists(small, min_size=1, max_size=3), seed=st.integers(0, 2**31 - 1))
def test_forward_backward_stay_finite(shape, seed):
    rng = np.random.default_rng(seed)
    x = t(50 * rng.standard_normal(shape))
    y = ad.sigmoid(ad.leaky_relu(x, 0.3))
    loss = ad.mse(y, ad.constant(np.zeros(shape)))
    ad.backward(loss)
    assert np.all(np.isfinite(y.value)) and np.all(np.isfinite(x.grad))


def test_forward_is_deterministic():
    from csi_mimic.nn import build_decoder, build_student_encoder

    x = np.random.default_rng(6).uniform(0, 1, (4, 2, 32, 32))
    outs = []
    for _ in range(2):
        enc, dec = build_student_encoder(512, seed=3), build_decoder(512, seed=4)
        outs.append(dec(enc(ad.constant(x))).value)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_precision_context_restores_default():
    assert ad.default_dtype() is np.float32
    with ad.precision(np.float64):
        assert t([1.0]).value.dtype == np.float64
    assert t([1.0]).value.dtype == np.float32

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from varbench import tensor as T

from oracles import gradcheck_network, numeric_grad, relative_errors

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)

ULP = np.spacing(1.0)


# ------------------------------------------------------------------ forward


@given(arrays(np.float64, (3, 3), elements=finite))
def test_matmul_identity(A):
    out = T.forward_primitive("matmul", T.Tensor(np.eye(3)), T.Tensor(A))
    np.testing.assert_array_equal(out.data, A)


@given(st.integers(2, 12), st.integers(1, 5), finite)
def test_uniform_logits_cross_entropy_is_log_m(m, n, value):
    logits = T.Tensor(np.full((n, m), value))
    labels = np.arange(n) % m
    loss = T.softmax_cross_entropy(logits, labels)
    assert loss.item() == pytest.approx(math.log(m), rel=1e-12)


def test_one_by_one_conv_of_two_doubles_the_image():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (2, 1, 5, 7))
    out = T.conv2d(T.Tensor(img), T.Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, 2.0 * img)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(4, 3, 3, 3))
    stride, pad = 2, 1
    out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=stride, padding=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (6 + 2 * pad - 3) // stride + 1
    wo = (5 + 2 * pad - 3) // stride + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for r in range(ho):
                for c in range(wo):
                    ref[n, o, r, c] = (xp[n, :, r * stride:r * stride + 3, c * stride:c * stride + 3] * k[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind,args", [
    ("matmul", (np.zeros((2, 3)), np.zeros((2, 3)))),
    ("conv2d", (np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))),
    ("conv2d", (np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)))),
    ("add", (np.zeros((2, 3)), np.zeros((3, 2)))),
    ("mse", (np.zeros(3), np.zeros(4))),
    ("global_avg_pool", (np.zeros((2, 3)),)),
    ("softmax_cross_entropy", (np.zeros((2, 3)), np.array([0, 1, 2]))),
])
def test_shape_mismatch_is_rejected(kind, args):
    with pytest.raises(T.ShapeError):
        T.forward_primitive(kind, *[a if a.dtype.kind != "i" else a for a in args])


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        T.forward_primitive("maxpool", T.Tensor(np.zeros(2)))


def test_nan_propagates():
    x = T.Tensor(np.array([[1.0, np.nan]]))
    out = T.matmul(x, T.Tensor(np.eye(2)))
    assert np.isnan(out.data[0, 1])
    assert np.isnan(T.relu(x).data[0, 1])


# ------------------------------------------------------------------ backward


def test_sum_of_squares_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(4, 3))
    x = rng.normal(size=(3, 1))

    def loss_of(Wv):
        z = T.matmul(T.Tensor.view(Wv, requires_grad=True), T.Tensor(x))
        return T.tensor_sum(T.mul(z, z))

    Wt = T.Tensor.view(W, requires_grad=True)
    z = T.matmul(Wt, T.Tensor(x))
    T.backward(T.tensor_sum(T.mul(z, z)))
    num = numeric_grad(lambda: float(loss_of(W).data), W, 1e-5)
    assert relative_errors(Wt.grad, num).max() < 1e-3
    # closed form: 2 (W x) x^T
    np.testing.assert_allclose(Wt.grad, 2 * (W @ x) @ x.T, rtol=1e-12)


def test_leaf_not_in_graph_gets_exact_zero():
    a = T.parameter(np.ones(3))
    unused = T.parameter(np.ones((2, 2)))
    T.backward(T.tensor_sum(T.mul(a, a)), leaves=[a, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_relu_gradient_is_zero_at_negative_and_zero_inputs():
    x = T.parameter(np.array([-2.0, 0.0, 3.0]))
    T.backward(T.tensor_sum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_second_backward_raises_without_accumulate():
    x = T.parameter(np.array([1.0, 2.0]))
    loss = T.tensor_sum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(T.GradientError):
        T.backward(loss)
    T.backward(loss, accumulate=True)
    np.testing.assert_allclose(x.grad, 2 * 2 * np.array([1.0, 2.0]))


def test_backward_into_dirty_leaf_raises():
    x = T.parameter(np.array([1.0]))
    T.backward(T.tensor_sum(x))
    with pytest.raises(T.GradientError, match="zero_grad"):
        T.backward(T.tensor_sum(T.scale(x, 2.0)))
    x.zero_grad()
    T.backward(T.tensor_sum(T.scale(x, 2.0)))
    assert x.grad[0] == 2.0


def test_non_scalar_loss_rejected():
    with pytest.raises(T.GradientError, match="scalar"):
        T.backward(T.parameter(np.ones(3)))


def test_random_networks_gradcheck():
    rng = np.random.default_rng(3)
    errs, n_params = gradcheck_network(rng)
    assert n_params <= 5000
    assert (errs < 1e-3).mean() >= 0.99


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 2.0, -3.0, 0.125]))
def test_scaled_loss_scales_every_gradient_exactly(seed, a):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3))
    W = rng.normal(size=(3, 2))

    def grads(factor):
        xt, Wt = T.Tensor(x, requires_grad=True), T.Tensor(W, requires_grad=True)
        loss = T.softmax_cross_entropy(T.matmul(T.relu(xt), Wt), np.array([0, 1]))
        T.backward(T.scale(loss, factor))
        return xt.grad, Wt.grad

    gx1, gW1 = grads(1.0)
    gxa, gWa = grads(a)
    # powers of two are exact in binary; other factors agree to rounding, which
    # inside a reduction is relative to the summed terms rather than the result
    exact = math.log2(abs(a)).is_integer()
    for ga, g1 in ((gxa, gx1), (gWa, gW1)):
        if exact:
            np.testing.assert_array_equal(ga, a * g1)
        else:
            np.testing.assert_allclose(ga, a * g1, rtol=0, atol=8 * ULP * abs(a) * np.abs(g1).max())


def test_forward_and_backward_are_bitwise_deterministic():
    def run():
        leaves, loss_fn = __import__("oracles").random_network(np.random.default_rng(11))
        loss, t = loss_fn()
        T.backward(loss)
        return loss.data.tobytes(), b"".join(t[k].grad.tobytes() for k in sorted(t))

    assert run() == run()


# ----------------------------------------------------------------- optimizers


def test_sgd_step():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, 3.0])
    T.optimizer_step("sgd", [p], [g], lr=0.1)
    np.testing.assert_allclose(p, [1.0 - 0.05, -2.0 - 0.3], rtol=0, atol=1e-15)


@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]), st.floats(1e-4, 1e-1))
def test_adam_first_step_moves_by_lr(gmag, sign, lr):
    p = np.zeros(4)
    T.optimizer_step("adam", [p], [np.full(4, sign * gmag)], lr=lr)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = -sign * lr * gmag / (gmag + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)
    assert abs(abs(p[0]) - lr) < lr * 1e-5


def test_zero_gradient_leaves_params():
    p = np.array([0.3, -0.7])
    T.optimizer_step("sgd", [p], [np.zeros(2)], lr=1.0)
    np.testing.assert_array_equal(p, [0.3, -0.7])
    q = p.copy()
    state = T.optimizer_step("adam", [q], [np.zeros(2)], lr=0.01)
    assert np.abs(q - p).max() == 0.0
    T.optimizer_step("adam", [q], [np.zeros(2)], lr=0.01, state=state)
    assert np.abs(q - p).max() <= 1e-8


def test_adam_keeps_state_between_steps():
    p = np.zeros(1)
    state = T.optimizer_step("adam", [p], [np.ones(1)], lr=0.1)
    state = T.optimizer_step("adam", [p], [np.ones(1)], lr=0.1, state=state)
    assert state.t == 2
    np.testing.assert_allclose(p, [-0.2], rtol=1e-6)


def test_optimizer_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.optimizer_step("sgd", [np.zeros(2)], [np.zeros(3)], lr=0.1)
    with pytest.raises(T.ShapeError):
        T.optimizer_step("adam", [np.zeros(2)], [np.zeros((2, 1))], lr=0.1)
    with pytest.raises(ValueError):
        T.optimizer_step("sgd", [np.zeros(2)], [np.zeros(2)], lr=0.0)


# ----------------------------------------------------------------- init + I/O


def test_fan_in_uniform_bounds_and_seed():
    a = T.fan_in_uniform(np.random.default_rng(5), (8, 3, 3, 3))
    b = T.fan_in_uniform(np.random.default_rng(5), (8, 3, 3, 3))
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() <= math.sqrt(3 * 2.0 / 27)


def test_checkpoint_round_trip_and_layout(tmp_path):
    rng = np.random.default_rng(6)
    tensors = {"w": rng.normal(size=(2, 3, 1)), "bias": rng.normal(size=4), "s": np.array(1.5)}
    path = tmp_path / "ck.bin"
    T.save_tensors(path, tensors)
    back = T.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].shape == tensors[k].shape
    blob = path.read_bytes()
    assert blob[:4] == b"VBTC"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 3
    assert len(blob) == 12 + sum(4 + len(k) + 4 + 8 * v.ndim + 8 * v.size for k, v in tensors.items())


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="not a checkpoint"):
        T.load_tensors(p)

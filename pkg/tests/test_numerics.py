"""Tensor ops, activations, and the finite-difference gradient checker."""
import numpy as np
import pytest

from medseq.numerics import (
    Parameter,
    ShapeError,
    add,
    affine,
    grad_check,
    hadamard,
    matmul,
    matmul_backward,
    sigmoid,
    sigmoid_backward,
    softmax,
    softmax_backward,
    tanh_backward,
    uniform_init,
)


def triple_loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestOps:
    def test_identity_matmul(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        np.testing.assert_array_equal(matmul(np.eye(4), x), x)

    def test_matmul_vs_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(a, b), triple_loop_matmul(a, b),
                                   rtol=0, atol=1e-12)

    def test_shape_errors_name_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            matmul(np.zeros((3, 4)), np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            add(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            hadamard(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_affine_zero_weights_broadcasts_bias(self):
        x = np.ones((3, 4))
        b = np.array([1.0, -2.0])
        out = affine(x, np.zeros((4, 2)), b)
        np.testing.assert_array_equal(out, np.tile(b, (3, 1)))

    def test_matmul_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        pa, pb = Parameter("a", a.copy()), Parameter("b", b.copy())

        def f():
            pa.zero_grad()
            pb.zero_grad()
            c = matmul(pa.value, pb.value)
            da, db = matmul_backward(np.ones_like(c), pa.value, pb.value)
            pa.grad += da
            pb.grad += db
            return float(c.sum())

        assert grad_check(f, [pa, pb]) < 1e-8


class TestActivations:
    def test_sigmoid_half_at_zero(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5

    def test_sigmoid_definition(self):
        z = np.linspace(-5, 5, 21)
        np.testing.assert_allclose(sigmoid(z), 1 / (1 + np.exp(-z)), atol=1e-15)

    def test_sigmoid_saturation_stable(self):
        out = sigmoid(np.array([-1000.0, 1000.0]))
        assert out[0] == pytest.approx(0.0, abs=1e-20)
        assert out[1] == 1.0
        assert np.all(np.isfinite(out))

    def test_softmax_uniform_over_85(self):
        probs = softmax(np.zeros((1, 85)))
        np.testing.assert_allclose(probs, 1.0 / 85.0, atol=1e-15)

    def test_softmax_hand_values(self):
        probs = softmax(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(probs[0], [0.09003057, 0.24472847, 0.66524096],
                                   atol=1e-5)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for scale in (1.0, 5.0, 50.0):
            probs = softmax(rng.normal(scale=scale, size=(64, 85)))
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(probs > 0)
        # open interval holds wherever rounding cannot saturate
        probs = softmax(rng.normal(scale=5.0, size=(64, 85)))
        assert np.all(probs < 1)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(5, 7))
        np.testing.assert_allclose(softmax(logits), softmax(logits + 100.0),
                                   atol=1e-12)

    def test_activation_backwards_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(3, 4))
        eps = 1e-6
        y = sigmoid(z)
        dz = sigmoid_backward(np.ones_like(y), y)
        num = (sigmoid(z + eps) - sigmoid(z - eps)) / (2 * eps)
        np.testing.assert_allclose(dz, num, atol=1e-8)
        ty = np.tanh(z)
        num_t = (np.tanh(z + eps) - np.tanh(z - eps)) / (2 * eps)
        np.testing.assert_allclose(tanh_backward(np.ones_like(ty), ty), num_t,
                                   atol=1e-8)

    def test_softmax_backward(self):
        rng = np.random.default_rng(6)
        logits = Parameter("l", rng.normal(size=(2, 5)))
        dy = rng.normal(size=(2, 5))

        def f():
            logits.zero_grad()
            y = softmax(logits.value)
            logits.grad += softmax_backward(dy, y)
            return float((softmax(logits.value) * dy).sum())

        assert grad_check(f, [logits]) < 1e-7


class TestGradCheck:
    def test_quadratic(self):
        theta = Parameter("t", np.array([[3.0]]))

        def f():
            theta.zero_grad()
            theta.grad += 2.0 * theta.value
            return float(theta.value[0, 0] ** 2)

        assert grad_check(f, [theta]) < 1e-9

    def test_sigmoid_neuron_cross_entropy(self):
        rng = np.random.default_rng(7)
        w = Parameter("w", rng.normal(size=(4, 1)))
        b = Parameter("b", np.zeros(1))
        x = rng.normal(size=(8, 4))
        y = (rng.random((8, 1)) < 0.5).astype(float)

        def f():
            w.zero_grad()
            b.zero_grad()
            p = sigmoid(x @ w.value + b.value)
            loss = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum()
            dlogits = p - y
            w.grad += x.T @ dlogits
            b.grad += dlogits.sum(axis=0)
            return float(loss)

        assert grad_check(f, [w, b]) < 1e-6

    def test_detects_wrong_gradient(self):
        theta = Parameter("t", np.array([[1.5]]))

        def f():
            theta.zero_grad()
            theta.grad += 3.0 * theta.value  # wrong on purpose
            return float(theta.value[0, 0] ** 2)

        assert grad_check(f, [theta]) > 0.1

    def test_accumulation_linearity(self):
        rng = np.random.default_rng(8)
        w = Parameter("w", rng.normal(size=(3, 3)))
        x1, x2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

        def backward_of(x):
            w.zero_grad()
            out = x @ w.value
            w.grad += x.T @ np.ones_like(out)
            return w.grad.copy()

        g1 = backward_of(x1)
        g2 = backward_of(x2)
        w.zero_grad()
        for x in (x1, x2):  # accumulate both without zeroing
            out = x @ w.value
            w.grad += x.T @ np.ones_like(out)
        np.testing.assert_allclose(w.grad, g1 + g2, atol=1e-12)


def test_uniform_init_bounds():
    rng = np.random.default_rng(9)
    arr = uniform_init(rng, (100, 100), fan_in=25)
    assert np.all(np.abs(arr) <= 0.2)
    assert arr.std() > 0.05


def test_parameter_contract():
    p = Parameter("x", np.zeros((2, 3)))
    assert p.grad.shape == (2, 3)
    p.grad += 1.0
    p.zero_grad()
    assert not p.grad.any()

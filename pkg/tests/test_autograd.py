import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssdg.autograd import (
    Tensor,
    backward,
    batch_norm_eval,
    batch_norm_train,
    elementwise,
    finite_diff_check,
    linear,
    matmul,
    no_grad,
    relu,
    sgd_step,
    softmax_cross_entropy,
)
from ssdg.errors import ContractError, DimensionError, NumericError


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        np.testing.assert_array_equal(matmul(eye, eye).data, eye)

    def test_hand_product(self):
        out = matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_zero_annihilates(self):
        b = np.random.default_rng(0).normal(size=(3, 5))
        np.testing.assert_array_equal(matmul(np.zeros((4, 3)), b).data, np.zeros((4, 5)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradients(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor([[5.0], [6.0]], requires_grad=True)
        backward(matmul(a, b).sum())
        g = np.ones((2, 1))
        np.testing.assert_array_equal(a.grad, g @ b.data.T)
        np.testing.assert_array_equal(b.grad, a.data.T @ g)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_relu_gradient_zero_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        backward(relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_add_zero(self):
        x = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(elementwise("add", x, 0.0).data, x)

    def test_mul(self):
        np.testing.assert_array_equal(elementwise("mul", [2.0, 3.0], [4.0, 5.0]).data, [8.0, 15.0])

    def test_scale_and_sub(self):
        np.testing.assert_array_equal(elementwise("scale", [1.0, -2.0], 3).data, [3.0, -6.0])
        np.testing.assert_array_equal(elementwise("sub", [1.0, 2.0], [0.5, 0.5]).data, [0.5, 1.5])

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            elementwise("add", np.ones(3), np.ones(2))

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            elementwise("div", 1.0, 2.0)

    def test_scalar_broadcast_gradient(self):
        s = Tensor(2.0, requires_grad=True)
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward((s * x).sum())
        assert s.grad == pytest.approx(6.0)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


class TestCrossEntropy:
    def test_saturated(self):
        loss = softmax_cross_entropy([[1000.0, 0.0]], [[1.0, 0.0]])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits(self):
        loss = softmax_cross_entropy([[0.0, 0.0]], [[1.0, 0.0]])
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-15)

    def test_all_masked(self):
        logits = Tensor([[1.0, 2.0], [3.0, -1.0]], requires_grad=True)
        loss = softmax_cross_entropy(logits, np.zeros((2, 2)))
        assert loss.item() == 0.0
        backward(loss)
        np.testing.assert_array_equal(logits.grad, np.zeros((2, 2)))

    def test_masked_row_ignored(self):
        a = softmax_cross_entropy([[0.3, -0.2], [5.0, 1.0]], [[1.0, 0.0], [0.0, 0.0]])
        b = softmax_cross_entropy([[0.3, -0.2]], [[1.0, 0.0]])
        assert a.item() == b.item()

    def test_weighted_mean(self):
        logits = np.array([[0.0, 0.0], [2.0, 0.0]])
        labels = np.eye(2)
        per_row = [np.log(2.0), np.log(1 + np.exp(2.0))]
        loss = softmax_cross_entropy(logits, labels, weights=[1.0, 3.0])
        assert loss.item() == pytest.approx((per_row[0] + 3 * per_row[1]) / 2)

    def test_class_mismatch(self):
        with pytest.raises(DimensionError):
            softmax_cross_entropy(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_negative_weight(self):
        with pytest.raises(ContractError):
            softmax_cross_entropy(np.zeros((1, 2)), [[1.0, 0.0]], weights=[-1.0])


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_two_consumers_sum(self):
        w = np.array([0.5, -1.5, 2.0])
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        backward(((x * w).sum() + relu(x).sum()))
        both = x.grad.copy()

        x1 = Tensor(x.data, requires_grad=True)
        backward((x1 * w).sum())
        x2 = Tensor(x.data, requires_grad=True)
        backward(relu(x2).sum())
        np.testing.assert_array_equal(both, x1.grad + x2.grad)

    def test_accumulates_across_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar(self):
        with pytest.raises(ContractError):
            backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad


class TestSGD:
    def test_arithmetic(self):
        p = Tensor(1.0, requires_grad=True)
        p.grad = np.array(2.0)
        sgd_step([p], 0.5)
        assert p.item() == 0.0
        assert p.grad is None

    def test_zero_grad_fixed_point(self):
        p = Tensor([1.0, -3.0], requires_grad=True)
        p.grad = np.zeros(2)
        sgd_step([p], 0.1)
        np.testing.assert_array_equal(p.data, [1.0, -3.0])

    def test_zero_lr(self):
        p = Tensor([1.0, -3.0], requires_grad=True)
        p.grad = np.array([5.0, 7.0])
        sgd_step([p], 0.0)
        np.testing.assert_array_equal(p.data, [1.0, -3.0])

    def test_missing_grad(self):
        with pytest.raises(ContractError):
            sgd_step([Tensor(1.0, requires_grad=True)], 0.1)


class TestTensorInvariants:
    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.nan])
        with pytest.raises(NumericError):
            Tensor([np.inf])

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
        a = linear(x, w, b).data
        c = linear(x, w, b).data
        assert a.tobytes() == c.tobytes()


class TestFiniteDiff:
    def test_sum_of_squares(self):
        err = finite_diff_check(lambda t: (t * t).sum(), Tensor([1.0, 2.0, 3.0]), eps=1e-5)
        assert err < 1e-6

    def test_linear_function(self):
        w = np.array([0.3, -1.2, 2.5])
        assert finite_diff_check(lambda t: (t * w).sum(), Tensor([1.0, 2.0, 3.0]), eps=1e-5) < 1e-9

    def test_bn_layer(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 4))
        gamma, beta = rng.normal(size=4), rng.normal(size=4)
        proj = rng.normal(size=(6, 4))

        def f(t):
            out, _, _ = batch_norm_train(t, gamma, beta, 1e-5)
            return (out * proj).sum()

        assert finite_diff_check(f, Tensor(x)) < 1e-4

    def test_eps_positive(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda t: t.sum(), Tensor([1.0]), eps=0.0)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)))
    def test_bn_eval_gradient(self, x):
        gamma = np.array([1.5, -0.5, 2.0])
        mean, var = np.array([0.1, -0.2, 0.3]), np.array([1.0, 2.0, 0.5])
        proj = np.arange(12.0).reshape(4, 3) / 7.0

        def f(t):
            return (batch_norm_eval(t, gamma, np.zeros(3), mean, var, 1e-5) * proj).sum()

        assert finite_diff_check(f, Tensor(x)) < 1e-6

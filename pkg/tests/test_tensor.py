import numpy as np
import pytest

from cmtkd import tensor as T
from cmtkd.gradcheck import numerical_grad, relative_error
from cmtkd.tensor import NonFiniteError, Tensor, backward, no_grad


def _check(fn, inputs, tol=1e-7):
    for x in inputs:
        x.grad = None
    backward(fn())
    for x in inputs:
        num = numerical_grad(fn, x)
        assert relative_error(x.grad, num) < tol


class TestGraph:
    def test_leaf_accumulates_across_backward_calls(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((x * x).sum())
        backward((3.0 * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0 + 3.0, 4.0 + 3.0])

    def test_second_backward_on_same_graph_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * 2.0).sum()
        backward(loss)
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            backward(x * 2.0)

    def test_diamond_reuse_sums_both_paths(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * x
        backward(y * y + y)  # x^4 + x^2
        assert x.grad == pytest.approx(4 * 27 + 6)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad and y.is_leaf

    def test_retain_grad_on_intermediate(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        h = (x * 3.0).retain_grad()
        backward((h * h).sum())
        np.testing.assert_allclose(h.grad, 2 * h.data)

    def test_non_finite_forward_raises(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
            T.log(x)

    def test_float32_stays_float32(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        y = (x * 2.5 + 1.0).sum()
        assert y.dtype == np.float32
        backward(y)
        assert x.grad.dtype == np.float32


class TestOpGradients:
    @pytest.mark.parametrize("trial", range(20))
    def test_elementwise_and_broadcast(self, trial):
        rng = np.random.default_rng(trial)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
        _check(lambda: ((a * b - a / b + b) ** 2).sum() + T.exp(a * 0.1).mean(), [a, b])

    @pytest.mark.parametrize("trial", range(20))
    def test_matmul_log_relu(self, trial):
        rng = np.random.default_rng(100 + trial)
        a = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        # keep relu inputs away from the kink
        a.data[np.abs(a.data) < 1e-3] += 0.01
        _check(lambda: T.log(T.square(T.relu(a) @ w) + 1.0).sum(), [a, w])

    def test_getitem_repeated_indices(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        backward(T.getitem(x, np.array([0, 0, 3])).sum())
        np.testing.assert_array_equal(x.grad, [2, 0, 0, 1])

    def test_stack_and_reshape(self, rng):
        xs = [Tensor(rng.normal(size=(2, 3)), requires_grad=True) for _ in range(3)]
        _check(lambda: (T.reshape(T.stack(xs, axis=1), (2, 9)) ** 2).sum(), xs)

    def test_l2_norm_zero_vector_subgradient(self):
        x = Tensor(np.zeros((1, 3)), requires_grad=True)
        backward(T.l2_norm(x).sum())
        np.testing.assert_array_equal(x.grad, 0.0)

    @pytest.mark.parametrize("trial", range(20))
    def test_l2_norm(self, trial):
        x = Tensor(np.random.default_rng(trial).normal(size=(3, 5)), requires_grad=True)
        _check(lambda: T.l2_norm(x).sum(), [x])

    def test_astype_roundtrip_gradient_dtype(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        backward(T.astype(x, np.float64).sum())
        assert x.grad.dtype == np.float32

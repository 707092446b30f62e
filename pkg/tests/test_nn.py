import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clapaug.errors import DegenerateError, NonFiniteError, ShapeError, StateError
from clapaug.nn import (Adam, Dense, L2Normalize, LayerStack, ReLU, as_tensor, grad_check,
                        grad_check_params, relative_error)


def sum_sq(y):
    return 0.5 * float(np.sum(y * y)), y.copy()


def random_stack(rng, dims, normalize=True):
    layers = []
    for i in range(len(dims) - 1):
        d = Dense(dims[i], dims[i + 1], rng)
        d.bias[...] = rng.normal(scale=0.5, size=d.bias.shape)  # keeps rows away from zero
        layers.append(d)
        layers.append(ReLU())
    layers.pop()
    if normalize:
        layers.append(L2Normalize())
    return LayerStack(layers)


class TestForward:
    def test_dense_identity(self):
        d = Dense(2, 2)
        d.weight[...] = np.eye(2)
        np.testing.assert_array_equal(d.forward(np.array([[3.0, 4.0]])), [[3.0, 4.0]])

    def test_l2normalize_345(self):
        np.testing.assert_allclose(L2Normalize().forward(np.array([[3.0, 4.0]])), [[0.6, 0.8]], rtol=0, atol=1e-15)

    def test_relu(self):
        np.testing.assert_array_equal(ReLU().forward(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])

    def test_l2normalize_rejects_zero_row(self):
        with pytest.raises(DegenerateError):
            L2Normalize().forward(np.array([[0.0, 0.0], [1.0, 0.0]]))

    def test_dense_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Dense(3, 2, np.random.default_rng(0)).forward(np.ones((1, 2)))

    def test_as_tensor_rejects_nan_and_1d(self):
        with pytest.raises(NonFiniteError):
            as_tensor([[np.nan]])
        with pytest.raises(ShapeError):
            as_tensor([1.0, 2.0])

    def test_deterministic(self):
        stack = random_stack(np.random.default_rng(0), [5, 8, 3])
        x = np.random.default_rng(1).normal(size=(4, 5))
        assert stack.forward(x).tobytes() == stack.forward(x.copy()).tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
    def test_unit_rows(self, n, d, seed):
        x = np.random.default_rng(seed).normal(size=(n, d)) * 10 ** np.random.default_rng(seed).uniform(-3, 3)
        norms = np.linalg.norm(L2Normalize().forward(x), axis=1)
        assert np.all(np.abs(norms - 1) <= 1e-9)


class TestBackward:
    def test_scalar_chain_rule(self):
        d = Dense(1, 1)
        d.weight[...] = 2.0
        d.forward(np.array([[3.0]]))
        dx = d.backward(np.array([[1.0]]))
        assert d.grad_weight[0, 0] == 3.0 and dx[0, 0] == 2.0

    def test_relu_grad(self):
        r = ReLU()
        r.forward(np.array([[-1.0, 2.0, 0.0]]))
        np.testing.assert_array_equal(r.backward(np.array([[5.0, 5.0, 5.0]])), [[0.0, 5.0, 0.0]])

    def test_l2normalize_jacobian_fd(self):
        v = np.array([[3.0, 4.0]])
        layer = L2Normalize()
        h = 1e-6
        analytic = np.zeros((2, 2))
        numeric = np.zeros((2, 2))
        for j in range(2):
            e = np.zeros((1, 2))
            e[0, j] = 1.0
            layer.forward(v)
            analytic[j] = layer.backward(e)[0]  # row j of J^T
            for i in range(2):
                up, down = v.copy(), v.copy()
                up[0, i] += h
                down[0, i] -= h
                numeric[j, i] = (L2Normalize().forward(up)[0, j] - L2Normalize().forward(down)[0, j]) / (2 * h)
        assert relative_error(analytic, numeric) < 1e-6

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            LayerStack([Dense(2, 2, np.random.default_rng(0))]).backward(np.ones((1, 2)))


class TestGradCheck:
    def test_two_layer_stack(self):
        rng = np.random.default_rng(0)
        stack = random_stack(rng, [4, 6, 3])
        target = rng.normal(size=(5, 3))
        loss = lambda y: (0.5 * float(np.sum((y - target) ** 2)), y - target)
        assert grad_check(stack, rng.normal(size=(5, 4)), loss) < 1e-4

    def test_linear_quadratic_is_exact(self):
        rng = np.random.default_rng(1)
        stack = LayerStack([Dense(3, 2, rng)])
        assert grad_check(stack, rng.normal(size=(4, 3)), sum_sq) < 1e-8

    def test_no_parameters(self):
        assert grad_check(LayerStack([ReLU()]), np.ones((2, 2)), sum_sq) == 0.0

    def test_detects_wrong_gradient(self):
        rng = np.random.default_rng(2)
        stack = random_stack(rng, [3, 3], normalize=False)
        assert grad_check(stack, rng.normal(size=(2, 3)), lambda y: (0.5 * float(np.sum(y * y)), 2 * y)) > 0.1

    def test_random_configurations(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            depth = int(rng.integers(1, 4))
            dims = [int(d) for d in rng.integers(1, 17, size=depth + 1)]
            stack = random_stack(rng, dims, normalize=dims[-1] > 1 and rng.random() < 0.5)
            target = rng.normal(size=(3, dims[-1]))
            x = rng.normal(size=(3, dims[0]))
            worst = max(worst, grad_check(stack, x, lambda y: (0.5 * float(np.sum((y - target) ** 2)), y - target)))
        assert worst < 1e-4

    def test_params_restored(self):
        p = {"w": np.array([[1.0, 2.0]])}
        before = p["w"].copy()
        grad_check_params(p, lambda: (float(np.sum(p["w"] ** 2)), {"w": 2 * p["w"]}))
        np.testing.assert_array_equal(p["w"], before)


class TestAdam:
    def test_first_step(self):
        w = np.zeros((1, 1))
        Adam(lr=0.1).step({"w": w}, {"w": np.ones((1, 1))})
        assert w[0, 0] == pytest.approx(-0.1, abs=1e-9)

    def test_zero_gradient_fixed_point(self):
        w = np.array([[0.3, -2.0]])
        opt = Adam(lr=0.1)
        for _ in range(3):
            opt.step({"w": w}, {"w": np.zeros((1, 2))})
        np.testing.assert_array_equal(w, [[0.3, -2.0]])

    def test_monotone_in_minus_sign(self):
        w = np.array([[1.0, 1.0]])
        g = np.array([[0.5, -0.5]])
        opt = Adam(lr=0.01)
        opt.step({"w": w}, {"w": g})
        w1 = w.copy()
        opt.step({"w": w}, {"w": g})
        assert w1[0, 0] < 1.0 and w[0, 0] < w1[0, 0]
        assert w1[0, 1] > 1.0 and w[0, 1] > w1[0, 1]

    def test_rejects_nonfinite_and_mismatch(self):
        opt = Adam()
        with pytest.raises(NonFiniteError):
            opt.step({"w": np.zeros((1, 1))}, {"w": np.array([[np.inf]])})
        with pytest.raises(ShapeError):
            opt.step({"w": np.zeros((1, 1))}, {"w": np.zeros((1, 2))})

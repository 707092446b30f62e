"""Minimal differentiable core: dense layers with analytic gradients and Adam.

Tensors are plain 2-D float64 numpy arrays (rows = batch). Layers cache what
they need on ``forward`` and write parameter gradients on ``backward``.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from clapaug import kernels
from clapaug.errors import DegenerateError, NonFiniteError, ShapeError, StateError

L2_EPS = 1e-12


def as_tensor(x, name: str = "input") -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: contains NaN or Inf")
    return arr


class Dense:
    """``y = x @ weight + bias`` with ``weight`` of shape (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if in_dim < 1 or out_dim < 1:
            raise ShapeError(f"Dense dims must be >= 1, got ({in_dim}, {out_dim})")
        self.in_dim = in_dim
        self.out_dim = out_dim
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        if rng is None:
            self.weight = np.zeros((in_dim, out_dim))
        else:
            self.weight = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        self.bias = np.zeros((1, out_dim))
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"Dense expects {self.in_dim} input columns, got {x.shape[1]}")
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("Dense.backward called before forward")
        if g.shape != (self._x.shape[0], self.out_dim):
            raise ShapeError(f"Dense upstream gradient has shape {g.shape}")
        self.grad_weight[...] = self._x.T @ g
        self.grad_bias[...] = g.sum(axis=0, keepdims=True)
        return g @ self.weight.T

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g: np.ndarray) -> np.ndarray:
        # gradient at exactly 0 is 0
        if self._mask is None:
            raise StateError("ReLU.backward called before forward")
        if g.shape != self._mask.shape:
            raise ShapeError(f"ReLU upstream gradient has shape {g.shape}")
        return np.where(self._mask, g, 0.0)

    def parameters(self):
        return []


class L2Normalize:
    """Row-wise unit normalization. Rows with norm below ``epsilon`` are an error."""

    def __init__(self, epsilon: float = L2_EPS):
        self.epsilon = epsilon
        self._y = None
        self._norm = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        small = np.flatnonzero(norm[:, 0] < self.epsilon)
        if small.size:
            raise DegenerateError(f"L2Normalize: row {int(small[0])} has norm below {self.epsilon:g}")
        self._norm = norm
        self._y = x / norm
        return self._y

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._y is None:
            raise StateError("L2Normalize.backward called before forward")
        if g.shape != self._y.shape:
            raise ShapeError(f"L2Normalize upstream gradient has shape {g.shape}")
        y = self._y
        return (g - y * np.sum(y * g, axis=1, keepdims=True)) / self._norm

    def parameters(self):
        return []


class LayerStack:
    """An ordered chain of layers."""

    def __init__(self, layers: list):
        self.layers = list(layers)
        dims = [(i, l) for i, l in enumerate(self.layers) if isinstance(l, Dense)]
        for (_, a), (_, b) in zip(dims, dims[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"Dense layers do not chain: {a.out_dim} -> {b.in_dim}")
        self._forwarded = False

    @property
    def in_dim(self) -> int | None:
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_dim
        return None

    def forward(self, x) -> np.ndarray:
        x = as_tensor(x)
        in_dim = self.in_dim
        if in_dim is not None and x.shape[1] != in_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, stack expects {in_dim}")
        for layer in self.layers:
            x = layer.forward(x)
        self._forwarded = True
        return x

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if not self._forwarded:
            raise StateError("backward called without a preceding forward")
        g = np.asarray(upstream, dtype=np.float64)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        """Yield ``(name, param, grad)`` in a fixed order."""
        for i, layer in enumerate(self.layers):
            for pname, p, g in layer.parameters():
                yield f"{prefix}{i}.{pname}", p, g

    __call__ = forward


class Adam:
    """Adam with bias correction. Parameters are updated in place."""

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"gradient for {name!r} is not finite")
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            kernels.adam_update(p, np.ascontiguousarray(grads[name]), self.m[name], self.v[name],
                                self.lr, self.beta1, self.beta2, self.eps, bias1, bias2)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a|| + ||n||, 1e-8)`` over a whole tensor."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return diff / max(scale, 1e-8)


def grad_check_params(params: dict[str, np.ndarray],
                      loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
                      h: float = 1e-5) -> float:
    """Worst per-tensor relative error between analytic and central-difference gradients.

    ``params`` are perturbed in place and restored; ``loss_and_grads`` must
    recompute the loss from their current values.
    """
    _, analytic = loss_and_grads()
    analytic = {k: v.copy() for k, v in analytic.items()}
    worst = 0.0
    for name, p in params.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_and_grads()[0]
            flat[i] = orig - h
            down = loss_and_grads()[0]
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst


def grad_check(stack: LayerStack, x, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               h: float = 1e-5) -> float:
    """Check every parameter of ``stack`` under ``loss_fn(output) -> (loss, d_output)``."""
    x = as_tensor(x)
    params = {name: p for name, p, _ in stack.parameters()}
    if not params:
        return 0.0
    grad_slots = {name: g for name, _, g in stack.parameters()}

    def run():
        loss, g_out = loss_fn(stack.forward(x))
        stack.backward(g_out)
        return loss, grad_slots

    return grad_check_params(params, run, h=h)

"""Dense 2-D tensor ops with explicit backward rules, plus a finite-difference
gradient checker.

Tensors are plain numpy arrays (row-major, float64 for all tests; float32 is
allowed for training speed). There is no tape: every layer pairs its forward
with a hand-written backward, and ``grad_check`` validates the pair with
central differences.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Tensor2 = np.ndarray


class ShapeError(ValueError):
    pass


def _require_match(name: str, a: np.ndarray, b: np.ndarray, dims: str) -> None:
    raise ShapeError(f"{name}: incompatible shapes {a.shape} vs {b.shape} ({dims})")


class Parameter:
    """A named tensor with a gradient accumulator of the same shape.

    Backward passes add into ``grad``; they never overwrite it.
    """

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                 fan_in: int, dtype=np.float64) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        _require_match("matmul", a, b, "inner dims must agree")
    return a @ b


def matmul_backward(dc: Tensor2, a: Tensor2, b: Tensor2) -> tuple[Tensor2, Tensor2]:
    return dc @ b.T, a.T @ dc


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        _require_match("add", a, b, "shapes must be equal")
    return a + b


def add_backward(dc: Tensor2) -> tuple[Tensor2, Tensor2]:
    return dc, dc


def hadamard(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        _require_match("hadamard", a, b, "shapes must be equal")
    return a * b


def hadamard_backward(dc: Tensor2, a: Tensor2, b: Tensor2) -> tuple[Tensor2, Tensor2]:
    return dc * b, dc * a


def affine(x: Tensor2, w: Tensor2, b: np.ndarray) -> Tensor2:
    """x @ w + b with b broadcast over rows."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        _require_match("affine", x, w, "x cols must equal w rows")
    if b.shape != (w.shape[1],):
        _require_match("affine", w, b, "bias must match w cols")
    return x @ w + b


def affine_backward(dout: Tensor2, x: Tensor2, w: Tensor2
                    ) -> tuple[Tensor2, Tensor2, np.ndarray]:
    """Returns (dx, dw, db)."""
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function.

    Inputs are clipped to |z| <= 60 before exponentiation; the result is exact
    to float precision there and saturated (error < 1e-26) beyond.
    """
    zc = np.clip(z, -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-zc))


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def tanh(z: np.ndarray) -> np.ndarray:
    return np.tanh(z)


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def softmax(logits: Tensor2) -> Tensor2:
    """Row-wise softmax with max subtraction; rows sum to 1 within 1e-12 at 64-bit."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects 2-D logits, got shape {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dy: Tensor2, y: Tensor2) -> Tensor2:
    inner = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - inner)


def grad_check(f: Callable[[], float], params: Sequence[Parameter],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must run forward + backward at the current parameter values, return the
    scalar loss, and accumulate gradients into ``params`` (grads are zeroed here
    before the analytic call). Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    for p in params:
        p.zero_grad()
    base = float(f())
    if not np.isfinite(base):
        raise ValueError("non-finite loss in grad_check")
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError("non-finite loss during finite differences")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst

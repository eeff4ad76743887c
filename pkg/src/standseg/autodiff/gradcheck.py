"""Central finite differences, used to validate analytic backward passes."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``x``, perturbed in place.

    Step per element is ``rel_step * max(1, |x_i|)``.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = rel_step * max(1.0, abs(float(orig)))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return 0.0 if den == 0.0 else num / den


def check_gradients(
    build: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    projection: np.ndarray | None = None,
    rel_step: float = 1e-5,
) -> list[float]:
    """Compare analytic and numerical gradients for every tensor in ``inputs``.

    ``build`` recomputes the forward graph from the current input values. A
    non-scalar output is reduced with a fixed random ``projection`` so every
    output element contributes. Returns one relative error per input.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks run in float64")

    out = build()
    if projection is None and out.data.size != 1:
        projection = np.random.default_rng(0).standard_normal(out.shape)

    def value() -> float:
        o = build().data
        return float(o.sum() if projection is None else np.sum(o * projection))

    for t in inputs:
        t.grad = None
    seed = np.ones_like(out.data) if projection is None else projection
    out.backward(seed)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    errors = []
    for t, a in zip(inputs, analytic):
        n = numerical_gradient(value, t.data, rel_step)
        errors.append(relative_error(a, n))
    return errors

"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ecovnet.errors import NumericalError


class GradCheckFailure(NumericalError):
    """Raised when the checked function produces a non-finite value."""


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numeric_grad(fn: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``fn()`` with respect to every entry of ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckFailure(f"non-finite loss while perturbing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(fn: Callable[..., tuple[float, Sequence[np.ndarray]]],
               inputs: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return ``(loss, grads)`` where ``grads`` lines up
    with ``inputs``. Inputs must be float64; they are perturbed in place
    and restored.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("grad_check runs in float64 only")
    loss, analytic = fn(*inputs)
    if not np.isfinite(loss):
        raise GradCheckFailure("non-finite loss at the unperturbed point")
    worst = 0.0
    for x, g in zip(inputs, analytic):
        if not np.all(np.isfinite(g)):
            raise GradCheckFailure("non-finite analytic gradient")
        num = numeric_grad(lambda: fn(*inputs)[0], x, eps)
        if num.size:
            worst = max(worst, float(relative_error(g, num).max()))
    return worst

"""Central finite-difference checks for the autograd engine."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import Tensor, backward


def numerical_gradient(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                       indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of ``fn`` at ``x``; only ``indices`` (flat) if given."""
    flat = x.data.reshape(-1)
    num = np.zeros(flat.size, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = _scalar(fn(x))
        flat[i] = orig - h
        f_minus = _scalar(fn(x))
        flat[i] = orig
        num[i] = (f_plus - f_minus) / (2.0 * h)
    return num.reshape(x.shape)


def _scalar(out) -> float:
    value = out.data if isinstance(out, Tensor) else np.asarray(out)
    if value.size != 1:
        raise ValueError(f"function must return a scalar, got shape {value.shape}")
    value = float(value.reshape(-1)[0])
    if not np.isfinite(value):
        raise ValueError("function returned a non-finite value")
    return value


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Per-element ``|a - f| / max(1, |f|)``."""
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                            indices: Optional[Sequence[int]] = None) -> float:
    """Max relative error between the autograd gradient of ``fn`` and central differences.

    ``x`` must be a leaf tensor; it is perturbed in place and restored.  Use
    double precision for meaningful results.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x.requires_grad = True
    x.grad = None
    out = fn(x)
    _scalar(out)
    backward(out, [x])
    analytic = x.grad.copy()
    x.grad = None
    numeric = numerical_gradient(fn, x, h, indices)
    if indices is not None:
        idx = np.asarray(indices)
        return float(relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]).max())
    return float(relative_error(analytic, numeric).max())

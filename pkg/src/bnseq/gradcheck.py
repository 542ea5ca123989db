"""Central finite-difference gradients for checking the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place.

    ``fn`` must recompute its scalar output from scratch on every call.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Relative error between autodiff and finite differences over the
    concatenated gradient of all ``params``.

    Concatenating keeps parameters whose true gradient is exactly zero (a bias
    feeding a normalization layer) from turning finite-difference noise into
    a spurious relative error of order one.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = [numerical_grad(fn, p, step) for p in params]
    return relative_error(np.concatenate([a.ravel() for a in analytic]),
                          np.concatenate([n.ravel() for n in numeric]))

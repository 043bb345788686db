"""Central-finite-difference gradient oracle shared across test modules.

Independent of the tape: perturbs raw parameter arrays and re-runs the
forward function, never touching the analytic backward path it checks.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from geoscore.numerics import GradTape, Tensor, backward

H = 1e-5
REL_TOL = 1e-4


def finite_difference(loss_fn: Callable[[], float], arr: np.ndarray, coords, h: float = H) -> np.ndarray:
    """d loss / d arr[c] for each flat coordinate in ``coords`` via central differences."""
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        f_plus = loss_fn()
        flat[c] = orig - h
        f_minus = loss_fn()
        flat[c] = orig
        out[k] = (f_plus - f_minus) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def max_gradient_error(
    forward: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    rng: np.random.Generator,
    max_coords_per_param: int = 24,
    h: float = H,
) -> float:
    """Max relative error between tape gradients and finite differences.

    ``forward`` must rebuild the loss from the current parameter values on
    every call. Coordinates are subsampled per parameter for large tensors.
    """
    with GradTape() as tape:
        loss = forward()
    grads = backward(loss, tape)

    def loss_value() -> float:
        return forward().item()

    worst = 0.0
    for name, p in params.items():
        analytic_full = grads.get(p)
        if analytic_full is None:
            analytic_full = np.zeros_like(p.data)
        n = p.data.size
        if n <= max_coords_per_param:
            coords = list(range(n))
        else:
            coords = sorted(rng.choice(n, size=max_coords_per_param, replace=False).tolist())
        numeric = finite_difference(loss_value, p.data, coords, h=h)
        analytic = analytic_full.reshape(-1)[coords]
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
    return worst

"""Central-difference gradient verification.

The check is independent of the backward rules it validates: it re-runs
the forward pass with perturbed parameter entries and compares the
two-sided difference quotient against the analytic gradient.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from conmask.errors import ShapeError
from conmask.numkit.tensor import Tensor


def grad_check(build_loss: Callable[[], Tensor], params: list[Tensor],
               h: float = 1e-4, max_coords_per_param: int | None = None,
               coord_seed: int = 0) -> float:
    """Max relative error between analytic and numeric gradients.

    ``build_loss`` must rebuild the scalar loss from the current
    ``params[i].data`` on every call (and be deterministic). Relative
    error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    loss = build_loss()
    if loss.data.ndim != 0:
        raise ShapeError(f"grad_check requires a scalar loss, got shape {loss.data.shape}")
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(coord_seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(build_loss().data)
            flat[i] = orig - h
            f_minus = float(build_loss().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(a_flat[i] - numeric) / max(1e-8, abs(a_flat[i]) + abs(numeric))
            if rel > worst:
                worst = rel
    return worst

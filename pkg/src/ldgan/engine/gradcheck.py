"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

import numpy as np

from ldgan.engine.tensor import backward, no_grad

_FLOOR = 1e-8  # absolute denominator floor
_REL_FLOOR = 1e-4  # floor as a fraction of the largest analytic gradient


def finite_diff_check(f, params, eps: float = 1e-5, max_coords_per_param=None,
                      rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable that rebuilds the scalar loss from the
    current values of ``params`` (a list of Tensors) and must be
    deterministic.  Use double-precision parameters; float32 makes the
    comparison meaningless at eps this small.

    When ``max_coords_per_param`` is set, only that many coordinates are
    probed per parameter (chosen by ``rng``), which keeps large nets cheap;
    the analytic gradient is still the full backward pass.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    # Coordinates whose gradient is orders of magnitude below the largest one
    # (dead relu paths, shift-invariant directions) carry central differences
    # that are pure float rounding of the loss, so the denominator is floored
    # at a fraction of the instance's gradient scale.
    gscale = max((float(np.max(np.abs(a))) for a in analytic if a.size), default=0.0)
    floor = max(_FLOOR, _REL_FLOOR * gscale)

    worst = 0.0
    for p, a in zip(params, analytic):
        n = p.data.size
        coords = np.arange(n)
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        a_flat = a.reshape(-1)
        for i in coords:
            mi = np.unravel_index(i, p.data.shape)
            orig = p.data[mi]
            p.data[mi] = orig + eps
            with no_grad():
                f_plus = f().item()
            p.data[mi] = orig - eps
            with no_grad():
                f_minus = f().item()
            p.data[mi] = orig
            cd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(cd), floor)
            worst = max(worst, abs(a_flat[i] - cd) / denom)
    return worst

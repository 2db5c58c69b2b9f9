"""Shared test helpers."""

import numpy as np

from ldgan.engine import finite_diff_check, kink_trace

_FD_EPS = 1e-6
KINK_MARGIN = 20 * _FD_EPS  # relu preactivations must clear the fd step


def checked_gradient(build, base_seed, tries=20, max_coords=2):
    """Finite-difference error for a kink-free instance.

    ``build(seed)`` returns (objective, params).  Central differences are
    meaningless when a relu preactivation sits within the perturbation of
    zero, so instances are redrawn (deterministically, scanning seeds) until
    every kink site clears ``KINK_MARGIN``.
    """
    for attempt in range(tries):
        seed = base_seed * 1000 + attempt
        objective, params = build(seed)
        with kink_trace() as margins:
            objective()
        if margins and min(margins) <= KINK_MARGIN:
            continue
        return finite_diff_check(
            objective, params, eps=_FD_EPS, max_coords_per_param=max_coords,
            rng=np.random.default_rng(seed),
        )
    raise AssertionError(f"no kink-free instance in {tries} draws from seed {base_seed}")

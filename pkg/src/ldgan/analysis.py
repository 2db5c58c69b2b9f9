"""Quality metrics and linear-mixture analysis.

PSNR and windowed SSIM score recovered cubes; vertex-component selection
with nonnegative unmixing inspects which planted materials a dataset (real
or generated) contains; a small PCA report summarizes sample spread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import linear_sum_assignment

from ldgan.errors import ConfigError, DegeneracyError, DomainError, ShapeError

PSNR_CSV_CAP = 99.0  # identical cubes report inf; CSVs store this cap


# ---------------------------------------------------------------------------
# image metrics

def psnr(x, xhat, peak: float = 1.0) -> float:
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"psnr shapes differ: {x.shape} vs {xhat.shape}")
    if peak <= 0:
        raise ConfigError(f"peak must be positive, got {peak}")
    mse = float(np.mean((x - xhat) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_csv_value(value: float) -> float:
    return min(value, PSNR_CSV_CAP)


def _window_kernel(window: int, sigma):
    if sigma is None:
        return np.full((window, window), 1.0 / (window * window))
    half = (window - 1) / 2.0
    g = np.exp(-((np.arange(window) - half) ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _band_ssim_mean(a, b, kernel, c1, c2) -> float:
    wa = sliding_window_view(a, kernel.shape)
    wb = sliding_window_view(b, kernel.shape)
    mu_a = np.einsum("ijkl,kl->ij", wa, kernel)
    mu_b = np.einsum("ijkl,kl->ij", wb, kernel)
    e_aa = np.einsum("ijkl,kl->ij", wa * wa, kernel)
    e_bb = np.einsum("ijkl,kl->ij", wb * wb, kernel)
    e_ab = np.einsum("ijkl,kl->ij", wa * wb, kernel)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x, xhat, peak: float = 1.0, window: int = 7, sigma=1.5) -> float:
    """Mean over bands of the windowed structural-similarity map.

    Default window is a 7x7 Gaussian (sigma 1.5); ``sigma=None`` switches to
    a uniform window, and ``window`` >= the image collapses to single-window
    full-image statistics.
    """
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"ssim shapes differ: {x.shape} vs {xhat.shape}")
    if x.ndim == 2:
        x, xhat = x[..., None], xhat[..., None]
    m, n, bands = x.shape
    window = min(window, m, n)
    kernel = _window_kernel(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    return float(np.mean(
        [_band_ssim_mean(x[..., i], xhat[..., i], kernel, c1, c2) for i in range(bands)]
    ))


def spectral_angle(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("spectral angle undefined for a zero vector")
    return float(np.arccos(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))


# ---------------------------------------------------------------------------
# endmember extraction and unmixing

@dataclass
class EndmemberSet:
    spectra: np.ndarray  # (q, L), rows are selected pixels
    indices: list
    abundances: np.ndarray = None  # (n_pixels, q) once estimated
    residuals: np.ndarray = None


@dataclass
class PcaReport:
    components: np.ndarray  # (k, D) orthonormal rows
    variances: np.ndarray  # nonincreasing
    projections: np.ndarray  # (n, k) centered coordinates
    truncated: bool = False  # fewer components than requested (rank limit)


def _pixel_matrix(pixels) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim != 2:
        p = p.reshape(-1, p.shape[-1])
    return p


def vca_endmembers(pixels, q: int, seed: int = 0) -> EndmemberSet:
    """Pick q pixels spanning the data simplex.

    Projects onto the top-q singular subspace, then repeats q times: draw a
    random direction orthogonal to the already-selected endmembers and take
    the pixel with the largest absolute projection (first index on ties).
    """
    p = _pixel_matrix(pixels)
    n, l = p.shape
    if not 1 <= q <= l:
        raise ConfigError(f"q={q} must be in [1, {l}]")
    if n < q:
        raise DegeneracyError(f"{n} pixels cannot span {q} endmembers")
    _, s, vt = np.linalg.svd(p, full_matrices=False)
    if s[q - 1] <= max(n, l) * np.finfo(np.float64).eps * s[0]:
        raise DegeneracyError(f"data rank below q={q} (singular values {s[:q]})")
    coords = p @ vt[:q].T  # (n, q)
    rng = np.random.default_rng([int(seed), 0x7CA])
    chosen = []
    for _ in range(q):
        while True:
            f = rng.standard_normal(q)
            if chosen:
                basis, _ = np.linalg.qr(coords[chosen].T)
                f = f - basis @ (basis.T @ f)
            norm = np.linalg.norm(f)
            if norm > 1e-12:
                break
        scores = np.abs(coords @ (f / norm))
        chosen.append(int(np.argmax(scores)))
    return EndmemberSet(p[chosen].copy(), chosen)


def abundances(pixels, endmembers: np.ndarray, iters: int = 500,
               tol: float = 1e-10):
    """Per-pixel nonnegative least-squares coefficients, projected gradient.

    Warm-started from the clipped unconstrained solution; returns
    (coefficients (n, q), residual norms (n,)).
    """
    p = _pixel_matrix(pixels)
    e = np.asarray(endmembers, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != p.shape[1]:
        raise ShapeError(f"endmembers {e.shape} do not match pixels {p.shape}")
    q = e.shape[0]
    if np.linalg.matrix_rank(e) < q:
        raise DegeneracyError("endmember matrix is rank deficient")
    gram = e @ e.T
    cross = p @ e.T
    coeffs = np.clip(np.linalg.solve(gram, cross.T).T, 0.0, None)
    step = 1.0 / float(np.linalg.eigvalsh(gram)[-1])
    for _ in range(iters):
        update = np.clip(coeffs - step * (coeffs @ gram - cross), 0.0, None)
        if np.abs(update - coeffs).max() < tol:
            coeffs = update
            break
        coeffs = update
    residuals = np.linalg.norm(coeffs @ e - p, axis=1)
    return coeffs, residuals


def unmix(pixels, q: int, seed: int = 0) -> EndmemberSet:
    """Endmember selection followed by abundance estimation."""
    out = vca_endmembers(pixels, q, seed)
    out.abundances, out.residuals = abundances(pixels, out.spectra)
    return out


def match_endmembers(estimated: np.ndarray, reference: np.ndarray):
    """Pair estimated spectra to reference rows minimizing total angle.

    Returns (perm, angles): ``estimated[perm[j]]`` answers ``reference[j]``.
    """
    est, ref = np.asarray(estimated), np.asarray(reference)
    cost = np.array([[spectral_angle(e, r) for e in est] for r in ref])
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(ref), dtype=int)
    perm[rows] = cols
    return perm, cost[rows, cols]


# ---------------------------------------------------------------------------
# PCA summary

def pca_report(samples, k: int) -> PcaReport:
    x = np.asarray([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    n, d = x.shape
    if n < 2:
        raise ConfigError("pca needs at least 2 samples")
    if not 1 <= k <= d:
        raise ConfigError(f"k={k} must be in [1, {d}]")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)))
    k_eff = min(k, max(rank, 1))
    comps = vt[:k_eff]
    variances = (s[:k_eff] ** 2) / (n - 1)
    return PcaReport(comps, variances, centered @ comps.T, truncated=k_eff < k)

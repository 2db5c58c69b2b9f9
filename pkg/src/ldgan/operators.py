"""Linear degradation operators with adjoints and a dense-matrix oracle.

Three measurement models share one interface: coded-aperture snapshot
imaging (shear each band by its index, code, sum), spatio-spectral
box-average decimation, and projection through a 3-row spectral response.
All are linear; adjoints are exact transposes, verified against
:func:`as_dense` in the tests.

Cube-level functions take (M, N, L) arrays.  The ``batch_``* methods on
:class:`ForwardOperator` take channel-first (B, L, M, N) activations so
recovery networks can splice H and H^T into the autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ldgan.dataio import check_cube
from ldgan.errors import ConfigError, ShapeError

OPERATOR_KINDS = ("cassi", "sisr", "rgb")


@dataclass(frozen=True)
class CodedAperture:
    mask: np.ndarray  # (M, N), entries 0.0 or 1.0
    transmittance: float  # realized fraction of open cells


@dataclass(frozen=True)
class Measurement:
    kind: str
    value: np.ndarray
    snr_db: float = math.inf


def coded_aperture(m: int, n: int, transmittance: float = 0.5, seed: int = 0) -> CodedAperture:
    """Random binary mask with exactly round(t * M * N) open cells.

    Placing an exact count (rather than Bernoulli draws) keeps the realized
    transmittance inside tolerance at any mask size.
    """
    if not 0.0 < transmittance < 1.0:
        raise ConfigError(f"transmittance must be in (0, 1), got {transmittance}")
    rng = np.random.default_rng([int(seed), 0xCA])
    ones = int(round(transmittance * m * n))
    flat = np.zeros(m * n)
    flat[rng.permutation(m * n)[:ones]] = 1.0
    return CodedAperture(flat.reshape(m, n), ones / (m * n))


def spectral_response(l: int) -> np.ndarray:
    """(3, L) row-normalized Gaussian sensitivities.

    Centers at 20% / 50% / 80% of the band axis, FWHM 30% of the axis:
    smooth, overlapping, full-rank rows.
    """
    grid = np.arange(l, dtype=np.float64)
    span = max(l - 1, 1)
    sigma = 0.30 * span / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    centers = np.array([0.2, 0.5, 0.8]) * span
    rows = np.exp(-((grid[None, :] - centers[:, None]) ** 2) / (2.0 * sigma**2))
    return rows / rows.sum(axis=1, keepdims=True)


def _spatial_factor(k_s: int) -> int:
    s = math.isqrt(int(k_s))
    if s * s != k_s:
        raise ConfigError(
            f"k_s={k_s} has no integer per-axis factor; use a perfect square (s^2)"
        )
    return s


def _measurement_value(y):
    return y.value if isinstance(y, Measurement) else np.asarray(y)


# ---------------------------------------------------------------------------
# batched channel-first kernels (shared by cube-level API and recovery nets)

def _cassi_fwd(x, mask):
    b, l, m, n = x.shape
    coded = x * mask.astype(x.dtype, copy=False)
    y = np.zeros((b, 1, m, n + l - 1), dtype=x.dtype)
    for band in range(l):
        y[:, 0, :, band : band + n] += coded[:, band]
    return y


def _cassi_adj(y, mask, l):
    b, _, m, w = y.shape
    n = w - l + 1
    x = np.empty((b, l, m, n), dtype=y.dtype)
    for band in range(l):
        x[:, band] = y[:, 0, :, band : band + n]
    return x * mask.astype(y.dtype, copy=False)


def _dec_fwd(x, s, k_l):
    b, l, m, n = x.shape
    blocks = x.reshape(b, l // k_l, k_l, m // s, s, n // s, s)
    return blocks.mean(axis=(2, 4, 6))


def _dec_adj(y, s, k_l):
    b, lc, mc, nc = y.shape
    t = y[:, :, None, :, None, :, None] / (k_l * s * s)
    spread = np.broadcast_to(t, (b, lc, k_l, mc, s, nc, s))
    return np.ascontiguousarray(spread).reshape(b, lc * k_l, mc * s, nc * s)


def _rgb_fwd(x, resp):
    return np.einsum("blmn,cl->bcmn", x, resp.astype(x.dtype, copy=False))


def _rgb_adj(y, resp):
    return np.einsum("bcmn,cl->blmn", y, resp.astype(y.dtype, copy=False))


# ---------------------------------------------------------------------------
# cube-level API

def cassi_forward(x, ca: CodedAperture) -> Measurement:
    """Shear-and-sum: y[i, j] = sum_l ca[i, j-l] * x[i, j-l, l]."""
    x = check_cube(x)
    m, n, l = x.shape
    if ca.mask.shape != (m, n):
        raise ShapeError(f"aperture {ca.mask.shape} does not match cube {x.shape}")
    y = _cassi_fwd(x.transpose(2, 0, 1)[None], ca.mask)[0, 0]
    return Measurement("cassi", y)


def cassi_adjoint(y, ca: CodedAperture) -> np.ndarray:
    """Exact transpose of cassi_forward; band count inferred from the width."""
    yv = _measurement_value(y)
    m, n = ca.mask.shape
    if yv.ndim != 2 or yv.shape[0] != m or yv.shape[1] < n:
        raise ShapeError(f"measurement {yv.shape} does not match aperture {ca.mask.shape}")
    l = yv.shape[1] - n + 1
    x = _cassi_adj(yv[None, None], ca.mask, l)[0]
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def decimate(x, k_s: int = 4, k_l: int = 4) -> Measurement:
    """Box-average over s x s spatial blocks (s^2 = k_s) and k_l-band groups."""
    x = check_cube(x)
    m, n, l = x.shape
    s = _spatial_factor(k_s)
    if m % s or n % s or l % k_l:
        raise ConfigError(
            f"factors s={s}, k_l={k_l} must divide cube dims {m}x{n}x{l}"
        )
    out = _dec_fwd(x.transpose(2, 0, 1)[None], s, k_l)[0]
    return Measurement("sisr", np.ascontiguousarray(out.transpose(1, 2, 0)))


def decimate_adjoint(y, k_s: int = 4, k_l: int = 4) -> np.ndarray:
    yv = check_cube(_measurement_value(y), "measurement")
    s = _spatial_factor(k_s)
    x = _dec_adj(yv.transpose(2, 0, 1)[None], s, k_l)[0]
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def rgb_project(x, resp: np.ndarray) -> Measurement:
    """Per-pixel 3-vector: channel c = <response row c, spectrum>."""
    x = check_cube(x)
    if resp.shape != (3, x.shape[2]):
        raise ShapeError(f"response {resp.shape} does not match {x.shape[2]} bands")
    out = _rgb_fwd(x.transpose(2, 0, 1)[None], resp)[0]
    return Measurement("rgb", np.ascontiguousarray(out.transpose(1, 2, 0)))


def rgb_adjoint(y, resp: np.ndarray) -> np.ndarray:
    yv = check_cube(_measurement_value(y), "measurement")
    if yv.shape[2] != 3:
        raise ShapeError(f"rgb measurement needs 3 channels, got {yv.shape}")
    x = _rgb_adj(yv.transpose(2, 0, 1)[None], resp)[0]
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def add_noise(y: Measurement, snr_db: float, seed: int = 0) -> Measurement:
    """Additive white Gaussian noise at the requested signal-to-noise ratio."""
    if math.isinf(snr_db):
        return y
    power = float(np.mean(y.value.astype(np.float64) ** 2))
    sigma = math.sqrt(power / (10.0 ** (snr_db / 10.0)))
    rng = np.random.default_rng([int(seed), 0x015E])
    noisy = y.value + sigma * rng.standard_normal(y.value.shape)
    return Measurement(y.kind, noisy.astype(y.value.dtype), snr_db=float(snr_db))


# ---------------------------------------------------------------------------
# bound operator

class ForwardOperator:
    """One degradation bound to fixed dims and parameters.

    ``batch_forward`` / ``batch_adjoint`` work on (B, L, M, N) arrays and are
    what recovery networks splice into the tape; ``__call__`` simulates a
    cube-level measurement.
    """

    def __init__(self, kind, m, n, l, *, ca=None, resp=None, k_s=4, k_l=4):
        if kind not in OPERATOR_KINDS:
            raise ConfigError(f"unknown operator kind '{kind}'")
        self.kind, self.m, self.n, self.l = kind, m, n, l
        self.ca = ca
        self.resp = resp
        self.k_s, self.k_l = k_s, k_l
        if kind == "cassi":
            if ca is None or ca.mask.shape != (m, n):
                raise ConfigError("cassi operator needs a matching coded aperture")
            self.s = None
        elif kind == "sisr":
            self.s = _spatial_factor(k_s)
            if m % self.s or n % self.s or l % k_l:
                raise ConfigError(
                    f"factors s={self.s}, k_l={k_l} must divide {m}x{n}x{l}"
                )
        else:
            if resp is None or resp.shape != (3, l):
                raise ConfigError("rgb operator needs a (3, L) response")
            self.s = None

    @property
    def meas_shape(self):
        if self.kind == "cassi":
            return (self.m, self.n + self.l - 1)
        if self.kind == "sisr":
            return (self.m // self.s, self.n // self.s, self.l // self.k_l)
        return (self.m, self.n, 3)

    def __call__(self, cube) -> Measurement:
        if self.kind == "cassi":
            return cassi_forward(cube, self.ca)
        if self.kind == "sisr":
            return decimate(cube, self.k_s, self.k_l)
        return rgb_project(cube, self.resp)

    def adjoint(self, y) -> np.ndarray:
        if self.kind == "cassi":
            return cassi_adjoint(y, self.ca)
        if self.kind == "sisr":
            return decimate_adjoint(y, self.k_s, self.k_l)
        return rgb_adjoint(y, self.resp)

    def batch_forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "cassi":
            return _cassi_fwd(x, self.ca.mask)
        if self.kind == "sisr":
            return _dec_fwd(x, self.s, self.k_l)
        return _rgb_fwd(x, self.resp)

    def batch_adjoint(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "cassi":
            return _cassi_adj(y, self.ca.mask, self.l)
        if self.kind == "sisr":
            return _dec_adj(y, self.s, self.k_l)
        return _rgb_adj(y, self.resp)

    def batch_measure(self, x: np.ndarray) -> np.ndarray:
        """Simulate measurements for a whole channel-first batch."""
        return self.batch_forward(x)


def make_operator(kind, m, n, l, *, seed=0, transmittance=0.5, k_s=4, k_l=4,
                  resp=None) -> ForwardOperator:
    if kind == "cassi":
        return ForwardOperator(kind, m, n, l, ca=coded_aperture(m, n, transmittance, seed))
    if kind == "sisr":
        return ForwardOperator(kind, m, n, l, k_s=k_s, k_l=k_l)
    if kind == "rgb":
        return ForwardOperator(kind, m, n, l, resp=spectral_response(l) if resp is None else resp)
    raise ConfigError(f"unknown operator kind '{kind}'")


# ---------------------------------------------------------------------------
# dense oracle

_DENSE_GUARD = 4096


def vectorize_cube(cube) -> np.ndarray:
    """Band-major then row-major spatial: index = (l * M + i) * N + j."""
    return np.ascontiguousarray(np.asarray(cube).transpose(2, 0, 1)).ravel()


def vectorize_measurement(y) -> np.ndarray:
    """Flatten a measurement consistently with as_dense rows."""
    yv = _measurement_value(y)
    if yv.ndim == 2:
        return yv.ravel()
    return vectorize_cube(yv)


def as_dense(op: ForwardOperator) -> np.ndarray:
    """Materialize the operator column-by-column from basis vectors."""
    in_dim = op.m * op.n * op.l
    if in_dim > _DENSE_GUARD:
        raise ConfigError(f"input size {in_dim} exceeds dense-oracle guard {_DENSE_GUARD}")
    basis = np.zeros((1, op.l, op.m, op.n))
    flat = basis.reshape(-1)
    cols = np.empty((in_dim,), dtype=object)
    for k in range(in_dim):
        flat[k] = 1.0
        cols[k] = op.batch_forward(basis)[0].ravel().copy()
        flat[k] = 0.0
    return np.stack(list(cols), axis=1)

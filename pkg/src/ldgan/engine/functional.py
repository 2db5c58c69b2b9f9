"""Differentiable layer ops on (B, C, H, W) activations.

Convolutions go through an im2col gather so the inner loop is a BLAS
matmul; ``conv_transpose2d`` reuses the same gather/scatter pair, which
makes it the exact linear adjoint of ``conv2d`` for the same kernel,
stride and padding.
"""

from __future__ import annotations

import numpy as np

from ldgan.errors import ConfigError, ShapeError
from ldgan.engine.tensor import Tensor

_BCE_EPS = 1e-7  # clamp for log arguments


# ---------------------------------------------------------------------------
# im2col / col2im

def _im2col(x, kh, kw, stride, pad):
    """Gather sliding windows: (B, C, H, W) -> (B, C, kh, kw, Ho, Wo)."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel ({kh}x{kw}, pad {pad}) larger than input {x.shape}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(cols, h, w, stride, pad):
    """Scatter-add windows back: exact transpose of :func:`_im2col`."""
    b, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def _check_conv_args(stride, padding):
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")


# ---------------------------------------------------------------------------
# convolutions

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Ci, H, W) with kernel (Co, Ci, kh, kw)."""
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input/kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    b, ci, h, w = x.shape
    co, _, kh, kw = kernel.shape
    cols = _im2col(x.data, kh, kw, stride, padding)
    ho, wo = cols.shape[-2:]
    # fold batch into the GEMM width: one large matmul beats B small ones
    cols_f = np.ascontiguousarray(cols.transpose(1, 2, 3, 0, 4, 5)).reshape(
        ci * kh * kw, b * ho * wo
    )
    w_m = kernel.data.reshape(co, ci * kh * kw)
    out = np.ascontiguousarray(
        (w_m @ cols_f).reshape(co, b, ho, wo).transpose(1, 0, 2, 3)
    )

    def bwd(g):
        g_f = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, b * ho * wo)
        if kernel.requires_grad:
            kernel._accumulate((g_f @ cols_f.T).reshape(kernel.shape))
        if x.requires_grad:
            dcols = np.ascontiguousarray(
                (w_m.T @ g_f).reshape(ci, kh, kw, b, ho, wo).transpose(3, 0, 1, 2, 4, 5)
            )
            x._accumulate(_col2im(dcols, h, w, stride, padding))

    return Tensor._result(out, (x, kernel), bwd, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`: (B, Co, Ho, Wo) with kernel (Co, Ci, kh, kw)
    maps to (B, Ci, H, W) where H = (Ho - 1) * stride - 2 * padding + kh."""
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d needs 4-D input/kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    b, co, ho, wo = x.shape
    _, ci, kh, kw = kernel.shape
    h = (ho - 1) * stride - 2 * padding + kh
    w = (wo - 1) * stride - 2 * padding + kw
    if h < 1 or w < 1:
        raise ShapeError(f"conv_transpose2d output collapsed for input {x.shape}")
    x_f = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(co, b * ho * wo)
    w_m = kernel.data.reshape(co, ci * kh * kw)
    cols = np.ascontiguousarray(
        (w_m.T @ x_f).reshape(ci, kh, kw, b, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    )
    out = _col2im(cols, h, w, stride, padding)

    def bwd(g):
        gcols_f = np.ascontiguousarray(
            _im2col(g, kh, kw, stride, padding).transpose(1, 2, 3, 0, 4, 5)
        ).reshape(ci * kh * kw, b * ho * wo)
        if kernel.requires_grad:
            kernel._accumulate((x_f @ gcols_f.T).reshape(kernel.shape))
        if x.requires_grad:
            dx = (w_m @ gcols_f).reshape(co, b, ho, wo).transpose(1, 0, 2, 3)
            x._accumulate(np.ascontiguousarray(dx))

    return Tensor._result(out, (x, kernel), bwd, "conv_transpose2d")


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormState:
    """Running statistics for one batch-norm layer (not differentiated)."""

    def __init__(self, channels: int, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self):
        s = BatchNormState(len(self.running_mean), self.running_mean.dtype)
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, height, width).

    Train mode normalizes with population batch statistics and updates the
    running stats in ``state``; eval mode is an affine transform using the
    stored stats.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d needs (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if gamma.size != c or beta.size != c:
        raise ShapeError(f"gamma/beta length {gamma.size}/{beta.size} != channels {c}")
    gam = gamma.data.reshape(1, c, 1, 1)
    bet = beta.data.reshape(1, c, 1, 1)

    if training:
        if b < 2:
            raise ConfigError("batch_norm2d train mode requires batch size >= 2")
        n = b * h * w
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x.data - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv_std
        out = gam * xhat + bet
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mean.reshape(c).astype(state.running_mean.dtype)
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * var.reshape(c).astype(state.running_var.dtype)

        def bwd(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)).reshape(beta.shape))
            if x.requires_grad:
                dxhat = g * gam
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                x._accumulate(inv_std / n * (n * dxhat - s1 - xhat * s2))

        return Tensor._result(out, (x, gamma, beta), bwd, "batch_norm2d")

    mean = state.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
    inv_std = (1.0 / np.sqrt(state.running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
    out = gam * (x.data - mean) * inv_std + bet

    def bwd_eval(g):
        if gamma.requires_grad:
            gamma._accumulate(
                (g * (x.data - mean) * inv_std).sum(axis=(0, 2, 3)).reshape(gamma.shape)
            )
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)).reshape(beta.shape))
        if x.requires_grad:
            x._accumulate(g * gam * inv_std)

    return Tensor._result(out, (x, gamma, beta), bwd_eval, "batch_norm2d_eval")


# ---------------------------------------------------------------------------
# activations

_KINK_TRACE = None


class kink_trace:
    """Record min |preactivation| at relu/leaky-relu sites while active.

    Finite-difference gradient checks are only meaningful away from the
    activation kinks; this lets a test measure how close an instance gets.
    """

    def __enter__(self):
        global _KINK_TRACE
        self._prev = _KINK_TRACE
        _KINK_TRACE = []
        return _KINK_TRACE

    def __exit__(self, *exc):
        global _KINK_TRACE
        _KINK_TRACE = self._prev
        return False


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    """Elementwise nonlinearity: relu | leaky_relu | sigmoid | tanh."""
    if kind in ("relu", "leaky_relu") and _KINK_TRACE is not None and x.data.size:
        _KINK_TRACE.append(float(np.abs(x.data).min()))
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, 0.0).astype(x.dtype)

        def bwd(g):
            x._accumulate(g * mask)

    elif kind == "leaky_relu":
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"leaky_relu slope must be in (0, 1), got {alpha}")
        mask = x.data > 0
        out = np.where(mask, x.data, alpha * x.data).astype(x.dtype)

        def bwd(g):
            x._accumulate(g * np.where(mask, 1.0, alpha).astype(g.dtype))

    elif kind == "sigmoid":
        out = _sigmoid(x.data)

        def bwd(g):
            x._accumulate(g * out * (1.0 - out))

    elif kind == "tanh":
        out = np.tanh(x.data)

        def bwd(g):
            x._accumulate(g * (1.0 - out**2))

    else:
        raise ConfigError(f"unknown activation kind '{kind}'")
    return Tensor._result(out, (x,), bwd, kind)


def _sigmoid(z):
    # overflow-safe in both float32 and float64
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# losses

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff**2).mean())
    scale = 2.0 / diff.size

    def bwd(g):
        if pred.requires_grad:
            pred._accumulate(g * scale * diff)
        if target.requires_grad:
            target._accumulate(-g * scale * diff)

    return Tensor._result(out, (pred, target), bwd, "mse")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Binary cross-entropy with inputs clamped to [1e-7, 1 - 1e-7]."""
    if pred.shape != target.shape:
        raise ShapeError(f"bce shapes differ: {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, _BCE_EPS, 1.0 - _BCE_EPS)
    t = target.data
    out = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())
    inside = (pred.data > _BCE_EPS) & (pred.data < 1.0 - _BCE_EPS)

    def bwd(g):
        if pred.requires_grad:
            dp = (p - t) / (p * (1.0 - p)) / p.size
            pred._accumulate(g * dp * inside)
        if target.requires_grad:
            target._accumulate(g * (np.log1p(-p) - np.log(p)) / p.size)

    return Tensor._result(out, (pred, target), bwd, "bce")


def loss(pred: Tensor, target: Tensor, kind: str) -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "bce":
        return bce_loss(pred, target)
    raise ConfigError(f"unknown loss kind '{kind}'")


# ---------------------------------------------------------------------------
# variance regularizer

def batch_variance_norm(x: Tensor) -> Tensor:
    """Euclidean norm of the per-coordinate population variance across axis 0.

    The variance is taken independently for every coordinate (all non-batch
    axes flattened), giving a vector sigma^2 whose 2-norm is returned.
    """
    b = x.shape[0]
    if b < 2:
        raise ConfigError(f"batch variance needs >= 2 samples, got {b}")
    mean = x.data.mean(axis=0, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=0)
    out = np.asarray(np.sqrt((var.astype(np.float64) ** 2).sum())).astype(x.dtype)

    def bwd(g):
        r = float(out)
        if r == 0.0:
            return  # subgradient 0 at the origin
        x._accumulate(g * (var / r) * (2.0 / b) * centered)

    return Tensor._result(out, (x,), bwd, "batch_variance_norm")

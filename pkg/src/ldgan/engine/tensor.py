"""Dense-tensor reverse-mode autodiff core.

A ``Tensor`` wraps a numpy array and records the operations applied to it
on a tape of parent references plus backward closures.  ``backward`` walks
the tape in reverse topological order and accumulates gradients into every
reachable tensor with ``requires_grad`` set.

Only the op set the networks in this package need is provided; everything
is CPU numpy.  Ops never mutate their inputs, so evaluating the same graph
twice with the same data is bit-identical.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ldgan.errors import LdganError, ShapeError

_grad_enabled = True
_nan_guard = False
_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    """Set the dtype used by parameter initializers (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def set_nan_guard(enabled: bool):
    """When enabled, every op output is checked for NaN/Inf."""
    global _nan_guard
    _nan_guard = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """numpy array plus tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph construction ----------------------------------------------

    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor(data)
        if _nan_guard and not np.all(np.isfinite(data)):
            raise LdganError(f"non-finite values produced by op '{op}'")
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data + other.data

            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))

            return Tensor._result(out_data, (self, other), bwd, "add")
        out_data = self.data + other

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.data.shape))

        return Tensor._result(out_data, (self,), bwd, "add")

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)

        return Tensor._result(-self.data, (self,), bwd, "neg")

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data - other.data

            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-g, other.data.shape))

            return Tensor._result(out_data, (self, other), bwd, "sub")
        out_data = self.data - other

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.data.shape))

        return Tensor._result(out_data, (self,), bwd, "sub")

    def __rsub__(self, other):
        out_data = other - self.data

        def bwd(g):
            self._accumulate(_unbroadcast(-g, self.data.shape))

        return Tensor._result(out_data, (self,), bwd, "rsub")

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data * other.data

            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))

            return Tensor._result(out_data, (self, other), bwd, "mul")
        out_data = self.data * other

        def bwd(g):
            self._accumulate(_unbroadcast(g * other, self.data.shape))

        return Tensor._result(out_data, (self,), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data / other.data

            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-g * self.data / other.data**2, other.data.shape)
                    )

            return Tensor._result(out_data, (self, other), bwd, "div")
        return self * (1.0 / other)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data**exponent

        def bwd(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._result(out_data, (self,), bwd, "pow")

    # -- elementwise maps -------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            self._accumulate(g * out_data)

        return Tensor._result(out_data, (self,), bwd, "exp")

    def log(self):
        out_data = np.log(self.data)

        def bwd(g):
            self._accumulate(g / self.data)

        return Tensor._result(out_data, (self,), bwd, "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bwd(g):
            self._accumulate(g * 0.5 / np.maximum(out_data, np.finfo(out_data.dtype).tiny))

        return Tensor._result(out_data, (self,), bwd, "sqrt")

    def clip(self, lo, hi):
        """Clamp values; gradient is passed only where no clamping occurred."""
        out_data = np.clip(self.data, lo, hi)
        mask = (self.data > lo) & (self.data < hi)

        def bwd(g):
            self._accumulate(g * mask)

        return Tensor._result(out_data, (self,), bwd, "clip")

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            self._accumulate(_expand_reduced(g, self.data.shape, axis, keepdims))

        return Tensor._result(out_data, (self,), bwd, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        scale = self.data.size / out_data.size

        def bwd(g):
            self._accumulate(_expand_reduced(g, self.data.shape, axis, keepdims) / scale)

        return Tensor._result(out_data, (self,), bwd, "mean")

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            self._accumulate(g.reshape(in_shape))

        return Tensor._result(out_data, (self,), bwd, "reshape")

    def transpose(self, axes):
        inverse = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def bwd(g):
            self._accumulate(g.transpose(inverse))

        return Tensor._result(out_data, (self,), bwd, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an axis (used for skip connections)."""
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(out_data, tuple(tensors), bwd, "concat")


def apply_linear(x: Tensor, forward_fn, adjoint_fn, op: str = "linear_map") -> Tensor:
    """Apply a fixed linear operator given as a (forward, adjoint) pair.

    ``forward_fn``/``adjoint_fn`` act on raw arrays; the adjoint is used as
    the backward map, which is exact for a linear operator.
    """
    out_data = forward_fn(x.data)

    def bwd(g):
        x._accumulate(adjoint_fn(g))

    return Tensor._result(out_data, (x,), bwd, op)


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss node.

    Gradients accumulate into ``.grad`` of every tensor on the tape that
    has ``requires_grad``; parameters not reachable from the loss keep
    ``grad=None`` (treated as zero by the optimizer).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node._backward is not None:
            node._backward(node.grad)


def _topo_order(root: Tensor):
    """Reverse topological order of the tape, iteratively (deep graphs)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand_reduced(g, shape, axis, keepdims):
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()

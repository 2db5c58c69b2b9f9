"""Thin layer objects over the functional ops.

Layers own their parameter Tensors (stable ordering, used verbatim by the
checkpoint container) and a training flag for batch norm.  Two init
families cover every net in the package: ``he`` fan-in scaling for plain
conv stacks and ``dcgan`` N(0, 0.02) for the adversarial nets.
"""

from __future__ import annotations

import numpy as np

from ldgan.errors import ConfigError, ShapeError
from ldgan.engine import functional as F
from ldgan.engine.tensor import Tensor, get_default_dtype


class Layer:
    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def parameters(self):
        return []

    def state_arrays(self):
        """Everything that must persist: parameters plus running stats."""
        return [p.data for p in self.parameters()]

    def load_state(self, arrays):
        """Consume arrays (in ``state_arrays`` order) from the front of the list."""
        for p in self.parameters():
            a = arrays.pop(0)
            if a.shape != p.data.shape:
                raise ShapeError(f"checkpoint tensor {a.shape} != parameter {p.data.shape}")
            p.data = a.astype(p.data.dtype)

    def train(self, mode: bool = True):
        return self

    def eval(self):
        return self.train(False)


def _init_weight(shape, scheme, rng, dtype):
    if scheme == "he":
        fan_in = int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / fan_in)
    elif scheme == "dcgan":
        std = 0.02
    else:
        raise ConfigError(f"unknown init scheme '{scheme}'")
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, bias=True,
                 init="he", rng=None, dtype=None):
        dtype = dtype or get_default_dtype()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(_init_weight((out_ch, in_ch, kernel, kernel), init, rng, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        out = F.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class ConvTranspose2d(Layer):
    """Transpose convolution; kernel stored as (in_ch, out_ch, k, k) so the
    op is literally the adjoint of a conv with that kernel."""

    def __init__(self, in_ch, out_ch, kernel=4, stride=2, padding=1, bias=True,
                 init="dcgan", rng=None, dtype=None):
        dtype = dtype or get_default_dtype()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(_init_weight((in_ch, out_ch, kernel, kernel), init, rng, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        out = F.conv_transpose2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, gamma_noise=0.0, rng=None,
                 dtype=None):
        dtype = dtype or get_default_dtype()
        gamma = np.ones(channels, dtype=dtype)
        if gamma_noise:
            rng = rng if rng is not None else np.random.default_rng(0)
            gamma += (rng.standard_normal(channels) * gamma_noise).astype(dtype)
        self.gamma = Tensor(gamma, requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        # running stats share the layer dtype so checkpoints round-trip exactly
        self.state = F.BatchNormState(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def forward(self, x):
        return F.batch_norm2d(x, self.gamma, self.beta, self.state, self.training,
                              self.momentum, self.eps)

    def parameters(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [self.gamma.data, self.beta.data,
                self.state.running_mean, self.state.running_var]

    def load_state(self, arrays):
        super().load_state(arrays)
        dtype = self.state.running_mean.dtype
        self.state.running_mean = arrays.pop(0).astype(dtype)
        self.state.running_var = arrays.pop(0).astype(dtype)

    def train(self, mode: bool = True):
        self.training = mode
        return self


class Activation(Layer):
    def __init__(self, kind, alpha=0.2):
        self.kind = kind
        self.alpha = alpha

    def forward(self, x):
        return F.activation(x, self.kind, self.alpha)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def state_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.state_arrays())
        return out

    def load_state(self, arrays):
        for layer in self.layers:
            layer.load_state(arrays)

    def train(self, mode: bool = True):
        for layer in self.layers:
            layer.train(mode)
        return self

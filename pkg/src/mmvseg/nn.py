"""Parameterized layers on top of the autodiff primitives.

Layers draw their initial weights from a caller-supplied numpy Generator so
that model construction is reproducible from a single seed.  Weight matrices
and convolution kernels are Xavier-uniform, biases start at zero.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def xavier_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class providing recursive named-parameter discovery.

    Attributes that are `Tensor`s with requires_grad, `Module`s, or lists of
    `Module`s are picked up automatically, in attribute insertion order, so
    parameter names are stable for a given architecture.
    """

    def named_params(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}/{key}" if prefix else key
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def params(self):
        return [p for _, p in self.named_params()]

    def param_count(self):
        return sum(p.size for p in self.params())


class Linear(Module):
    """Affine map on the last extent: (..., cin) -> (..., cout)."""

    def __init__(self, cin, cout, rng, dtype=np.float32, bias=True):
        self.w = Tensor(xavier_uniform(rng, (cin, cout), cin, cout, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class LayerNorm(Module):
    def __init__(self, c, dtype=np.float32, eps=1e-5):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Conv3d(Module):
    """Channels-last 3D convolution layer with zero-initialized bias."""

    def __init__(self, cin, cout, ksize, rng, stride=1, padding=0, dtype=np.float32):
        k = ksize if isinstance(ksize, tuple) else (ksize,) * 3
        kvol = k[0] * k[1] * k[2]
        self.kernel = Tensor(
            xavier_uniform(rng, k + (cin, cout), kvol * cin, kvol * cout, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv3d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)


class Mlp(Module):
    """linear -> GELU -> linear, the feed-forward sub-block used throughout."""

    def __init__(self, c, hidden, rng, dtype=np.float32, cout=None):
        self.fc1 = Linear(c, hidden, rng, dtype)
        self.fc2 = Linear(hidden, cout if cout is not None else c, rng, dtype)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))

"""Layers composed from the primitive set.

Parameters are plain Tensors with requires_grad=True, registered on Modules
so checkpoints and optimizers can address them by dotted name. Weight init
is fan-in-scaled uniform, drawn from an explicitly passed Generator so that
model construction is deterministic given a seed.
"""

from __future__ import annotations

import numpy as np

from dgfnet.autodiff import ops
from dgfnet.autodiff.tensor import Tensor
from dgfnet.errors import ContractError


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype,
                   scale: float = 1.0) -> np.ndarray:
    bound = scale / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value)
        self._buffers[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def __setattr__(self, name, value):
        if isinstance(value, Module) and name not in ("_children",):
            self.__dict__.setdefault("_children", {})[name] = value
        super().__setattr__(name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_entries(self) -> dict[str, Tensor]:
        """All parameters and buffers by unique dotted name."""
        entries = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        clash = set(entries) & set(buffers)
        if clash:
            raise ContractError(f"parameter/buffer name clash: {sorted(clash)}")
        entries.update(buffers)
        return entries

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        entries = self.state_entries()
        missing = set(entries) - set(arrays)
        if missing:
            raise ContractError(f"state missing entries: {sorted(missing)[:4]}...")
        for name, t in entries.items():
            a = arrays[name]
            if a.shape != t.data.shape:
                raise ContractError(
                    f"state entry {name}: shape {a.shape} != expected {t.data.shape}"
                )
            t.data = a.astype(t.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True, weight_scale: float = 1.0):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = self.add_param(
            "weight", fan_in_uniform(rng, (in_dim, out_dim), in_dim, dtype, weight_scale)
        )
        self.bias = self.add_param("bias", np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float64, stride: int = 1, padding="same", bias: bool = True,
                 weight_scale: float = 1.0):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = self.add_param(
            "weight",
            fan_in_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype, weight_scale),
        )
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch normalization over (B, H, W).

    Training mode normalizes with batch statistics and updates running
    stats; eval mode normalizes with the (frozen) running statistics.
    """

    def __init__(self, channels: int, dtype=np.float64, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        gamma = self.gamma.reshape(1, c, 1, 1)
        beta = self.beta.reshape(1, c, 1, 1)
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
            xhat = xc / (var + self.eps).sqrt()
            m = self.momentum
            self.running_mean.data = (
                (1 - m) * self.running_mean.data + m * mu.data.reshape(-1)
            )
            self.running_var.data = (
                (1 - m) * self.running_var.data + m * var.data.reshape(-1)
            )
        else:
            rm = Tensor(self.running_mean.data.reshape(1, c, 1, 1))
            rv = Tensor(self.running_var.data.reshape(1, c, 1, 1))
            xhat = (x - rm) / (rv + self.eps).sqrt()
        return gamma * xhat + beta


class ChannelNorm(Module):
    """Normalize each channel over its spatial extent (group norm with one
    channel per group), with per-channel affine."""

    def __init__(self, channels: int, dtype=np.float64, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(2, 3), keepdims=True)
        xhat = xc / (var + self.eps).sqrt()
        return self.gamma.reshape(1, c, 1, 1) * xhat + self.beta.reshape(1, c, 1, 1)


class LayerNorm(Module):
    """Normalize over the last axis with learned affine."""

    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(dim, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return self.gamma * (xc / (var + self.eps).sqrt()) + self.beta

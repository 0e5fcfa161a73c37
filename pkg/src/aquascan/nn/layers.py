"""Parameterized layers over the autodiff core.

A ``Module`` tracks parameters and child modules by attribute assignment,
gives every parameter a stable dotted path (used by checkpoints and by the
pruning bookkeeping), and carries the train/eval switch that batchnorm needs.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        else:
            # reassignment to a plain value drops any stale registration
            self._params.pop(name, None)
            self._children.pop(name, None)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        """Non-trainable state saved in checkpoints (running stats etc.)."""
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def submodule(self, path: str) -> "Module":
        """Resolve a dotted path ('backbone.stem.conv') to the child module."""
        mod = self
        if path:
            for part in path.split("."):
                mod = mod._children[part]
        return mod

    def set_buffer_by_path(self, path: str, value: np.ndarray):
        owner, _, leaf = path.rpartition(".")
        self.submodule(owner).set_buffer(leaf, value)

    def modules(self, prefix: str = ""):
        yield (prefix.rstrip("."), self)
        for name, child in self._children.items():
            yield from child.modules(prefix + name + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def forward(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        setattr(self, str(len(self._items)), mod)
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    """Conv with OIHW weight; groups == in_channels is the depthwise case."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ShapeError(f"groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding, self.groups = kernel, stride, padding, groups
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Tensor(_kaiming(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    def hyper(self) -> dict:
        return {"kind": "conv2d" if self.groups == 1 else ("depthwise-conv2d" if self.groups == self.in_ch else "conv2d"),
                "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "groups": self.groups}


class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = Tensor(_kaiming(rng, (out_ch, in_ch, kernel), in_ch * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def hyper(self) -> dict:
        return {"kind": "conv1d", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        bound = np.sqrt(1.0 / in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            out = out + self.bias
        return out

    def hyper(self) -> dict:
        return {"kind": "linear", "in_features": self.in_features, "out_features": self.out_features}


class _BatchNorm(Module):
    """Shared batchnorm core; the reduction axes distinguish 1d from 2d.

    Training mode normalizes with batch statistics (gradients flow through
    them) and updates the running estimates outside the graph; eval mode
    uses the stored running statistics as constants.
    """

    axes: tuple

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def _param_shape(self, ndim: int):
        shape = [1] * ndim
        shape[1] = self.num_features
        return tuple(shape)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm over {self.num_features} features got input {x.data.shape}")
        shape = self._param_shape(x.data.ndim)
        if self.training:
            mu = T.tmean(x, axis=self.axes, keepdims=True)
            var = T.tmean(T.power(x - mu, 2.0), axis=self.axes, keepdims=True)
            m = self.momentum
            self.set_buffer("running_mean", (1 - m) * self.running_mean + m * mu.data.reshape(-1))
            # unbiased estimate for the running variance, biased in the graph
            n = x.data.size / self.num_features
            unbias = n / max(n - 1.0, 1.0)
            self.set_buffer("running_var", (1 - m) * self.running_var + m * var.data.reshape(-1) * unbias)
        else:
            mu = Tensor(self.running_mean.reshape(shape))
            var = Tensor(self.running_var.reshape(shape))
        xhat = (x - mu) * T.power(var + Tensor(self.eps), -0.5)
        return xhat * T.reshape(self.gamma, shape) + T.reshape(self.beta, shape)

    def hyper(self) -> dict:
        return {"kind": "batchnorm", "num_features": self.num_features, "eps": self.eps,
                "momentum": self.momentum}


class BatchNorm2d(_BatchNorm):
    axes = (0, 2, 3)


class BatchNorm1d(_BatchNorm):
    axes = (0, 2)


class Activation(Module):
    """relu / hardswish / sigmoid / identity by name, so configs stay declarative."""

    FNS = {"relu": T.relu, "hardswish": T.hardswish, "sigmoid": T.sigmoid, "identity": lambda t: t}

    def __init__(self, name: str):
        super().__init__()
        if name not in self.FNS:
            raise ValueError(f"unknown activation {name!r}")
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        return self.FNS[self.name](x)

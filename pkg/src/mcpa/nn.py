"""Small module system: parameter containers with stable hierarchical names.

Parameter names follow attribute paths ("encoder.stages.0.blocks.1.attn.q.weight"),
which is what the checkpoint container keys on.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor
from .tensor.core import default_dtype


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal init clipped to two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2.0 * std, 2.0 * std).astype(default_dtype())


def fan_out_normal(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    """Kaiming-style init for conv kernels (out_ch, in_ch/groups, kh, kw)."""
    out_ch, _, kh, kw = shape
    fan_out = kh * kw * out_ch // groups
    return rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape).astype(default_dtype())


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state: "OrderedDict[str, np.ndarray]") -> None:
        """Load parameter arrays; fails naming the first mismatched entry."""
        own = OrderedDict(self.named_parameters())
        for (have_name, have), (want_name, arr) in zip(own.items(), state.items()):
            if have_name != want_name:
                raise KeyError(
                    f"parameter name mismatch: model has '{have_name}', checkpoint has '{want_name}'"
                )
            if have.data.shape != arr.shape:
                raise ValueError(
                    f"parameter '{have_name}' shape mismatch: model {have.data.shape}, "
                    f"checkpoint {arr.shape}"
                )
        if len(own) != len(state):
            missing = set(own) ^ set(state)
            raise KeyError(f"parameter set mismatch, first offender: '{sorted(missing)[0]}'")
        for name, p in own.items():
            p.data = np.asarray(state[name], dtype=p.data.dtype).reshape(p.data.shape)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
        self._n = len(modules)

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __getitem__(self, i):
        return getattr(self, str(i % self._n if i < 0 else i))

    def __len__(self):
        return self._n

    def named_parameters(self, prefix: str = ""):
        for i in range(self._n):
            child = getattr(self, str(i))
            path = f"{prefix}.{i}" if prefix else str(i)
            yield from child.named_parameters(path)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        from .tensor import functional as F

        self._f = F
        self.weight = Tensor(trunc_normal(rng, (in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x):
        return self._f.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = ""):
        yield (f"{prefix}.weight" if prefix else "weight"), self.weight
        if self.bias is not None:
            yield (f"{prefix}.bias" if prefix else "bias"), self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        from .tensor import functional as F

        self._f = F
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=default_dtype()), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=default_dtype()), requires_grad=True)

    def forward(self, x):
        return self._f.layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix: str = ""):
        yield (f"{prefix}.gamma" if prefix else "gamma"), self.gamma
        yield (f"{prefix}.beta" if prefix else "beta"), self.beta


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ):
        from .tensor import functional as F

        self._f = F
        self.stride = stride
        self.padding = padding
        self.groups = groups
        shape = (out_ch, in_ch // groups, kernel, kernel)
        self.weight = Tensor(fan_out_normal(rng, shape, groups), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x):
        return self._f.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def named_parameters(self, prefix: str = ""):
        yield (f"{prefix}.weight" if prefix else "weight"), self.weight
        if self.bias is not None:
            yield (f"{prefix}.bias" if prefix else "bias"), self.bias


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        from .tensor import functional as F

        self._f = F
        self.stride = stride
        self.padding = padding
        shape = (in_ch, out_ch, kernel, kernel)
        fan_out = kernel * kernel * out_ch
        w = rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape).astype(default_dtype())
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x):
        return self._f.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self, prefix: str = ""):
        yield (f"{prefix}.weight" if prefix else "weight"), self.weight
        if self.bias is not None:
            yield (f"{prefix}.bias" if prefix else "bias"), self.bias


def depthwise_conv2d(channels: int, kernel: int, rng: np.random.Generator, padding: int | None = None) -> Conv2d:
    """Depthwise conv (one filter per channel), default "same" padding."""
    if padding is None:
        padding = kernel // 2
    return Conv2d(channels, channels, kernel, rng, stride=1, padding=padding, groups=channels)

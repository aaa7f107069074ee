"""Module containers and the basic parametrized layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import DimensionError
from .tensor import DEFAULT_DTYPE, Tensor, matmul


class Parameter(Tensor):
    """A leaf tensor that a :class:`Module` owns and an optimizer may update."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__(np.array(data, dtype=dtype), requires_grad=requires_grad)


class Module:
    """Minimal module tree: parameters, buffers, children and train/eval mode."""

    def __init__(self):
        self.training = True
        self._buffer_names: list[str] = []

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        if name not in self._buffer_names:
            self._buffer_names.append(name)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(own) | set(buffers)) - set(state)
        unexpected = set(state) - set(own) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != np.shape(value):
                raise DimensionError(f"{name}: expected shape {target.shape}, got {np.shape(value)}")
            target[...] = value

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ActivityProbe:
    """Counts nonzero input entries seen by a compute layer while ``probing`` is set."""

    probing = False
    input_nonzero = 0
    input_count = 0

    def start_probe(self) -> None:
        self.probing = True
        self.input_nonzero = 0
        self.input_count = 0

    def stop_probe(self) -> None:
        self.probing = False

    def input_activity(self) -> float | None:
        return self.input_nonzero / self.input_count if self.input_count else None

    def _track(self, x: Tensor) -> None:
        if self.probing:
            self.input_nonzero += int(np.count_nonzero(x.data))
            self.input_count += x.size


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Linear(Module, ActivityProbe):
    """``y = x @ W.T + b`` over the last axis; ``W`` is ``[out, in]``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(uniform_fan_in(rng, (out_features, in_features), in_features))
        self.bias = Parameter(uniform_fan_in(rng, (out_features,), in_features)) if bias else None

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.weight.data[...] = uniform_fan_in(rng, self.weight.shape, self.in_features)
        if self.bias is not None:
            self.bias.data[...] = uniform_fan_in(rng, self.bias.shape, self.in_features)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear({self.in_features}->{self.out_features}) got input {x.shape}")
        self._track(x)
        y = matmul(x, self.weight.transpose(1, 0))
        return y + self.bias if self.bias is not None else y


class Conv(Module, ActivityProbe):
    """1-D or 2-D convolution without bias (every conv here feeds a batch norm)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, dims: int = 2):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise DimensionError(f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.groups, self.dims = groups, dims
        shape = (out_channels, in_channels // groups) + (kernel_size,) * dims
        self.fan_in = (in_channels // groups) * kernel_size**dims
        self.weight = Parameter(uniform_fan_in(rng, shape, self.fan_in))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.weight.data[...] = uniform_fan_in(rng, self.weight.shape, self.fan_in)

    def forward(self, x: Tensor) -> Tensor:
        self._track(x)
        return F.conv(x, self.weight, stride=self.stride, padding=self.padding, dims=self.dims, groups=self.groups)


class BatchNorm(Module):
    """Batch normalization over channel ``axis`` with learnable scale (1) and shift (0)."""

    def __init__(self, num_features: int, axis: int = 1, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.num_features, self.axis = num_features, axis
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(num_features, dtype=DEFAULT_DTYPE))

    def reset_parameters(self, rng: np.random.Generator | None = None) -> None:
        self.weight.data[...] = 1.0
        self.bias.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[self.axis] != self.num_features:
            raise DimensionError(f"BatchNorm({self.num_features}) got {x.shape} on axis {self.axis}")
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps, self.axis)


class MaxPool(Module):
    def __init__(self, factor: int, dims: int = 2):
        super().__init__()
        self.factor, self.dims = factor, dims

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool(x, self.factor, self.dims)

"""Parameter containers and the handful of layers the detector is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Attribute-walking container: Tensors with requires_grad are parameters,
    numpy arrays listed in ``_buffers`` are persistent state, and Modules (or
    lists of Modules) are children."""

    training: bool = True
    _buffers: tuple = ()

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(prefix + key + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict:
            missing = expected - set(state)
            extra = set(state) - expected
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=p.dtype)
            elif name in buffers:
                buffers[name][...] = arr

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = parameter(kaiming(rng, (cout, cin, k, k), cin * k * k))
        if bias:
            self.bias = parameter(np.zeros(cout))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Kernel-4, stride-2, pad-1 transposed convolution (exact 2x upsampling)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = False):
        self.weight = parameter(kaiming(rng, (cin, cout, 4, 4), cin * 4))
        self.bias = parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.upsample2x(x, "transposed_conv", self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(c))
        self.beta = parameter(np.zeros(c))
        self.running_mean = np.zeros(c, dtype=get_default_dtype())
        self.running_var = np.ones(c, dtype=get_default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 relu: bool = True):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.relu(y) if self.relu else y


class SqueezeExcite(Module):
    def __init__(self, c: int, rng: np.random.Generator, reduction: int = 4):
        hidden = max(1, c // reduction)
        self.fc1 = Conv2d(c, hidden, 1, rng)
        self.fc2 = Conv2d(hidden, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        s = ops.adaptive_avg_pool(x)
        s = ops.sigmoid(self.fc2(ops.relu(self.fc1(s))))
        return x * s

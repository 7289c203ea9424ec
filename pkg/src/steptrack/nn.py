"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Walks attributes in definition order to discover parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.ascontiguousarray(value).copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, gain: float = 1.0):
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in, gain))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    """Layer norm over ``axis`` (channels for C×H×W maps, features for tokens)."""

    def __init__(self, dim: int, axis: int = -1, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.axis = axis
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        axis = self.axis % x.ndim
        shape = [1] * x.ndim
        shape[axis] = -1
        return T.layer_norm(x, self.gain.reshape(shape), self.bias.reshape(shape), self.eps, axis)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0, gain: float = math.sqrt(2.0)):
        self.weight = Parameter(_uniform(rng, (c_out, c_in, k, k), c_in * k * k, gain))
        self.bias = Parameter(np.zeros(c_out))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.pad)
        return y + self.bias.reshape(-1, 1, 1)


class ConvTranspose2d(Module):
    """Weight is stored O_in×C_out×k×k, i.e. as the kernel of the conv it transposes."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0):
        fan_in = c_in * k * k // max(stride * stride, 1)
        self.weight = Parameter(_uniform(rng, (c_in, c_out, k, k), fan_in))
        self.bias = Parameter(np.zeros(c_out))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv_transpose2d(x, self.weight, self.stride, self.pad)
        return y + self.bias.reshape(-1, 1, 1)


class ConvNormReLU(Module):
    """Conv (or transposed conv) -> per-cell channel layer norm -> ReLU."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, pad: int = 1, transpose: bool = False):
        cls = ConvTranspose2d if transpose else Conv2d
        self.conv = cls(rng, c_in, c_out, k, stride, pad)
        self.norm = LayerNorm(c_out, axis=-3)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return x.reshape(n, self.heads, d // self.heads).transpose(1, 0, 2)

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(q.shape[-1]))
        attn = T.softmax(scores, axis=-1)
        self.last_attention = attn.data
        mixed = (attn @ v).transpose(1, 0, 2)
        return self.out(mixed.reshape(query.shape[0], -1))


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden, gain=math.sqrt(2.0))
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class MLP2(Module):
    """Two-layer per-token MLP: d_in -> hidden -> d_out with ReLU in between."""

    def __init__(self, rng, d_in: int, hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, hidden, gain=math.sqrt(2.0))
        self.fc2 = Linear(rng, hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

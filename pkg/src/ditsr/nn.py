"""Parameter containers and the basic layers (linear, group norm)."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def new_param(shape, rng: np.random.Generator | None, std: float = 0.0) -> Tensor:
    """A trainable tensor; with ``rng=None`` it is a zero-memory shape stub."""
    shape = tuple(int(s) for s in shape)
    if rng is None:
        data = np.broadcast_to(np.float64(0.0), shape)
    elif std == 0.0:
        data = np.zeros(shape)
    else:
        data = rng.standard_normal(shape) * std
    return Tensor(data, requires_grad=True)


class Module:
    """Walks attributes to find parameters, like a very small ``nn.Module``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
            p.grad = None


class Linear(Module):
    """``y = x @ weight + bias`` over the trailing axis."""

    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, zero: bool = False):
        std = 0.0 if zero else math.sqrt(1.0 / d_in)
        self.weight = new_param((d_in, d_out), rng, std)
        self.bias = new_param((d_out,), rng) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)

    def flops(self, tokens: int) -> int:
        return 2 * tokens * self.d_in * self.d_out


def norm_groups(channels: int) -> int:
    """16 groups (8 below 64 channels), reduced to the largest divisor."""
    cap = 16 if channels >= 64 else 8
    return max(g for g in range(1, cap + 1) if channels % g == 0)


class GroupNorm(Module):
    def __init__(self, channels: int, rng, groups: int | None = None, eps: float = 1e-5):
        self.groups = groups or norm_groups(channels)
        if channels % self.groups:
            raise T.ShapeError(f"{channels} channels not divisible into {self.groups} groups")
        self.gamma = new_param((channels,), rng)
        if rng is not None:
            self.gamma.data = np.ones(channels)
        self.beta = new_param((channels,), rng)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)

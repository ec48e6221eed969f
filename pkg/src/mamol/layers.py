"""Parameter containers and seeded initialization streams."""

from __future__ import annotations

import hashlib
import zlib
from typing import Iterator

import numpy as np

from . import numcore as nc


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, component name).

    Components draw from their own stream so adding or removing one module
    never shifts the initialization of another.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def param(value: np.ndarray, trainable: bool = True) -> nc.Tensor:
    return nc.Tensor(value, requires_grad=trainable)


class Module:
    """Attribute-walking parameter registry.

    Every ``Tensor`` attribute is a parameter; lists and dicts of modules or
    tensors are walked in insertion order, so names are stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, nc.Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[nc.Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False


def _walk(value, name: str):
    if isinstance(value, nc.Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True,
                 std: float | None = None, trainable: bool = True, zero: bool = False):
        std = 1.0 / np.sqrt(n_in) if std is None else std
        w = np.zeros((n_in, n_out)) if zero else rng.standard_normal((n_in, n_out)) * std
        self.weight = param(w, trainable)
        self.bias = param(np.zeros(n_out), trainable) if bias else None

    def __call__(self, x: nc.Tensor) -> nc.Tensor:
        y = nc.matmul(x, self.weight)
        return y if self.bias is None else nc.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, trainable: bool = True):
        self.gamma = param(np.ones(d), trainable)
        self.beta = param(np.zeros(d), trainable)
        self._eps = eps

    def __call__(self, x: nc.Tensor) -> nc.Tensor:
        return nc.layer_norm(x, self.gamma, self.beta, self._eps)


def checksum(params) -> str:
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()

"""Modality encoders, the frozen transformer trunk, and the classification head.

The trunk is pre-norm: ``a = x + Attn(LN1(x))``, ``z = LN2(a)``,
``h = FFN(z)``, output ``a + h``. At an injection layer the hook supplies a
residual ``dh(z)`` and, optionally, a LayerNorm that wraps ``h + dh``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .errors import DimensionError
from .layers import LayerNorm, Linear, Module, component_rng, param


@dataclass
class RoutingContext:
    """Out-of-band information the experts need besides the hidden states."""

    token_modality: np.ndarray  # [T] int, source modality of each token
    patterns: np.ndarray  # [B, M] bool presence
    num_modalities: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.num_modalities:
            self.num_modalities = self.patterns.shape[1]


class ExpertHook(Protocol):
    layers: frozenset[int]

    def residual(self, layer: int, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor: ...

    def norm(self, layer: int) -> LayerNorm | None: ...


class ModalityEncoder(Module):
    """Token-wise projection ``raw_dim -> d_model`` plus a modality-type embedding."""

    def __init__(self, raw_dim: int, d_model: int, rng: np.random.Generator):
        self.weight = param(rng.standard_normal((raw_dim, d_model)) / np.sqrt(raw_dim))
        self.type_embedding = param(rng.standard_normal(d_model) * 0.1)

    @property
    def raw_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray | nc.Tensor) -> nc.Tensor:
        x = nc.constant(x)
        if x.ndim != 3 or x.shape[-1] != self.raw_dim:
            raise DimensionError(f"encoder expects [B, T, {self.raw_dim}], got {x.shape}")
        return nc.add(nc.matmul(x, self.weight), self.type_embedding)


class TransformerBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, frozen: bool = True):
        d, dff = cfg.d_model, cfg.d_ff
        trainable = not frozen
        self.ln1 = LayerNorm(d, cfg.ln_eps, trainable)
        self.qkv = Linear(rng, d, 3 * d, trainable=trainable)
        self.out = Linear(rng, d, d, trainable=trainable)
        self.ln2 = LayerNorm(d, cfg.ln_eps, trainable)
        self.ff1 = Linear(rng, d, dff, trainable=trainable)
        self.ff2 = Linear(rng, dff, d, trainable=trainable)
        for lin in (self.qkv, self.out, self.ff1, self.ff2):
            lin.bias.data[:] = rng.standard_normal(lin.bias.shape) * 0.02
        self._heads = cfg.num_heads
        self._d = d

    def attention(self, x: nc.Tensor) -> nc.Tensor:
        b, t, d = x.shape
        h = self._heads
        dh = d // h
        qkv = self.qkv(x)

        def heads(i):
            part = nc.slice_axis(qkv, -1, i * d, (i + 1) * d)
            return nc.transpose(nc.reshape(part, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(0), heads(1), heads(2)
        scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        ctx = nc.matmul(nc.softmax(scores), v)
        merged = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.out(merged)

    def feed_forward(self, z: nc.Tensor) -> nc.Tensor:
        return self.ff2(nc.gelu(self.ff1(z)))

    def __call__(self, x: nc.Tensor, layer: int, hook: ExpertHook | None = None,
                 ctx: RoutingContext | None = None, taps: dict | None = None) -> nc.Tensor:
        a = nc.add(x, self.attention(self.ln1(x)))
        z = self.ln2(a)
        h = self.feed_forward(z)
        if hook is not None and layer in hook.layers:
            dh = hook.residual(layer, z, ctx)
            if dh.shape != h.shape:
                raise DimensionError(f"layer {layer}: hook returned {dh.shape}, expected {h.shape}")
            h_frozen = h
            h = nc.add(h, dh)
            ln = hook.norm(layer)
            if ln is not None:
                h = ln(h)
            if taps is not None:
                taps[layer] = {"z": z, "h_frozen": h_frozen, "delta": dh, "h_layer": h}
        return nc.add(a, h)


class Trunk(Module):
    """Stack of frozen blocks plus a frozen final LayerNorm."""

    def __init__(self, cfg: ModelConfig, seed: int, name: str = "trunk"):
        self.blocks = [
            TransformerBlock(cfg, component_rng(seed, f"{name}/block{i + 1}")) for i in range(cfg.num_layers)
        ]
        self.final_ln = LayerNorm(cfg.d_model, cfg.ln_eps, trainable=False)

    def __call__(self, tokens: nc.Tensor, hook: ExpertHook | None = None,
                 ctx: RoutingContext | None = None, taps: dict | None = None) -> nc.Tensor:
        x = tokens
        for i, block in enumerate(self.blocks):
            x = block(x, i + 1, hook, ctx, taps)
        return self.final_ln(x)


def trunk_forward(trunk: Trunk, tokens: nc.Tensor, expert_hook: ExpertHook | None = None,
                  ctx: RoutingContext | None = None, taps: dict | None = None) -> nc.Tensor:
    return trunk(tokens, expert_hook, ctx, taps)


class ClassifierHead(Module):
    def __init__(self, n_in: int, num_classes: int, rng: np.random.Generator):
        self.linear = Linear(rng, n_in, num_classes)

    def __call__(self, pooled: nc.Tensor) -> nc.Tensor:
        return self.linear(pooled)


def encode_modality(encoder: ModalityEncoder, x_m) -> nc.Tensor:
    return encoder(x_m)

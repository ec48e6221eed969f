"""Comparison MoE paradigms built on the same encoders, trunk and head.

* ``moe_rep``  - estimation experts decode the encoded block of each absent
  modality from the pooled present ones (replaces zero-fill).
* ``moe_ada``  - bottleneck adapters at the injection layers, gated from the
  hidden state only.
* ``moe_task`` - full-rank FFN adapters at the injection layers, routed by
  the missing pattern only.

Adapter-style residuals are added to the frozen feed-forward output without
an extra LayerNorm, so zeroing them recovers ``baseline_frozen`` exactly.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .backbone import RoutingContext
from .config import ModelConfig
from .errors import ValidationError
from .layers import Linear, Module, component_rng, param
from .mamol import mix_experts, top_k_gates


class BottleneckAdapter(Module):
    def __init__(self, d: int, width: int, rng: np.random.Generator):
        self.down = Linear(rng, d, width)
        self.up = Linear(rng, width, d, zero=True)

    def __call__(self, z: nc.Tensor) -> nc.Tensor:
        return self.up(nc.gelu(self.down(z)))


class InputGatedAdapters(Module):
    """Token-wise softmax gate over adapters computed from ``z`` alone."""

    def __init__(self, d: int, num_experts: int, top_k: int, width: int, rng: np.random.Generator,
                 normalization: str = "renormalize"):
        self.gate = param(rng.standard_normal((d, num_experts)) / np.sqrt(d))
        self.experts = [BottleneckAdapter(d, width, rng) for _ in range(num_experts)]
        self._k = top_k
        self._normalization = normalization
        self._usage = np.zeros(num_experts, dtype=np.int64)

    def __call__(self, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor:
        gates, idx = top_k_gates(nc.softmax(nc.matmul(z, self.gate)), self._k, self._normalization)
        np.add.at(self._usage, idx.reshape(-1), 1)
        return mix_experts(self.experts, gates, z)


class PatternRoutedFFNs(Module):
    """Experts chosen from a learned table indexed by the sample's missing pattern."""

    def __init__(self, d: int, num_modalities: int, num_experts: int, top_k: int, hidden: int,
                 rng: np.random.Generator, normalization: str = "renormalize"):
        n_patterns = 2**num_modalities - 1
        table = np.zeros((n_patterns, num_experts))
        table[np.arange(n_patterns), np.arange(n_patterns) % num_experts] = 1.0
        self.table = param(table)
        self.experts = [BottleneckAdapter(d, hidden, rng) for _ in range(num_experts)]
        self._k = top_k
        self._m = num_modalities
        self._normalization = normalization
        self._usage = np.zeros(num_experts, dtype=np.int64)

    def pattern_gates(self, patterns: np.ndarray) -> tuple[nc.Tensor, np.ndarray]:
        patterns = np.asarray(patterns, dtype=bool)
        if not patterns.any(axis=-1).all():
            raise ValidationError("every sample needs at least one present modality")
        ids = (patterns.astype(np.int64) * (1 << np.arange(self._m))).sum(-1) - 1
        onehot = nc.Tensor(np.eye(self.table.shape[0])[ids])
        return top_k_gates(nc.softmax(nc.matmul(onehot, self.table)), self._k, self._normalization)

    def __call__(self, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor:
        gates, idx = self.pattern_gates(ctx.patterns)
        np.add.at(self._usage, idx.reshape(-1), z.shape[1])
        return mix_experts(self.experts, nc.repeat_axis(gates, 1, z.shape[1]), z)


class AdapterHook(Module):
    """Plain residual injection ``h_frozen + dh`` of a per-layer expert module."""

    def __init__(self, modules: dict[int, Module]):
        self.layers_ = modules
        self.layers = frozenset(modules)

    def residual(self, layer: int, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor:
        return self.layers_[layer](z, ctx)

    def norm(self, layer: int):
        return None


def build_ada_hook(cfg: ModelConfig, num_modalities: int, seed: int, prefix: str = "moe_ada") -> AdapterHook:
    return AdapterHook({
        i: InputGatedAdapters(cfg.d_model, cfg.ada_num_experts, cfg.ada_top_k, cfg.ada_bottleneck,
                              component_rng(seed, f"{prefix}/layer{i}"), cfg.gate_normalization)
        for i in cfg.injection_layers
    })


def build_task_hook(cfg: ModelConfig, num_modalities: int, seed: int, prefix: str = "moe_task") -> AdapterHook:
    return AdapterHook({
        i: PatternRoutedFFNs(cfg.d_model, num_modalities, cfg.task_num_experts, cfg.task_top_k, cfg.task_hidden,
                             component_rng(seed, f"{prefix}/layer{i}"), cfg.gate_normalization)
        for i in cfg.injection_layers
    })


class BlockDecoder(Module):
    """Low-rank map from a pooled vector [B, d] to a flattened block [B, T * d]."""

    def __init__(self, d: int, rank: int, tokens: int, rng: np.random.Generator):
        self.down = Linear(rng, d, rank)
        self.up = Linear(rng, rank, tokens * d, zero=True)

    def __call__(self, u: nc.Tensor) -> nc.Tensor:
        return self.up(self.down(u))


class ReplacementEstimator(Module):
    """Per target modality, a gated mixture of block decoders over pooled present features."""

    def __init__(self, cfg: ModelConfig, tokens: list[int], seed: int):
        d = cfg.d_model
        self.targets = []
        for m, t in enumerate(tokens):
            rng = component_rng(seed, f"moe_rep/target{m}")
            self.targets.append({
                "gate": param(rng.standard_normal((d, cfg.rep_num_experts)) / np.sqrt(d)),
                "experts": [BlockDecoder(d, cfg.rep_rank, t, rng) for _ in range(cfg.rep_num_experts)],
            })
        self._k = cfg.rep_top_k
        self._m = len(tokens)
        self._tokens = list(tokens)
        self._d = d
        self._normalization = cfg.gate_normalization
        self._task_gradient = cfg.rep_task_gradient

    def context(self, encoded: list[nc.Tensor], present: np.ndarray, target: int) -> nc.Tensor:
        """Average of mean-pooled blocks over present modalities other than ``target``."""
        others = present.copy()
        others[:, target] = False
        count = np.maximum(others.sum(axis=1), 1).astype(np.float64)
        out = None
        for j, h in enumerate(encoded):
            if j == target:
                continue
            w = nc.Tensor(others[:, j] / count)
            term = nc.mul_rowwise(nc.mean_pool(h, 1), w)
            out = term if out is None else nc.add(out, term)
        return out

    def estimate(self, encoded: list[nc.Tensor], present: np.ndarray, target: int) -> nc.Tensor:
        """Synthetic encoded block [B, T_target, d] for modality ``target``."""
        spec = self.targets[target]
        u = self.context(encoded, present, target)
        gates, _ = top_k_gates(nc.softmax(nc.matmul(u, spec["gate"])), self._k, self._normalization)
        est = mix_experts(spec["experts"], gates, u)
        return nc.reshape(est, (est.shape[0], self._tokens[target], self._d))

    def substitute(self, encoded: list[nc.Tensor], patterns: np.ndarray) -> list[nc.Tensor]:
        out = []
        for j, h in enumerate(encoded):
            present = patterns[:, j]
            if present.all():
                out.append(h)
                continue
            mask = np.broadcast_to(present[:, None, None], h.shape)
            est = self.estimate(encoded, patterns, j)
            if not self._task_gradient:
                # the task gradient swamps the reconstruction signal in Adam's moments
                est = est.detach()
            out.append(nc.where(mask, h, est))
        return out

    def reconstruction_loss(self, encoded: list[nc.Tensor], patterns: np.ndarray) -> nc.Tensor | None:
        """MSE between estimates and the (detached) true blocks on complete samples."""
        rows = np.flatnonzero(patterns.all(axis=1))
        if rows.size == 0:
            return None
        sub = [nc.Tensor(h.data[rows]) for h in encoded]
        present = patterns[rows]
        total = None
        for j in range(self._m):
            term = nc.mse_loss(self.estimate(sub, present, j), sub[j])
            total = term if total is None else nc.add(total, term)
        return nc.scale(total, 1.0 / self._m)

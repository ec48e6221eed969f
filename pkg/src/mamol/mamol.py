"""Missing-aware mixture of LoRA experts.

One :class:`MaMOLLayer` sits at each injection layer and produces
``dh = h_dyn + h_stat`` from the feed-forward input ``z``:

* dynamic experts: a router reads ``[z ; m_type]`` and activates the top-K
  LoRA experts per token;
* static experts: a shared LoRA expert always on, plus one LoRA expert per
  modality switched by a fixed rule on the token's modality and the
  sample's presence pattern.

Row-vector convention throughout: a LoRA expert maps ``z -> z @ A @ B`` with
``A`` [d, r] and ``B`` [r, d].
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .backbone import RoutingContext
from .config import ModelConfig
from .errors import ValidationError
from .layers import LayerNorm, Linear, Module, component_rng, param


class LoraExpert(Module):
    def __init__(self, d: int, r: int, rng: np.random.Generator):
        if not 1 <= r <= d // 2:
            raise ValidationError(f"LoRA rank {r} must satisfy 1 <= r <= d/2 = {d // 2}")
        self.A = param(rng.standard_normal((d, r)) / np.sqrt(d))
        self.B = param(np.zeros((r, d)))

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def __call__(self, z: nc.Tensor) -> nc.Tensor:
        return nc.matmul(nc.matmul(z, self.A), self.B)

    def num_params(self) -> int:
        return self.A.data.size + self.B.data.size


def top_k_gates(probs: nc.Tensor, k: int, normalization: str = "renormalize",
                pinned: np.ndarray | None = None) -> tuple[nc.Tensor, np.ndarray]:
    """Keep the ``k`` largest entries of each last-axis slice, zero the rest.

    Ties go to the lower index. Selection is a constant of the graph; only
    the kept values carry gradient. ``pinned`` replays a previous selection.
    """
    n = probs.shape[-1]
    if not 1 <= k <= n:
        raise ValidationError(f"top-k {k} out of range for {n} experts")
    if pinned is None:
        idx = np.argsort(-probs.data, axis=-1, kind="stable")[..., :k]
    else:
        idx = pinned
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    kept = nc.where(mask, probs, nc.Tensor(np.zeros(n)))
    if normalization == "renormalize":
        kept = nc.normalize_last(kept)
    return kept, idx


def encode_pattern(patterns: np.ndarray, encoding: str = "bitmask") -> np.ndarray:
    """Presence rows [B, M] -> router features [B, M] (bitmask) or [B, 2^M - 1] (one-hot)."""
    patterns = np.asarray(patterns, dtype=bool)
    if not patterns.any(axis=-1).all():
        raise ValidationError("m_type must have at least one modality present")
    if encoding == "bitmask":
        return patterns.astype(np.float64)
    m = patterns.shape[-1]
    ids = (patterns.astype(np.int64) * (1 << np.arange(m))).sum(-1) - 1
    return np.eye(2**m - 1)[ids]


def pattern_feature_dim(m: int, encoding: str) -> int:
    return m if encoding == "bitmask" else 2**m - 1


class DynamicRouter(Module):
    """``g = softmax(W_t gelu(f_t([z ; m_type])))`` followed by top-K selection."""

    def __init__(self, d: int, num_modalities: int, num_experts: int, top_k: int, rng: np.random.Generator,
                 d_router: int | None = None, pattern_encoding: str = "bitmask",
                 granularity: str = "token", normalization: str = "renormalize"):
        d_router = d_router or max(1, d // 2)
        p = pattern_feature_dim(num_modalities, pattern_encoding)
        self.proj = Linear(rng, d + p, d_router)
        self.w_t = param(rng.standard_normal((d_router, num_experts)) / np.sqrt(d_router))
        self._k = top_k
        self._n = num_experts
        self._encoding = pattern_encoding
        self._granularity = granularity
        self._normalization = normalization
        self._pin_mode: str | None = None
        self._pinned: np.ndarray | None = None
        self._usage = np.zeros(num_experts, dtype=np.int64)
        self._last_probs: nc.Tensor | None = None

    @property
    def num_experts(self) -> int:
        return self._n

    @property
    def top_k(self) -> int:
        return self._k

    def logits(self, z: nc.Tensor, m_type: np.ndarray) -> nc.Tensor:
        feats = encode_pattern(m_type, self._encoding)
        if self._granularity == "sample":
            inp = nc.concat_last_axis(nc.mean_pool(z, 1), nc.Tensor(feats))
        else:
            t = z.shape[1]
            inp = nc.concat_last_axis(z, nc.Tensor(np.repeat(feats[:, None, :], t, axis=1)))
        return nc.matmul(nc.gelu(self.proj(inp)), self.w_t)

    def route(self, z: nc.Tensor, m_type: np.ndarray) -> tuple[nc.Tensor, np.ndarray]:
        """Gates [B, T, N] with exactly K nonzero per token, and selected ids [B, T, K]."""
        probs = nc.softmax(self.logits(z, m_type))
        self._last_probs = probs
        pinned = self._pinned if self._pin_mode == "replay" else None
        gates, idx = top_k_gates(probs, self._k, self._normalization, pinned)
        if self._pin_mode == "record":
            self._pinned = idx
            self._pin_mode = "replay"
        np.add.at(self._usage, idx.reshape(-1), 1)
        if self._granularity == "sample":
            t = z.shape[1]
            gates = nc.repeat_axis(gates, 1, t)
            idx = np.repeat(idx[:, None, :], t, axis=1)
        return gates, idx

    @property
    def last_probs(self) -> nc.Tensor | None:
        """Full pre-selection softmax from the latest call (for the balance loss)."""
        return self._last_probs

    # routing statistics and test support

    def usage(self) -> np.ndarray:
        return self._usage.copy()

    def reset_usage(self) -> None:
        self._usage[:] = 0

    def pin(self) -> None:
        """Record the next selection and replay it on later calls."""
        self._pin_mode = "record"
        self._pinned = None

    def unpin(self) -> None:
        self._pin_mode = None
        self._pinned = None


def mix_experts(experts, gates: nc.Tensor, z: nc.Tensor) -> nc.Tensor:
    """``sum_k gates[..., k] * expert_k(z)``; unselected experts have gate 0."""
    out = None
    lead = gates.shape[:-1]
    for k, expert in enumerate(experts):
        g_k = nc.reshape(nc.slice_axis(gates, -1, k, k + 1), lead)
        term = nc.mul_rowwise(expert(z), g_k)
        out = term if out is None else nc.add(out, term)
    return out


class DynamicExperts(Module):
    def __init__(self, cfg: ModelConfig, num_modalities: int, rng: np.random.Generator):
        d = cfg.d_model
        self.router = DynamicRouter(
            d, num_modalities, cfg.num_dynamic_experts, cfg.top_k, rng,
            cfg.router_dim, cfg.pattern_encoding, cfg.routing_granularity, cfg.gate_normalization,
        )
        self.experts = [LoraExpert(d, cfg.lora_rank, rng) for _ in range(cfg.num_dynamic_experts)]

    def __call__(self, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor:
        gates, _ = self.router.route(z, ctx.patterns)
        return mix_experts(self.experts, gates, z)


def static_coefficients(token_modality: np.ndarray, patterns: np.ndarray, j: int, rule: str) -> np.ndarray:
    """Fixed coefficient [B, T] of modality-specific expert ``j``.

    ``present``: 1 on tokens of modality j when j is observed.
    ``absent``: 1 on tokens of modality j when j is missing.
    ``always``: 1 on tokens of modality j.
    """
    on_token = token_modality == j
    if rule == "present":
        on_sample = patterns[:, j]
    elif rule == "absent":
        on_sample = ~patterns[:, j]
    elif rule == "always":
        on_sample = np.ones(patterns.shape[0], dtype=bool)
    else:
        raise ValidationError(f"unknown static gate rule {rule!r}")
    return (on_sample[:, None] & on_token[None, :]).astype(np.float64)


class StaticExpertBank(Module):
    def __init__(self, cfg: ModelConfig, num_modalities: int, rng: np.random.Generator):
        d, r = cfg.d_model, cfg.lora_rank
        self.shared = LoraExpert(d, r, rng) if cfg.use_shared else None
        self.specific = [LoraExpert(d, r, rng) for _ in range(num_modalities)] if cfg.use_modality_specific else []
        self._rule = cfg.static_gate_rule
        self._m = num_modalities

    @property
    def enabled(self) -> bool:
        return self.shared is not None or bool(self.specific)

    def __call__(self, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor | None:
        tok = np.asarray(ctx.token_modality)
        if tok.shape != (z.shape[1],):
            raise ValidationError(f"token_modality has shape {tok.shape}, expected ({z.shape[1]},)")
        if tok.size and (tok.min() < 0 or tok.max() >= self._m):
            raise IndexError(f"token modality id outside [0, {self._m})")
        out = self.shared(z) if self.shared is not None else None
        for j, expert in enumerate(self.specific):
            coef = static_coefficients(tok, ctx.patterns, j, self._rule)
            term = nc.mul_rowwise(expert(z), nc.Tensor(coef))
            out = term if out is None else nc.add(out, term)
        return out


class MaMOLLayer(Module):
    def __init__(self, cfg: ModelConfig, num_modalities: int, seed: int, name: str):
        self.dynamic = (
            DynamicExperts(cfg, num_modalities, component_rng(seed, f"{name}/dynamic")) if cfg.use_dynamic else None
        )
        static = StaticExpertBank(cfg, num_modalities, component_rng(seed, f"{name}/static"))
        self.static = static if static.enabled else None
        self.norm = LayerNorm(cfg.d_model, cfg.ln_eps, trainable=True)

    def dynamic_forward(self, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor | None:
        return None if self.dynamic is None else self.dynamic(z, ctx)

    def static_forward(self, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor | None:
        return None if self.static is None else self.static(z, ctx)

    def __call__(self, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor:
        h_dyn = self.dynamic_forward(z, ctx)
        h_stat = self.static_forward(z, ctx)
        if h_dyn is None and h_stat is None:
            return nc.Tensor(np.zeros(z.shape))
        if h_dyn is None:
            return h_stat
        if h_stat is None:
            return h_dyn
        return nc.add(h_dyn, h_stat)

    def routers(self) -> list[DynamicRouter]:
        return [] if self.dynamic is None else [self.dynamic.router]


def mamol_forward(layer: MaMOLLayer, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor:
    return layer(z, ctx)


class MaMOLHook(Module):
    """Injection hook: ``h_layer = LayerNorm(h_frozen + dh)`` at each listed layer."""

    def __init__(self, cfg: ModelConfig, num_modalities: int, seed: int, prefix: str = "mamol"):
        self.layers_ = {int(i): MaMOLLayer(cfg, num_modalities, seed, f"{prefix}/layer{i}") for i in cfg.injection_layers}
        self.layers = frozenset(self.layers_)

    def residual(self, layer: int, z: nc.Tensor, ctx: RoutingContext) -> nc.Tensor:
        return self.layers_[layer](z, ctx)

    def norm(self, layer: int) -> LayerNorm:
        return self.layers_[layer].norm

    def routers(self) -> list[DynamicRouter]:
        return [r for layer in self.layers_.values() for r in layer.routers()]


def expert_param_count(cfg: ModelConfig, num_modalities: int) -> int:
    """Trainable adaptation parameters MaMOL adds, from the config alone."""
    d, r, m = cfg.d_model, cfg.lora_rank, num_modalities
    lora = 2 * d * r
    per_layer = 2 * d  # injection LayerNorm affine
    if cfg.use_dynamic:
        p = pattern_feature_dim(m, cfg.pattern_encoding)
        dr = cfg.router_dim
        per_layer += (d + p) * dr + dr + dr * cfg.num_dynamic_experts
        per_layer += cfg.num_dynamic_experts * lora
    if cfg.use_shared:
        per_layer += lora
    if cfg.use_modality_specific:
        per_layer += m * lora
    towers = m if cfg.trunk_mode == "per_modality" else 1
    return towers * len(cfg.injection_layers) * per_layer


def paper_shaped_config(**overrides) -> ModelConfig:
    """ViT-B sized trunk with experts on the last six of twelve blocks.

    The rank is not reported; 40 puts the expert budget at about 3.6M.
    """
    base = dict(
        num_layers=12, d_model=768, d_ff=3072, num_heads=12, injection_layers=list(range(7, 13)),
        lora_rank=40, num_dynamic_experts=2, top_k=1,
    )
    base.update(overrides)
    return ModelConfig(**base)

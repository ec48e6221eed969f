"""End-to-end classifier: encoders -> substitution -> trunk(+experts) -> pooled head."""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

from . import numcore as nc
from .backbone import ClassifierHead, ModalityEncoder, RoutingContext, Trunk
from .baselines import ReplacementEstimator, build_ada_hook, build_task_hook
from .config import ModelConfig
from .datagen import ModalityBatch, substitute_missing
from .errors import DimensionError
from .layers import Module, checksum, component_rng, param
from .mamol import MaMOLHook


class MultimodalClassifier(Module):
    """One model instance per variant; shared parts draw from variant-independent RNG streams."""

    def __init__(self, cfg: ModelConfig, shapes: Sequence[tuple[int, int]], num_classes: int):
        self._cfg = cfg
        self._shapes = [tuple(int(v) for v in s) for s in shapes]
        self._num_classes = int(num_classes)
        m = len(shapes)
        seed = cfg.init_seed
        d = cfg.d_model
        self.encoders = [ModalityEncoder(dim, d, component_rng(seed, f"encoder/{j}")) for j, (_, dim) in enumerate(shapes)]
        if cfg.substitution == "learnable_placeholder":
            self.placeholders = [
                param(component_rng(seed, f"placeholder/{j}").standard_normal((t, d)) * 0.02)
                for j, (t, _) in enumerate(shapes)
            ]
        else:
            self.placeholders = None
        if cfg.trunk_mode == "shared":
            self.towers = [Trunk(cfg, seed, "trunk")]
        else:
            self.towers = [Trunk(cfg, seed, f"trunk/m{j}") for j in range(m)]
        for tower in self.towers:
            tower.freeze()
        self.hooks = [self._build_hook(cfg, m, seed, t) for t in range(len(self.towers))]
        self.estimator = ReplacementEstimator(cfg, [t for t, _ in shapes], seed) if cfg.variant == "moe_rep" else None
        self.head = ClassifierHead(m * d, num_classes, component_rng(seed, "head"))
        self._aux: list[tuple[str, float, nc.Tensor]] = []
        self._tok_ids = np.concatenate([np.full(t, j, dtype=np.int64) for j, (t, _) in enumerate(shapes)])

    @staticmethod
    def _build_hook(cfg: ModelConfig, m: int, seed: int, tower: int):
        suffix = "" if cfg.trunk_mode == "shared" else f"/tower{tower}"
        if cfg.variant == "mamol":
            return MaMOLHook(cfg, m, seed, "mamol" + suffix)
        if cfg.variant == "moe_ada":
            return build_ada_hook(cfg, m, seed, "moe_ada" + suffix)
        if cfg.variant == "moe_task":
            return build_task_hook(cfg, m, seed, "moe_task" + suffix)
        return None

    # ------------------------------------------------------------------
    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(self._shapes)

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def num_modalities(self) -> int:
        return len(self._shapes)

    def trainable_parameters(self) -> list[tuple[str, nc.Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def frozen_parameters(self) -> list[tuple[str, nc.Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]

    def frozen_checksum(self) -> str:
        return checksum(self.frozen_parameters())

    def param_summary(self) -> dict[str, int]:
        trainable = sum(p.data.size for _, p in self.trainable_parameters())
        frozen = sum(p.data.size for _, p in self.frozen_parameters())
        adaptation = sum(
            p.data.size for n, p in self.trainable_parameters() if n.startswith(("hooks.", "estimator."))
        )
        return {"trainable": trainable, "frozen": frozen, "total": trainable + frozen, "adaptation": adaptation}

    def routers(self):
        rs = []
        for hook in self.hooks:
            if hasattr(hook, "routers"):
                rs.extend(hook.routers())
        return rs

    def usage_modules(self):
        """Objects carrying an ``_usage`` counter, in a stable order."""
        mods = list(self.routers())
        for hook in self.hooks:
            if hook is not None and not hasattr(hook, "routers"):
                mods.extend(hook.layers_[i] for i in sorted(hook.layers_))
        return mods

    def expert_usage(self) -> list[list[int]]:
        return [m._usage.tolist() for m in self.usage_modules()]

    def reset_usage(self) -> None:
        for m in self.usage_modules():
            m._usage[:] = 0

    @contextlib.contextmanager
    def pinned_routing(self):
        """Freeze dynamic-expert selection to whatever the next forward picks."""
        routers = self.routers()
        for r in routers:
            r.pin()
        try:
            yield
        finally:
            for r in routers:
                r.unpin()

    # ------------------------------------------------------------------
    def encode(self, batch: ModalityBatch) -> list[nc.Tensor]:
        if len(batch.features) != self.num_modalities:
            raise DimensionError(f"batch has {len(batch.features)} modalities, model expects {self.num_modalities}")
        encoded = []
        for j, (enc, x) in enumerate(zip(self.encoders, batch.features)):
            if x.shape[1] != self._shapes[j][0]:
                raise DimensionError(f"modality {j}: {x.shape[1]} tokens, model expects {self._shapes[j][0]}")
            encoded.append(enc(x))
        return encoded

    def substitute(self, encoded: list[nc.Tensor], patterns: np.ndarray) -> list[nc.Tensor]:
        if self.estimator is not None:
            if self._cfg.rep_recon_weight > 0:
                loss = self.estimator.reconstruction_loss(encoded, patterns)
                if loss is not None:
                    self._aux.append(("reconstruction", self._cfg.rep_recon_weight, loss))
            return self.estimator.substitute(encoded, patterns)
        return substitute_missing(encoded, patterns, self._cfg.substitution, self.placeholders)

    def features(self, batch: ModalityBatch, taps: list[dict] | None = None) -> nc.Tensor:
        """Concatenated per-modality mean-pooled trunk outputs [B, M * d]."""
        self._aux = []
        patterns = np.asarray(batch.patterns, dtype=bool)
        blocks = self.substitute(self.encode(batch), patterns)
        pooled = []
        if self._cfg.trunk_mode == "shared":
            ctx = RoutingContext(self._tok_ids, patterns)
            tap = {} if taps is not None else None
            out = self.towers[0](nc.concat(blocks, axis=1), self.hooks[0], ctx, tap)
            if taps is not None:
                taps.append(tap)
            start = 0
            for t, _ in self._shapes:
                pooled.append(nc.mean_pool(nc.slice_axis(out, 1, start, start + t), 1))
                start += t
        else:
            for j, (tower, hook, block) in enumerate(zip(self.towers, self.hooks, blocks)):
                ctx = RoutingContext(np.full(block.shape[1], j, dtype=np.int64), patterns)
                tap = {} if taps is not None else None
                pooled.append(nc.mean_pool(tower(block, hook, ctx, tap), 1))
                if taps is not None:
                    taps.append(tap)
        self._add_balance_loss()
        return nc.concat_last_axis(*pooled)

    def __call__(self, batch: ModalityBatch, taps: list[dict] | None = None) -> nc.Tensor:
        return self.head(self.features(batch, taps))

    def forward(self, batch: ModalityBatch) -> nc.Tensor:
        return self(batch)

    def _add_balance_loss(self) -> None:
        coef = self._cfg.balance_loss_coef
        if coef <= 0:
            return
        for router in self.routers():
            probs = router.last_probs
            if probs is None:
                continue
            n = probs.shape[-1]
            flat = nc.reshape(probs, (-1, n))
            importance = nc.sum(flat, axis=0)
            target = flat.shape[0] / n
            dev = nc.sub(importance, nc.Tensor(np.full(n, target)))
            cv2 = nc.scale(nc.sum(nc.mul(dev, dev)), 1.0 / (n * target * target))
            self._aux.append(("balance", coef, cv2))

    def auxiliary_losses(self) -> list[tuple[str, float, nc.Tensor]]:
        return list(self._aux)


def build_model(cfg: ModelConfig, shapes: Sequence[tuple[int, int]], num_classes: int) -> MultimodalClassifier:
    return MultimodalClassifier(cfg, shapes, num_classes)

"""Adam with linear warmup / linear decay over a frozen-trunk classifier."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numcore as nc
from .config import TrainConfig
from .datagen import MultimodalDataset
from .errors import TrainingError, ValidationError
from .layers import component_rng

log = logging.getLogger(__name__)


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    # round half up, so 0.1 * 25 -> 3 rather than banker's 2
    return int(math.floor(warmup_fraction * total_steps + 0.5))


def lr_at_step(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Piecewise-linear schedule: ramp to ``base_lr`` over W steps, then decay to 0."""
    if total_steps <= 0:
        raise ValidationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValidationError("warmup_fraction must lie in [0, 1)")
    w = warmup_steps(total_steps, warmup_fraction)
    if step == w:
        return base_lr  # exact peak; base_lr * w / w can round
    if step < w:
        return base_lr * step / w
    return base_lr * (total_steps - step) / (total_steps - w)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Iterable[tuple[str, nc.Tensor]],
    grads: dict[str, np.ndarray] | None,
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    decay_mode: str = "decoupled",
) -> None:
    """One bias-corrected Adam update in place.

    ``grads`` maps names to gradients; when ``None`` each tensor's ``.grad``
    is used and a missing gradient counts as zero. Frozen tensors are skipped.
    """
    params = [(n, p) for n, p in params if p.requires_grad]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad if grads is None else grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingError(f"non-finite gradient in parameter {name!r} ({bad} entries) at step {t}")
        if decay_mode == "coupled" and weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decay_mode == "decoupled" and weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Iterable[nc.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * s
    return total


@dataclass
class TrainResult:
    log: list[dict]
    total_steps: int
    train_accuracy: float

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def total_steps_for(cfg: TrainConfig, n: int) -> int:
    if cfg.total_steps is not None:
        return cfg.total_steps
    return cfg.epochs * math.ceil(n / cfg.batch_size)


def _check(model, dataset: MultimodalDataset) -> None:
    if len(dataset) == 0:
        raise ValidationError("training set is empty")
    if dataset.num_classes != model.num_classes:
        raise ValidationError(f"dataset has {dataset.num_classes} classes, model expects {model.num_classes}")
    if [tuple(s) for s in dataset.shapes] != [tuple(s) for s in model.shapes]:
        raise ValidationError(f"dataset shapes {dataset.shapes} do not match model shapes {model.shapes}")


def loss_fn(model, batch) -> tuple[nc.Tensor, nc.Tensor]:
    """Cross-entropy plus weighted auxiliary losses; returns (loss, logits)."""
    logits = model(batch)
    loss = nc.cross_entropy(logits, batch.labels)
    for _, weight, aux in model.auxiliary_losses():
        loss = nc.add(loss, nc.scale(aux, weight))
    return loss, logits


def train(
    model,
    train_set: MultimodalDataset,
    cfg: TrainConfig,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minibatch training with a per-epoch log.

    Batches are drawn from a seeded permutation each epoch so runs with the
    same seed and data are bitwise reproducible. Only tensors with
    ``requires_grad`` are updated.
    """
    _check(model, train_set)
    n = len(train_set)
    total = total_steps_for(cfg, n)
    rng = component_rng(cfg.seed, "trainer/batches")
    named = model.trainable_parameters()
    state = OptimizerState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    records: list[dict] = []
    step = 0
    epoch = 0
    while step < total:
        epoch += 1
        model.reset_usage()
        order = rng.permutation(n)
        losses, correct, seen = [], 0, 0
        for start in range(0, n, cfg.batch_size):
            if step >= total:
                break
            batch = train_set.batch(order[start:start + cfg.batch_size])
            for _, p in named:
                p.grad = None
            loss, logits = loss_fn(model, batch)
            nc.backward(loss)
            if cfg.grad_clip is not None:
                clip_grad_norm((p for _, p in named), cfg.grad_clip)
            step += 1
            lr = lr_at_step(step, total, cfg.learning_rate, cfg.warmup_fraction)
            adam_step(named, None, state, lr, cfg.weight_decay, cfg.decay_mode)
            losses.append(loss.item())
            correct += int((logits.data.argmax(-1) == batch.labels).sum())
            seen += batch.size
        rec = {
            "step": step,
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "lr": lr,
            "expert_usage": model.expert_usage(),
            "train_accuracy": correct / seen,
        }
        records.append(rec)
        log.info("epoch %d step %d loss %.4f acc %.4f", epoch, step, rec["loss"], rec["train_accuracy"])
        if on_record is not None:
            on_record(rec)
    for _, p in named:
        p.grad = None
    acc = float(np.mean(predict(model, train_set) == train_set.labels))
    records.append({"step": step, "epoch": epoch, "final": True, "train_accuracy": acc})
    return TrainResult(records, total, acc)


def predict(model, dataset: MultimodalDataset, batch_size: int = 256) -> np.ndarray:
    out = []
    with nc.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            out.append(model(dataset.batch(idx)).data.argmax(-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, dataset: MultimodalDataset, batch_size: int = 256) -> dict:
    """Confusion-matrix metrics on ``dataset`` (OA, kappa x100, F1-macro)."""
    from .evalkit import confusion_matrix, metrics_from_cm

    preds = predict(model, dataset, batch_size)
    cm = confusion_matrix(dataset.labels, preds, dataset.num_classes)
    return metrics_from_cm(cm)


def overfit_gate(model, dataset: MultimodalDataset, cfg: TrainConfig | None = None,
                 max_steps: int = 500, target: float = 0.99) -> tuple[int | None, float]:
    """Full-batch steps at the base learning rate until train accuracy reaches ``target``.

    Returns the first step at which the whole of ``dataset`` is classified at
    or above ``target`` (``None`` if never) and the last accuracy seen.
    """
    cfg = cfg or TrainConfig()
    _check(model, dataset)
    batch = dataset.batch(np.arange(len(dataset)))
    named = model.trainable_parameters()
    state = OptimizerState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    acc = 0.0
    for step in range(1, max_steps + 1):
        for _, p in named:
            p.grad = None
        loss, _ = loss_fn(model, batch)
        nc.backward(loss)
        adam_step(named, None, state, cfg.learning_rate, cfg.weight_decay, cfg.decay_mode)
        acc = float(np.mean(predict(model, dataset) == dataset.labels))
        if acc >= target:
            return step, acc
    return None, acc

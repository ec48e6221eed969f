"""Fast self-checks: finite-difference gradients and independent oracles.

Each check returns ``(ok, detail)``; :func:`run_selftest` collects them into
a JSON-friendly report. Runs in well under two minutes on one core.
"""

from __future__ import annotations

import dataclasses
import itertools
import time
import warnings
from math import erf, sqrt
from typing import Callable

import numpy as np

from . import numcore as nc
from .backbone import RoutingContext
from .config import VARIANTS, ModelConfig
from .datagen import ModalityBatch, MultimodalDataset, apply_missing_protocol
from .evalkit import cohens_kappa, confusion_matrix, f1_macro, overall_accuracy
from .mamol import DynamicRouter, LoraExpert, MaMOLLayer, mix_experts
from .model import build_model
from .trainer import TrainConfig, loss_fn, train

GRAD_TOL = 1e-4


def tiny_config(variant: str = "mamol", **overrides) -> ModelConfig:
    """Small enough that full finite-difference sweeps take milliseconds."""
    base = dict(variant=variant, num_layers=2, d_model=8, d_ff=12, num_heads=2, injection_layers=[2],
                lora_rank=2, ada_bottleneck=3, task_hidden=4)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_batch(rng: np.random.Generator, shapes=((2, 3), (3, 2)), num_classes: int = 3,
               patterns=None) -> ModalityBatch:
    if patterns is None:
        patterns = np.array([[True, True], [True, False], [False, True]])
    b = len(patterns)
    feats = [rng.standard_normal((b, t, d)) for t, d in shapes]
    return ModalityBatch(feats, np.asarray(patterns, dtype=bool), rng.integers(0, num_classes, b))


def perturb_trainable(model, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Move zero-initialized parameters off zero so every gradient path is live."""
    for _, p in model.trainable_parameters():
        p.data += scale * rng.standard_normal(p.shape)


def model_gradcheck(variant: str, seed: int, only: str | None = None, **overrides) -> dict[str, float]:
    """Relative FD error per trainable parameter (optionally a name prefix) for one random instance."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(variant, init_seed=seed, **overrides)
    shapes = [(2, 3), (3, 2)]
    model = build_model(cfg, shapes, 3)
    perturb_trainable(model, rng)
    batch = tiny_batch(rng, shapes)
    named = [(n, p) for n, p in model.trainable_parameters() if only is None or n.startswith(only)]
    with model.pinned_routing():
        errs = nc.gradcheck(lambda: loss_fn(model, batch)[0], [p for _, p in named])
    return dict(zip((n for n, _ in named), errs))


def recon_gradcheck(seed: int) -> dict[str, float]:
    """moe_rep estimator parameters against the reconstruction loss alone."""
    rng = np.random.default_rng(seed)
    shapes = [(2, 3), (3, 2)]
    model = build_model(tiny_config("moe_rep", init_seed=seed), shapes, 3)
    perturb_trainable(model, rng)
    patterns = np.array([[True, True], [True, True], [True, False]])
    with nc.no_grad():
        encoded = [h.detach() for h in model.encode(tiny_batch(rng, shapes, patterns=patterns))]
    named = [(n, p) for n, p in model.trainable_parameters() if n.startswith("estimator.")]
    errs = nc.gradcheck(lambda: model.estimator.reconstruction_loss(encoded, patterns), [p for _, p in named])
    return {f"{n} (recon)": e for (n, _), e in zip(named, errs)}


def variant_gradcheck(variant: str, seed: int) -> dict[str, float]:
    """All trainable parameters of a variant.

    By default the moe_rep estimator sees only its reconstruction loss while
    its detached output feeds the trunk, which finite differences cannot
    respect. That variant is checked end to end with the task path enabled and
    the reconstruction term off, then its estimator on the reconstruction loss.
    """
    if variant != "moe_rep":
        return model_gradcheck(variant, seed)
    errs = model_gradcheck(variant, seed, rep_recon_weight=0.0, rep_task_gradient=True)
    errs.update(recon_gradcheck(seed))
    return errs


def check_op_gradients(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases: list[tuple[str, Callable]] = []

    def leaf(*shape):
        return nc.Tensor(rng.standard_normal(shape), requires_grad=True)

    for _ in range(3):
        a, b, v = leaf(2, 3, 4), leaf(2, 3, 4), leaf(4)
        w, g, bt = leaf(4, 5), leaf(4), leaf(4)
        x, y = leaf(2, 4, 3), leaf(2, 3, 4)
        cases += [
            ("add", lambda a=a, v=v: nc.sum(nc.mul(nc.add(a, v), a)), [a, v]),
            ("matmul", lambda a=a, w=w: nc.sum(nc.tanh(nc.matmul(a, w))), [a, w]),
            ("bmm", lambda x=x, y=y: nc.sum(nc.gelu(nc.matmul(x, y))), [x, y]),
            ("softmax", lambda a=a, b=b: nc.sum(nc.mul(nc.softmax(a), b)), [a, b]),
            ("layer_norm", lambda a=a, g=g, bt=bt, b=b: nc.sum(nc.mul(nc.layer_norm(a, g, bt), b)), [a, g, bt]),
            ("cross_entropy", lambda w=w: nc.cross_entropy(nc.reshape(w, (4, 5)), [0, 4, 2, 1]), [w]),
        ]
    for name, f, params in cases:
        worst = max(worst, *nc.gradcheck(f, params))
    return worst < GRAD_TOL, f"{len(cases)} op instances, max rel err {worst:.2e}"


def check_model_gradients(seed: int) -> tuple[bool, str]:
    worst, count = 0.0, 0
    for i, variant in enumerate(VARIANTS):
        errs = variant_gradcheck(variant, seed + i)
        worst = max(worst, *errs.values())
        count += len(errs)
    return worst < GRAD_TOL, f"{count} parameter tensors over {len(VARIANTS)} variants, max rel err {worst:.2e}"


def dense_mixture_oracle(router: DynamicRouter, experts, z: np.ndarray, m_type: np.ndarray) -> np.ndarray:
    """Per-token loop: softmax over all experts, weighted sum of B A z."""
    feats = m_type.astype(np.float64)
    out = np.zeros_like(z)
    w, b = router.proj.weight.data, router.proj.bias.data
    for i, j in itertools.product(range(z.shape[0]), range(z.shape[1])):
        u = np.concatenate([z[i, j], feats[i]]) @ w + b
        u = _gelu(u)
        logits = u @ router.w_t.data
        p = np.exp(logits - logits.max())
        p /= p.sum()
        out[i, j] = sum(p[k] * (z[i, j] @ e.A.data @ e.B.data) for k, e in enumerate(experts))
    return out


def _gelu(u: np.ndarray) -> np.ndarray:
    return np.array([0.5 * v * (1.0 + erf(v / sqrt(2.0))) for v in u])


def check_dense_oracle(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    d, n = 6, 3
    router = DynamicRouter(d, 2, n, n, rng)
    experts = [LoraExpert(d, 2, rng) for _ in range(n)]
    for e in experts:
        e.B.data[:] = rng.standard_normal(e.B.shape)
    z = rng.standard_normal((3, 4, d))
    m_type = np.array([[1, 1], [1, 0], [0, 1]], dtype=bool)
    gates, _ = router.route(nc.Tensor(z), m_type)
    got = mix_experts(experts, gates, nc.Tensor(z)).data
    err = float(np.abs(got - dense_mixture_oracle(router, experts, z, m_type)).max())
    return err < 1e-10, f"K=N vs dense oracle, max abs diff {err:.1e}"


def check_sparsity(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    bad = 0
    for n, k in ((2, 1), (4, 2), (5, 3)):
        router = DynamicRouter(8, 2, n, k, rng)
        z = nc.Tensor(rng.standard_normal((50, 20, 8)))
        pats = rng.integers(0, 2, (50, 2)).astype(bool)
        pats[~pats.any(1), 0] = True
        gates, _ = router.route(z, pats)
        bad += int(((gates.data != 0).sum(-1) != k).sum())
    return bad == 0, f"3000 tokens, {bad} with a nonzero-gate count != K"


def check_metrics(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        c = int(rng.integers(2, 11))
        n = int(rng.integers(1, 60))
        t, p = rng.integers(0, c, n), rng.integers(0, c, n)
        cm = confusion_matrix(t, p, c)
        oa = sum(int(a == b) for a, b in zip(t, p)) / n
        pe = sum(sum(int(a == k) for a in t) * sum(int(b == k) for b in p) for k in range(c)) / n / n
        kappa = 0.0 if pe == 1 else (oa - pe) / (1 - pe)
        f1s = []
        for k in range(c):
            tp = sum(int(a == k and b == k) for a, b in zip(t, p))
            fp = sum(int(a != k and b == k) for a, b in zip(t, p))
            fn = sum(int(a == k and b != k) for a, b in zip(t, p))
            f1s.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = (overall_accuracy(cm), cohens_kappa(cm), f1_macro(cm))
        worst = max(worst, abs(got[0] - oa), abs(got[1] - kappa), abs(got[2] - float(np.mean(f1s))))
    hand = confusion_matrix([0, 0, 1, 1], [0, 0, 0, 1], 2)
    ok_hand = overall_accuracy(hand) == 0.75 and abs(cohens_kappa(hand) - 0.5) < 1e-15
    return worst < 1e-12 and ok_hand, f"200 random labelings, max diff {worst:.1e}; hand case {'ok' if ok_hand else 'wrong'}"


def check_missing_counts(seed: int) -> tuple[bool, str]:
    ds = MultimodalDataset([np.zeros((1000, 1, 1)), np.zeros((1000, 1, 1))], np.arange(1000) % 2, 2)
    out = apply_missing_protocol(ds, 0.7, "both", seed=seed)
    counts = out.pattern_counts()
    got = (counts.get((False, True), 0), counts.get((True, False), 0), counts.get((True, True), 0))
    again = apply_missing_protocol(ds, 0.7, "both", seed=seed).patterns
    ok = got == (350, 350, 300) and np.array_equal(again, out.patterns) and out.patterns.any(1).all()
    return ok, f"miss-0/miss-1/complete = {got}"


def check_ablation_exactness(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    z = nc.Tensor(rng.standard_normal((3, 5, cfg.d_model)))
    ctx = RoutingContext(np.array([0, 0, 1, 1, 1]), np.array([[1, 1], [1, 0], [0, 1]], dtype=bool))
    full = MaMOLLayer(cfg, 2, seed, "selftest")
    for _, p in full.named_parameters():
        p.data += rng.standard_normal(p.shape)
    results = []
    families = {
        "dynamic": (dict(use_dynamic=False), lambda n: n.startswith("dynamic.experts")),
        "static": (dict(use_shared=False, use_modality_specific=False), lambda n: n.startswith("static.")),
        "modality_specific": (dict(use_modality_specific=False), lambda n: n.startswith("static.specific")),
    }
    for name, (flags, member) in families.items():
        ablated = MaMOLLayer(dataclasses.replace(cfg, **flags), 2, seed, "selftest")
        own = dict(ablated.named_parameters())
        zeroed = MaMOLLayer(cfg, 2, seed, "selftest")
        for (n, p), (_, src) in zip(zeroed.named_parameters(), full.named_parameters()):
            p.data[...] = 0.0 if member(n) and n.endswith(".B") else src.data
            if n in own:
                own[n].data[...] = src.data
        results.append(np.array_equal(ablated(z, ctx).data, zeroed(z, ctx).data))
    return all(results), "bitwise equal for " + ", ".join(f"{k}={'yes' if r else 'no'}" for k, r in zip(families, results))


def check_freezing(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    shapes = [(2, 3), (3, 2)]
    n = 24
    feats = [rng.standard_normal((n, t, d)) for t, d in shapes]
    ds = MultimodalDataset(feats, np.arange(n) % 3, 3)
    ds = apply_missing_protocol(ds, 0.5, seed=seed)
    model = build_model(tiny_config(init_seed=seed), shapes, 3)
    before = model.frozen_checksum()
    train(model, ds, TrainConfig(total_steps=20, batch_size=8, seed=seed))
    return model.frozen_checksum() == before, "frozen checksum unchanged after 20 steps"


CHECKS: list[tuple[str, Callable[[int], tuple[bool, str]]]] = [
    ("numcore op gradients", check_op_gradients),
    ("model parameter gradients", check_model_gradients),
    ("dense mixture oracle", check_dense_oracle),
    ("top-k sparsity", check_sparsity),
    ("metric oracles", check_metrics),
    ("missing protocol counts", check_missing_counts),
    ("ablation exactness", check_ablation_exactness),
    ("freezing contract", check_freezing),
]


def run_selftest(seed: int = 0) -> dict:
    t0 = time.perf_counter()
    checks = []
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # noqa: BLE001 - reported as a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        checks.append({"name": name, "ok": bool(ok), "detail": detail,
                       "seconds": round(time.perf_counter() - start, 3)})
    return {"ok": all(c["ok"] for c in checks), "checks": checks, "seconds": time.perf_counter() - t0}

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mamol import numcore as nc
from mamol.config import ModelConfig, TrainConfig
from mamol.datagen import MultimodalDataset, apply_missing_protocol
from mamol.errors import TrainingError, ValidationError
from mamol.model import build_model
from mamol.trainer import OptimizerState, adam_step, lr_at_step, overfit_gate, train, warmup_steps

VARIANTS = ["baseline_frozen", "moe_rep", "moe_ada", "moe_task", "mamol"]


def small_set(n=48, seed=0, classes=3, eta=0.5):
    rng = np.random.default_rng(seed)
    ds = MultimodalDataset([rng.standard_normal((n, 3, 5)), rng.standard_normal((n, 2, 4))],
                           np.arange(n) % classes, classes)
    return apply_missing_protocol(ds, eta, seed=seed) if eta else ds


def small_model(variant="mamol", classes=3, seed=0):
    cfg = ModelConfig(variant=variant, d_model=8, d_ff=16, num_heads=2, num_layers=2, injection_layers=[2],
                      init_seed=seed)
    return build_model(cfg, [(3, 5), (2, 4)], classes)


# ---------------------------------------------------------------- schedule

def test_lr_examples():
    w = warmup_steps(1000, 0.1)
    assert w == 100
    assert lr_at_step(w, 1000, 2e-3, 0.1) == 2e-3
    assert lr_at_step(1000, 1000, 2e-3, 0.1) == 0.0
    assert lr_at_step(50, 1000, 2e-3, 0.1) == pytest.approx(1e-3, abs=1e-18)
    assert lr_at_step(0, 1000, 2e-3, 0.1) == 0.0


def test_lr_errors():
    with pytest.raises(ValidationError):
        lr_at_step(0, 0, 2e-3, 0.1)
    with pytest.raises(ValidationError):
        lr_at_step(11, 10, 2e-3, 0.1)
    with pytest.raises(ValidationError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)


def test_warmup_rounds_half_up():
    assert warmup_steps(25, 0.1) == 3
    assert warmup_steps(15, 0.1) == 2
    assert warmup_steps(10, 0.0) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.floats(0, 0.95), st.floats(1e-5, 1.0))
def test_lr_continuous_and_nonnegative(total, frac, base):
    w = warmup_steps(total, frac)
    lrs = np.array([lr_at_step(s, total, base, frac) for s in range(total + 1)])
    assert np.all(lrs >= 0) and lrs.max() <= base * (1 + 1e-12)
    # piecewise linear: neighbouring values differ by at most one slope step
    slope = base / max(1, min(w, total - w) if w else total - w)
    assert np.all(np.abs(np.diff(lrs)) <= slope * (1 + 1e-9) + 1e-15)
    # the two pieces meet at the peak
    if 0 < w < total:
        assert lrs[w] == base


# ---------------------------------------------------------------- adam

def hand_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Scalar Adam recurrence written out term by term."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta * (1 - lr * wd)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def test_adam_zero_gradient_is_a_no_op():
    p = nc.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    adam_step([("p", p)], {"p": np.zeros(2)}, OptimizerState(), lr=1e-2)
    assert p.data.tolist() == [1.5, -2.0]


def test_adam_first_step_is_lr():
    p = nc.Tensor(np.array([0.25]), requires_grad=True)
    adam_step([("p", p)], {"p": np.ones(1)}, OptimizerState(), lr=1e-3)
    assert p.data[0] == pytest.approx(0.25 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_pure_decay():
    p = nc.Tensor(np.array([3.0]), requires_grad=True)
    adam_step([("p", p)], {"p": np.zeros(1)}, OptimizerState(), lr=2e-3, weight_decay=2e-2)
    assert p.data[0] == 3.0 * (1 - 2e-3 * 2e-2)


def test_adam_matches_hand_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(12)
    p = nc.Tensor(np.array([0.7]), requires_grad=True)
    state = OptimizerState()
    for g in grads:
        adam_step([("p", p)], {"p": np.array([g])}, state, lr=5e-3, weight_decay=1e-2)
    assert state.step == 12
    assert abs(p.data[0] - hand_adam(0.7, grads, 5e-3, wd=1e-2)) < 1e-14


def test_adam_coupled_decay_folds_into_gradient():
    p = nc.Tensor(np.array([2.0]), requires_grad=True)
    adam_step([("p", p)], {"p": np.zeros(1)}, OptimizerState(), lr=1e-3, weight_decay=0.1, decay_mode="coupled")
    # gradient becomes wd * theta, so the first step is still a full lr step
    assert p.data[0] == pytest.approx(2.0 - 1e-3, abs=1e-10)


def test_adam_skips_frozen_and_rejects_nan():
    frozen = nc.Tensor(np.array([1.0]))
    adam_step([("f", frozen)], {"f": np.ones(1)}, OptimizerState(), lr=1.0)
    assert frozen.data[0] == 1.0
    p = nc.Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(TrainingError, match="encoders.0.weight"):
        adam_step([("encoders.0.weight", p)], {"encoders.0.weight": np.array([0.0, np.nan, 1.0])},
                  OptimizerState(), lr=1e-3)


# ---------------------------------------------------------------- train loop

def test_train_is_deterministic():
    logs, params = [], []
    for _ in range(2):
        model = small_model()
        res = train(model, small_set(), TrainConfig(epochs=3, batch_size=16))
        logs.append(res.jsonl())
        params.append({n: p.data.copy() for n, p in model.named_parameters()})
    assert logs[0] == logs[1]
    assert all(np.array_equal(params[0][n], params[1][n]) for n in params[0])


def test_train_log_records():
    res = train(small_model(), small_set(), TrainConfig(epochs=2, batch_size=16))
    lines = [json.loads(line) for line in res.jsonl().splitlines()]
    epochs = [r for r in lines if not r.get("final")]
    assert [r["epoch"] for r in epochs] == [1, 2]
    assert res.total_steps == 6 and epochs[-1]["step"] == 6
    for r in epochs:
        assert {"step", "epoch", "loss", "lr", "expert_usage"} <= set(r)
        assert np.isfinite(r["loss"])
    # one histogram per usage-tracking module, counts over tokens of the epoch
    usage = epochs[0]["expert_usage"]
    assert usage and sum(usage[0]) > 0
    assert lines[-1]["final"] and 0.0 <= lines[-1]["train_accuracy"] <= 1.0


def test_total_steps_override_and_final_lr():
    res = train(small_model(), small_set(), TrainConfig(total_steps=5, batch_size=16))
    epochs = [r for r in res.log if not r.get("final")]
    assert epochs[-1]["step"] == 5 and epochs[-1]["lr"] == 0.0
    assert [r["epoch"] for r in epochs] == [1, 2]


def test_train_validation_errors():
    with pytest.raises(ValidationError):
        train(small_model(), small_set().subset(np.array([], dtype=int)), TrainConfig())
    with pytest.raises(ValidationError):
        train(small_model(classes=4), small_set(), TrainConfig())


def test_only_trainable_parameters_move():
    model = small_model("moe_task")
    before = {n: p.data.copy() for n, p in model.frozen_parameters()}
    checksum = model.frozen_checksum()
    train(model, small_set(), TrainConfig(epochs=2, batch_size=16))
    assert model.frozen_checksum() == checksum
    assert all(np.array_equal(p.data, before[n]) for n, p in model.frozen_parameters())


@pytest.mark.parametrize("variant", VARIANTS)
def test_single_batch_overfit(variant):
    rng = np.random.default_rng(3)
    ds = MultimodalDataset([rng.standard_normal((16, 4, 12)) for _ in range(2)], rng.integers(0, 6, 16), 6)
    model = build_model(ModelConfig(variant=variant), ds.shapes, 6)
    step, acc = overfit_gate(model, ds)
    assert step is not None and step <= 500 and acc >= 0.99

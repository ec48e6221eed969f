import dataclasses
from math import erf, sqrt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mamol import numcore as nc
from mamol.backbone import RoutingContext
from mamol.config import ModelConfig
from mamol.errors import ValidationError
from mamol.mamol import (
    DynamicRouter,
    LoraExpert,
    MaMOLLayer,
    StaticExpertBank,
    expert_param_count,
    mamol_forward,
    mix_experts,
    paper_shaped_config,
    static_coefficients,
    top_k_gates,
)
from mamol.model import build_model
from mamol.selftest import check_ablation_exactness, model_gradcheck

BOTH = np.array([[True, True], [True, False], [False, True]])


def live(expert, rng):
    expert.B.data[:] = rng.standard_normal(expert.B.shape)
    return expert


def oracle_mixture(router, experts, z, m_type):
    """Independent per-token dense mixture with scalar GELU and explicit softmax."""
    w, b, wt = router.proj.weight.data, router.proj.bias.data, router.w_t.data
    out = np.zeros_like(z)
    for i in range(z.shape[0]):
        for t in range(z.shape[1]):
            u = np.concatenate([z[i, t], m_type[i].astype(float)]) @ w + b
            u = np.array([0.5 * v * (1 + erf(v / sqrt(2))) for v in u])
            logit = u @ wt
            p = np.exp(logit - logit.max())
            p = p / p.sum()
            out[i, t] = sum(p[k] * (z[i, t] @ e.A.data @ e.B.data) for k, e in enumerate(experts))
    return out


# ---------------------------------------------------------------- routing


@pytest.mark.parametrize("normalization,gate", [("renormalize", 1.0), ("raw", 0.5)])
def test_zero_router_selects_first_expert(normalization, gate):
    router = DynamicRouter(6, 2, 2, 1, np.random.default_rng(0), normalization=normalization)
    router.w_t.data[:] = 0
    z = nc.Tensor(np.random.default_rng(1).standard_normal((3, 4, 6)))
    gates, idx = router.route(z, BOTH)
    assert np.all(router.last_probs.data == 0.5)
    assert np.all(idx == 0)
    assert np.all(gates.data[..., 0] == gate) and np.all(gates.data[..., 1] == 0)


@pytest.mark.parametrize("normalization", ["renormalize", "raw"])
def test_full_k_equals_dense_mixture(normalization):
    rng = np.random.default_rng(2)
    d, n = 6, 3
    router = DynamicRouter(d, 2, n, n, rng, normalization=normalization)
    experts = [live(LoraExpert(d, 2, rng), rng) for _ in range(n)]
    z = rng.standard_normal((3, 4, d))
    gates, _ = router.route(nc.Tensor(z), BOTH)
    assert np.allclose(gates.data, router.last_probs.data, atol=1e-15, rtol=0)
    got = mix_experts(experts, gates, nc.Tensor(z)).data
    assert np.abs(got - oracle_mixture(router, experts, z, BOTH)).max() < 1e-12


def test_pattern_alone_changes_selection():
    d = 4
    router = DynamicRouter(d, 2, 2, 1, np.random.default_rng(0), d_router=2)
    w = np.zeros((d + 2, 2))
    w[d, 0] = w[d + 1, 1] = 5.0  # pattern bits drive the router features
    router.proj.weight.data[:] = w
    router.proj.bias.data[:] = 0
    router.w_t.data[:] = np.eye(2)
    z = np.tile(np.random.default_rng(3).standard_normal((1, 3, d)), (2, 1, 1))
    _, idx = router.route(nc.Tensor(z), np.array([[True, False], [False, True]]))
    assert np.all(idx[0] == 0) and np.all(idx[1] == 1)


def test_exactly_k_nonzero_over_many_tokens():
    rng = np.random.default_rng(4)
    tokens = 0
    for n, k in ((2, 1), (3, 2), (5, 2), (4, 4)):
        for normalization in ("renormalize", "raw"):
            router = DynamicRouter(8, 2, n, k, rng, normalization=normalization)
            pats = rng.integers(0, 2, (64, 2)).astype(bool)
            pats[~pats.any(1), 1] = True
            gates, idx = router.route(nc.Tensor(rng.standard_normal((64, 20, 8))), pats)
            assert np.all((gates.data != 0).sum(-1) == k)
            assert np.all(gates.data >= 0)
            if normalization == "renormalize":
                assert np.allclose(gates.data.sum(-1), 1.0, atol=1e-12)
            tokens += 64 * 20
    assert tokens >= 10_000


def test_top_k_ties_prefer_lower_index():
    probs = nc.Tensor(np.array([[0.25, 0.25, 0.25, 0.25]]))
    gates, idx = top_k_gates(probs, 2)
    assert idx.tolist() == [[0, 1]]
    assert gates.data.tolist() == [[0.5, 0.5, 0.0, 0.0]]
    with pytest.raises(ValidationError):
        top_k_gates(probs, 5)


def test_selection_carries_no_gradient_but_values_do():
    probs = nc.Tensor(np.array([[0.6, 0.3, 0.1]]), requires_grad=True)
    gates, _ = top_k_gates(probs, 2, "raw")
    nc.backward(nc.sum(nc.mul(gates, nc.Tensor([1.0, 2.0, 3.0]))))
    assert probs.grad.tolist() == [[1.0, 2.0, 0.0]]


def test_all_zero_pattern_rejected():
    router = DynamicRouter(4, 2, 2, 1, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        router.route(nc.Tensor(np.zeros((1, 2, 4))), np.array([[False, False]]))


def test_sample_granularity_routes_whole_sample():
    rng = np.random.default_rng(5)
    router = DynamicRouter(6, 2, 3, 1, rng, granularity="sample")
    _, idx = router.route(nc.Tensor(rng.standard_normal((4, 5, 6))), np.ones((4, 2), dtype=bool))
    assert np.all(idx == idx[:, :1])


def test_onehot_pattern_encoding_builds():
    router = DynamicRouter(6, 3, 2, 1, np.random.default_rng(0), pattern_encoding="onehot")
    assert router.proj.weight.shape == (6 + 7, 3)
    pats = np.array([[True, False, True]])
    gates, _ = router.route(nc.Tensor(np.ones((1, 2, 6))), pats)
    assert gates.shape == (1, 2, 2)


# ---------------------------------------------------------------- experts


def test_lora_rank_bound():
    rng = np.random.default_rng(6)
    for d in (4, 6, 8):
        for r in range(1, d // 2 + 1):
            e = live(LoraExpert(d, r, rng), rng)
            s = np.linalg.svd(e.A.data @ e.B.data, compute_uv=False)
            assert int((s > 1e-10 * s[0]).sum()) <= r
    with pytest.raises(ValidationError):
        LoraExpert(8, 5, rng)


def test_lora_init_has_zero_residual():
    e = LoraExpert(32, 4, np.random.default_rng(0))
    assert np.all(e.B.data == 0)
    assert abs(e.A.data.std() - 1 / np.sqrt(32)) < 0.03
    assert e.num_params() == 256


def test_dynamic_degenerate_cases():
    rng = np.random.default_rng(7)
    z = nc.Tensor(rng.standard_normal((3, 4, 6)))
    router = DynamicRouter(6, 2, 2, 1, rng)
    experts = [live(LoraExpert(6, 2, rng), rng) for _ in range(2)]
    for e in experts:
        e.A.data[:] = 0
    gates, _ = router.route(z, BOTH)
    assert np.all(mix_experts(experts, gates, z).data == 0)
    one = DynamicRouter(6, 2, 1, 1, rng)
    e = live(LoraExpert(6, 2, rng), rng)
    gates, _ = one.route(z, BOTH)
    assert np.all(gates.data == 1.0)
    assert np.array_equal(mix_experts([e], gates, z).data, (z.data @ e.A.data @ e.B.data) * 1.0)


def _static_ctx():
    return RoutingContext(np.array([0, 0, 1, 1]), BOTH)


def test_static_coefficients_rules():
    tok = np.array([0, 0, 1])
    pats = np.array([[True, False]])
    assert static_coefficients(tok, pats, 0, "present").tolist() == [[1, 1, 0]]
    assert static_coefficients(tok, pats, 1, "present").tolist() == [[0, 0, 0]]
    assert static_coefficients(tok, pats, 1, "absent").tolist() == [[0, 0, 1]]
    assert static_coefficients(tok, pats, 1, "always").tolist() == [[0, 0, 1]]


def test_static_missing_modality_gets_shared_only():
    rng = np.random.default_rng(8)
    cfg = ModelConfig(d_model=6, num_heads=2, lora_rank=2)
    bank = StaticExpertBank(cfg, 2, rng)
    for e in [bank.shared, *bank.specific]:
        live(e, rng)
    z = rng.standard_normal((3, 4, 6))
    out = bank(nc.Tensor(z), _static_ctx()).data
    sh = z @ bank.shared.A.data @ bank.shared.B.data
    # sample 1 misses modality 1: its modality-1 tokens see only the shared expert
    assert np.array_equal(out[1, 2:], sh[1, 2:])
    assert not np.allclose(out[0, 2:], sh[0, 2:])


def test_static_hand_calculation():
    rng = np.random.default_rng(9)
    cfg = ModelConfig(d_model=2, num_heads=1, lora_rank=1)
    bank = StaticExpertBank(cfg, 2, rng)
    bank.shared.A.data[:] = [[1.0], [2.0]]
    bank.shared.B.data[:] = [[0.5, -1.0]]
    bank.specific[0].A.data[:] = [[-1.0], [1.0]]
    bank.specific[0].B.data[:] = [[2.0, 3.0]]
    bank.specific[1].B.data[:] = [[7.0, 7.0]]
    z = np.array([[[3.0, 4.0], [1.0, 1.0]]])
    ctx = RoutingContext(np.array([0, 1]), np.array([[True, True]]))
    out = bank(nc.Tensor(z), ctx).data
    # token 0 (modality 0): shared (3+8)*[0.5,-1] + specific0 (-3+4)*[2,3]
    assert out[0, 0].tolist() == [5.5 + 2.0, -11.0 + 3.0]


def test_static_zero_and_index_errors():
    rng = np.random.default_rng(10)
    bank = StaticExpertBank(ModelConfig(d_model=6, num_heads=2, lora_rank=2), 2, rng)
    for e in [bank.shared, *bank.specific]:
        live(e, rng)
        e.A.data[:] = 0
    z = nc.Tensor(rng.standard_normal((3, 4, 6)))
    assert np.all(bank(z, _static_ctx()).data == 0)
    with pytest.raises(IndexError):
        bank(z, RoutingContext(np.array([0, 0, 1, 2]), BOTH))


# ---------------------------------------------------------------- aggregation


def _layer(cfg, seed=0):
    rng = np.random.default_rng(seed + 100)
    layer = MaMOLLayer(cfg, 2, seed, "t")
    for _, p in layer.named_parameters():
        p.data += rng.standard_normal(p.shape)
    return layer


def test_delta_is_sum_of_banks():
    cfg = ModelConfig(d_model=6, num_heads=2, lora_rank=2)
    layer = _layer(cfg)
    z = nc.Tensor(np.random.default_rng(1).standard_normal((3, 4, 6)))
    ctx = _static_ctx()
    dyn, stat = layer.dynamic_forward(z, ctx).data, layer.static_forward(z, ctx).data
    assert np.array_equal(mamol_forward(layer, z, ctx).data, dyn + stat)


def test_single_family_configurations():
    cfg = ModelConfig(d_model=6, num_heads=2, lora_rank=2)
    z = nc.Tensor(np.random.default_rng(1).standard_normal((3, 4, 6)))
    ctx = _static_ctx()
    full = _layer(cfg)
    no_dyn = MaMOLLayer(dataclasses.replace(cfg, use_dynamic=False), 2, 0, "t")
    no_stat = MaMOLLayer(dataclasses.replace(cfg, use_shared=False, use_modality_specific=False), 2, 0, "t")
    src = dict(full.named_parameters())
    for m in (no_dyn, no_stat):
        for n, p in m.named_parameters():
            p.data[...] = src[n].data
    assert np.array_equal(no_dyn(z, ctx).data, full.static_forward(z, ctx).data)
    assert np.array_equal(no_stat(z, ctx).data, full.dynamic_forward(z, ctx).data)
    empty = MaMOLLayer(dataclasses.replace(cfg, use_dynamic=False, use_shared=False,
                                           use_modality_specific=False), 2, 0, "t")
    assert np.all(empty(z, ctx).data == 0)


def test_ablation_exactness_bitwise():
    for seed in range(5):
        ok, detail = check_ablation_exactness(seed)
        assert ok, detail


def test_zero_banks_reduce_to_layer_norm_of_frozen_output():
    cfg = ModelConfig(d_model=16, d_ff=16, lora_rank=2)
    model = build_model(cfg, [(2, 3), (2, 3)], 3)
    rng = np.random.default_rng(0)
    from mamol.datagen import ModalityBatch

    batch = ModalityBatch([rng.standard_normal((3, 2, 3)) for _ in range(2)], BOTH, np.zeros(3, int))
    taps = []
    model(batch, taps)
    for layer, t in taps[0].items():
        assert np.all(t["delta"].data == 0)
        ln = model.hooks[0].norm(layer)
        expect = nc.layer_norm(t["h_frozen"], ln.gamma, ln.beta, cfg.ln_eps).data
        assert np.array_equal(t["h_layer"].data, expect)


# ---------------------------------------------------------------- gradients and budget


@pytest.mark.parametrize("overrides", [
    {}, {"gate_normalization": "renormalize", "top_k": 2, "num_dynamic_experts": 3},
    {"routing_granularity": "sample"}, {"pattern_encoding": "onehot"},
    {"static_gate_rule": "absent"}, {"substitution": "learnable_placeholder"},
    {"trunk_mode": "per_modality"},
])
def test_mamol_gradients(overrides):
    errs = model_gradcheck("mamol", 3, **overrides)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10**6))
def test_mamol_gradients_random_seeds(seed):
    assert max(model_gradcheck("mamol", seed).values()) < 1e-4


def test_param_budget():
    cfg = ModelConfig()
    model = build_model(cfg, [(4, 12), (4, 12)], 6)
    s = model.param_summary()
    assert s["adaptation"] == expert_param_count(cfg, 2)
    assert s["trainable"] / s["total"] < 0.15
    big = expert_param_count(paper_shaped_config(), 2)
    assert abs(big - 3.6e6) / 3.6e6 < 0.02


@pytest.mark.parametrize("flags", [
    dict(use_dynamic=False), dict(use_shared=False), dict(use_modality_specific=False),
    dict(trunk_mode="per_modality"), dict(pattern_encoding="onehot"),
])
def test_param_count_matches_construction(flags):
    cfg = ModelConfig(**flags)
    model = build_model(cfg, [(4, 12), (4, 12)], 6)
    assert model.param_summary()["adaptation"] == expert_param_count(cfg, 2)


def test_expert_usage_counts_tokens():
    cfg = ModelConfig(d_model=8, d_ff=8, num_heads=2, lora_rank=2)
    model = build_model(cfg, [(2, 3), (3, 3)], 3)
    from mamol.datagen import ModalityBatch

    rng = np.random.default_rng(0)
    model(ModalityBatch([rng.standard_normal((3, 2, 3)), rng.standard_normal((3, 3, 3))], BOTH, np.zeros(3, int)))
    usage = model.expert_usage()
    assert len(usage) == len(cfg.injection_layers)
    assert all(sum(u) == 3 * 5 * cfg.top_k for u in usage)
    model.reset_usage()
    assert all(sum(u) == 0 for u in model.expert_usage())

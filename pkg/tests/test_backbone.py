import dataclasses
from math import erf, sqrt

import numpy as np
import pytest

from mamol import numcore as nc
from mamol.backbone import ModalityEncoder, RoutingContext, Trunk, encode_modality, trunk_forward
from mamol.config import ModelConfig, TrainConfig
from mamol.datagen import ModalityBatch, MultimodalDataset, apply_missing_protocol
from mamol.errors import DimensionError
from mamol.layers import LayerNorm
from mamol.model import build_model
from mamol.trainer import train


class ZeroHook:
    """Injects dh = 0 at the listed layers, wrapped in an identity-affine LayerNorm."""

    def __init__(self, layers, d, shape_bug=False):
        self.layers = frozenset(layers)
        self._ln = LayerNorm(d)
        self._bug = shape_bug

    def residual(self, layer, z, ctx):
        shape = z.shape[:-1] + (z.shape[-1] + 1,) if self._bug else z.shape
        return nc.Tensor(np.zeros(shape))

    def norm(self, layer):
        return self._ln


def _ln(v, g, b, eps):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / sqrt(var + eps) * gi + bi for x, gi, bi in zip(v, g, b)]


def _gelu(x):
    return 0.5 * x * (1 + erf(x / sqrt(2)))


def hand_block(blk, tokens, eps):
    """Scalar-loop pre-norm block at one head: attention, then FFN."""
    W = lambda lin: (lin.weight.data.tolist(), lin.bias.data.tolist())  # noqa: E731
    (wqkv, bqkv), (wo, bo), (w1, b1), (w2, b2) = W(blk.qkv), W(blk.out), W(blk.ff1), W(blk.ff2)
    d = len(tokens[0])

    def affine(v, w, b):
        return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]

    normed = [_ln(t, blk.ln1.gamma.data, blk.ln1.beta.data, eps) for t in tokens]
    qkv = [affine(t, wqkv, bqkv) for t in normed]
    q = [r[:d] for r in qkv]
    k = [r[d:2 * d] for r in qkv]
    v = [r[2 * d:] for r in qkv]
    out = []
    for i in range(len(tokens)):
        s = [sum(a * b for a, b in zip(q[i], k[j])) / sqrt(d) for j in range(len(tokens))]
        mx = max(s)
        e = [np.exp(x - mx) for x in s]
        w = [x / sum(e) for x in e]
        ctx = [sum(w[j] * v[j][c] for j in range(len(tokens))) for c in range(d)]
        a = [x + y for x, y in zip(tokens[i], affine(ctx, wo, bo))]
        z = _ln(a, blk.ln2.gamma.data, blk.ln2.beta.data, eps)
        hidden = [_gelu(x) for x in affine(z, w1, b1)]
        out.append([x + y for x, y in zip(a, affine(hidden, w2, b2))])
    return out


def test_single_layer_trunk_matches_hand_calculation():
    cfg = ModelConfig(num_layers=1, d_model=2, d_ff=3, num_heads=1, injection_layers=[1], lora_rank=1)
    trunk = Trunk(cfg, seed=3)
    tokens = np.random.default_rng(0).standard_normal((1, 2, 2))
    got = trunk_forward(trunk, nc.Tensor(tokens)).data[0]
    block_out = hand_block(trunk.blocks[0], tokens[0].tolist(), cfg.ln_eps)
    fl = trunk.final_ln
    expect = np.array([_ln(t, fl.gamma.data, fl.beta.data, cfg.ln_eps) for t in block_out])
    assert np.abs(got - expect).max() < 1e-10


def test_zero_residual_hook_only_adds_layer_norm():
    cfg = ModelConfig(num_layers=3, d_model=8, d_ff=16, num_heads=2, injection_layers=[2])
    trunk = Trunk(cfg, seed=1)
    x = nc.Tensor(np.random.default_rng(1).standard_normal((2, 5, 8)))
    ctx = RoutingContext(np.zeros(5, dtype=int), np.ones((2, 2), dtype=bool))
    taps = {}
    hooked = trunk_forward(trunk, x, ZeroHook([2], 8), ctx, taps)
    plain = trunk_forward(trunk, x)
    assert not np.allclose(hooked.data, plain.data)
    h = taps[2]["h_frozen"].data
    layer = taps[2]["h_layer"].data
    assert np.abs(layer.mean(-1)).max() < 1e-12
    var = h.var(-1)
    assert np.allclose(layer.var(-1), var / (var + cfg.ln_eps), atol=1e-12)
    # layers outside the set are untouched: layer-1 output is identical
    a1 = trunk.blocks[0](x, 1)
    a1_hooked = trunk.blocks[0](x, 1, ZeroHook([2], 8), ctx)
    assert np.array_equal(a1.data, a1_hooked.data)


def test_hook_shape_error():
    cfg = ModelConfig(num_layers=1, d_model=4, d_ff=8, num_heads=1, injection_layers=[1], lora_rank=1)
    trunk = Trunk(cfg, seed=0)
    ctx = RoutingContext(np.zeros(2, dtype=int), np.ones((1, 2), dtype=bool))
    with pytest.raises(DimensionError):
        trunk_forward(trunk, nc.Tensor(np.ones((1, 2, 4))), ZeroHook([1], 4, shape_bug=True), ctx)


def test_encoder_examples():
    rng = np.random.default_rng(0)
    enc = ModalityEncoder(5, 4, rng)
    enc.weight.data[:] = 0
    out = encode_modality(enc, np.zeros((2, 3, 5)))
    assert np.array_equal(out.data, np.broadcast_to(enc.type_embedding.data, (2, 3, 4)))
    other = ModalityEncoder(5, 4, rng)
    other.weight.data[:] = enc.weight.data = rng.standard_normal((5, 4))
    x = rng.standard_normal((2, 3, 5))
    diff = encode_modality(enc, x).data - encode_modality(other, x).data
    assert np.allclose(diff, enc.type_embedding.data - other.type_embedding.data, atol=1e-15)
    with pytest.raises(DimensionError):
        encode_modality(enc, np.zeros((2, 3, 6)))


def test_encoder_gradient():
    rng = np.random.default_rng(4)
    enc = ModalityEncoder(3, 4, rng)
    x = rng.standard_normal((2, 3, 3))
    w = nc.Tensor(rng.standard_normal((2, 3, 4)))
    errs = nc.gradcheck(lambda: nc.sum(nc.mul(nc.tanh(enc(x)), w)), [enc.weight, enc.type_embedding])
    assert max(errs) < 1e-4


def _batch(rng, shapes, n=3):
    feats = [rng.standard_normal((n, t, d)) for t, d in shapes]
    pats = np.array([[True, True], [True, False], [False, True]])[:n]
    return ModalityBatch(feats, pats, np.zeros(n, dtype=int))


@pytest.mark.parametrize("variant", ["baseline_frozen", "mamol", "moe_task"])
def test_permutation_within_modality_block(variant):
    rng = np.random.default_rng(5)
    shapes = [(4, 6), (3, 5)]
    model = build_model(ModelConfig(variant=variant), shapes, 4)
    for _, p in model.trainable_parameters():
        p.data += 0.2 * rng.standard_normal(p.shape)
    b = _batch(rng, shapes)
    perm = rng.permutation(4)
    b2 = ModalityBatch([b.features[0][:, perm], b.features[1]], b.patterns, b.labels)
    assert np.abs(model(b).data - model(b2).data).max() < 1e-12


def test_pure_function_without_experts():
    cfg = ModelConfig(variant="baseline_frozen", injection_layers=[])
    model = build_model(cfg, [(2, 3), (2, 3)], 3)
    b = _batch(np.random.default_rng(0), [(2, 3), (2, 3)])
    assert np.array_equal(model(b).data, model(b).data)


def test_frozen_blocks_unchanged_after_training():
    rng = np.random.default_rng(6)
    shapes = [(3, 4), (2, 4)]
    ds = MultimodalDataset([rng.standard_normal((40, t, d)) for t, d in shapes], np.arange(40) % 3, 3)
    ds = apply_missing_protocol(ds, 0.5, seed=1)
    model = build_model(ModelConfig(d_model=16, d_ff=32), shapes, 3)
    before = {n: p.data.copy() for n, p in model.frozen_parameters()}
    assert all(n.startswith("towers.") for n in before)
    trainable_before = {n: p.data.copy() for n, p in model.trainable_parameters()}
    train(model, ds, TrainConfig(total_steps=10, batch_size=8))
    after = dict(model.frozen_parameters())
    assert all(np.array_equal(before[n], after[n].data) for n in before)
    # the experts did move
    moved = [n for n, p in model.trainable_parameters() if not np.array_equal(p.data, trainable_before[n])]
    assert any(n.startswith("hooks.") for n in moved)


def test_frozen_trunk_identical_across_variants():
    shapes = [(2, 3), (3, 2)]
    sums = {build_model(ModelConfig(variant=v, init_seed=9), shapes, 3).frozen_checksum()
            for v in ("baseline_frozen", "moe_rep", "moe_ada", "moe_task", "mamol")}
    assert len(sums) == 1


def test_per_modality_towers():
    cfg = ModelConfig(trunk_mode="per_modality", d_model=8, d_ff=8, num_heads=2)
    model = build_model(cfg, [(2, 3), (3, 2)], 3)
    assert len(model.towers) == 2
    out = model(_batch(np.random.default_rng(2), [(2, 3), (3, 2)]))
    assert out.shape == (3, 3)
    shared = build_model(dataclasses.replace(cfg, trunk_mode="shared"), [(2, 3), (3, 2)], 3)
    assert model.param_summary()["trainable"] > shared.param_summary()["trainable"]

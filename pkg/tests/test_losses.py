import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oret.losses import (
    LossConfig,
    SimilarityBatch,
    diversity_loss,
    diversity_mask,
    hardneg_weights,
    info_nce,
    phi,
    smooth_l1,
    total_loss,
    triplet_loss,
)
from oret.tensor_core import grad_check_many, traced_signature

import snapshot_fixtures as snap

pytestmark = pytest.mark.usefixtures("f64")


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def explicit(queries, candidates, pos, neg):
    return SimilarityBatch(t(queries), t(candidates), torch.tensor(pos), torch.tensor(neg, dtype=torch.long))


def unit(angle):
    return [math.cos(angle), math.sin(angle)]


def oracle_info_nce(q, c, pos, neg, cfg):
    """Per-query loss written out with plain floats."""
    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    total = 0.0
    for i in range(len(q)):
        p = cos(q[i], c[pos[i]]) / cfg.tau
        ns = [cos(q[i], c[j]) / cfg.tau for j in neg[i]]
        z = sum(math.exp(cfg.beta * n) for n in ns)
        w = [len(ns) * math.exp(cfg.beta * n) / z for n in ns]
        denom = math.exp(p) + sum(wi * math.exp(n) for wi, n in zip(w, ns))
        total += -math.log(math.exp(p) / denom)
    return total / len(q)


# config and batch

def test_loss_config_defaults_and_validation():
    cfg = LossConfig()
    assert (cfg.tau, cfg.beta, cfg.eta, cfg.mu1, cfg.mu2, cfg.gamma) == (0.07, 0.5, 0.1, 1.0, 0.1, 0.5)
    for bad in ({"tau": 0}, {"beta": -1}, {"eta": -0.1}, {"gamma": 0}, {"diversity_dropout": 1.0},
                {"triplet_reduction": "max"}):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_similarity_batch_validation():
    with pytest.raises(ValueError):
        explicit([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [0], [[0]])
    with pytest.raises(ValueError):
        SimilarityBatch(torch.zeros(0, 2), torch.zeros(1, 2), torch.zeros(0, dtype=torch.long),
                        torch.zeros(0, 1, dtype=torch.long))


def test_in_batch_negatives():
    b = SimilarityBatch.in_batch(torch.randn(4, 3), torch.randn(4, 3))
    assert b.positives.tolist() == [0, 1, 2, 3]
    assert b.negatives.tolist() == [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]


def test_in_batch_class_aware():
    labels = [0, 0, 1, 2, 2, 3]
    g1 = torch.Generator().manual_seed(5)
    g2 = torch.Generator().manual_seed(5)
    b = SimilarityBatch.in_batch(torch.randn(6, 3), torch.randn(6, 3), labels, g1)
    again = SimilarityBatch.in_batch(torch.randn(6, 3), torch.randn(6, 3), labels, g2)
    assert torch.equal(b.negatives, again.negatives)
    # rows with a same-label partner have 4 valid negatives, the rest 5
    assert b.negatives.shape == (6, 4)
    for i, row in enumerate(b.negatives.tolist()):
        assert len(set(row)) == 4
        assert all(labels[j] != labels[i] for j in row)


# phi and weights

def test_phi_examples():
    x = t([0.3, -1.0, 2.0])
    assert phi(x, x, 0.07).item() == pytest.approx(1 / 0.07, rel=1e-14)
    assert phi(t([1.0, 0.0]), t([0.0, 2.0]), 0.07).item() == 0.0
    assert phi(t(unit(0.0)), t(unit(math.pi / 3)), 0.5).item() == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValueError):
        phi(t([0.0, 0.0]), x[:2], 0.1)


def test_hardneg_weights_examples():
    assert torch.allclose(hardneg_weights(torch.full((5,), 3.0), 0.5), torch.ones(5), atol=1e-15)
    w = hardneg_weights(t([0.0, math.log(4) / 0.5]), 0.5)
    assert w.tolist() == pytest.approx([0.4, 1.6], abs=1e-12)


@settings(deadline=None, max_examples=100)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(0, 2), st.floats(-50, 50))
def test_hardneg_weights_sum_and_shift(vals, beta, c):
    x = t(vals)
    w = hardneg_weights(x, beta)
    assert w.sum().item() == pytest.approx(len(vals), abs=1e-9)
    assert torch.allclose(hardneg_weights(x + c, beta), w, atol=1e-10, rtol=0)


# info nce

def test_info_nce_zero_negatives():
    b = explicit([[1.0, 0.0]], [[0.5, 0.5]], [0], [[]])
    assert info_nce(b, LossConfig()).item() == 0.0


def test_info_nce_closed_form():
    b = explicit([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [0], [[1]])
    expect = math.log1p(math.exp(-1 / 0.07))
    val = info_nce(b, LossConfig()).item()
    assert abs(val - expect) <= 1e-9
    assert val == pytest.approx(expect, rel=1e-12)


def test_info_nce_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((5, 4)).tolist()
    c = rng.standard_normal((5, 4)).tolist()
    cfg = LossConfig(tau=0.5)
    b = SimilarityBatch.in_batch(t(q), t(c))
    neg = b.negatives.tolist()
    assert info_nce(b, cfg).item() == pytest.approx(oracle_info_nce(q, c, list(range(5)), neg, cfg), rel=1e-12)


def test_info_nce_duplicated_negatives():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((3, 4)).tolist()
    c = rng.standard_normal((3, 4)).tolist()
    cfg = LossConfig(tau=0.5)
    neg = [[j for j in range(3) if j != i] for i in range(3)]
    twice = [row + row for row in neg]
    a = info_nce(explicit(q, c, [0, 1, 2], neg), cfg).item()
    b = info_nce(explicit(q, c, [0, 1, 2], twice), cfg).item()
    assert b == pytest.approx(oracle_info_nce(q, c, [0, 1, 2], twice, cfg), rel=1e-12)
    # w renormalizes to |N|, so every listed copy carries its full weight again
    assert b > a


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_info_nce_non_negative(seed, b):
    g = torch.Generator().manual_seed(seed)
    batch = SimilarityBatch.in_batch(torch.randn(b, 5, generator=g), torch.randn(b, 5, generator=g))
    assert info_nce(batch, LossConfig()).item() >= 0.0


def test_scale_invariance():
    g = torch.Generator().manual_seed(2)
    q, c = torch.randn(5, 6, generator=g), torch.randn(5, 6, generator=g)
    cfg = LossConfig()
    base = SimilarityBatch.in_batch(q, c)
    for s in (0.25, 4.0, 1024.0):
        scaled = SimilarityBatch.in_batch(q * s, c * s)
        assert info_nce(scaled, cfg).item() == info_nce(base, cfg).item()
        assert triplet_loss(scaled, cfg).item() == triplet_loss(base, cfg).item()
    for s in (0.37, 13.0):
        scaled = SimilarityBatch.in_batch(q * s, c * s)
        assert info_nce(scaled, cfg).item() == pytest.approx(info_nce(base, cfg).item(), rel=1e-13)


# triplet

def test_triplet_examples():
    cfg = LossConfig()
    a = math.acos(0.9)
    b = math.acos(0.5)
    batch = explicit([unit(0.0)], [unit(a), unit(b)], [0], [[1]])
    assert triplet_loss(batch, cfg).item() == 0.0
    same = explicit([unit(0.0)], [unit(0.3), unit(-0.3)], [0], [[1]])
    assert triplet_loss(same, cfg).item() == pytest.approx(0.1, abs=1e-12)
    three = explicit([unit(0.0)], [unit(0.3), unit(-0.3), unit(0.3), unit(-0.3)], [0], [[1, 2, 3]])
    assert triplet_loss(three, cfg).item() == pytest.approx(0.3, abs=1e-12)
    mean = LossConfig(triplet_reduction="mean")
    assert triplet_loss(three, mean).item() == pytest.approx(0.1, abs=1e-12)
    none = explicit([unit(0.0)], [unit(0.3)], [0], [[]])
    assert triplet_loss(none, cfg).item() == 0.0


def test_triplet_raw_cosine_option():
    batch = explicit([unit(0.0)], [unit(math.acos(0.9)), unit(math.acos(0.85))], [0], [[1]])
    assert triplet_loss(batch, LossConfig()).item() == 0.0
    raw = triplet_loss(batch, LossConfig(triplet_raw_cosine=True)).item()
    assert raw == pytest.approx(0.1 - 0.05, abs=1e-12)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_triplet_zero_when_margin_met(seed):
    g = torch.Generator().manual_seed(seed)
    batch = SimilarityBatch.in_batch(torch.randn(4, 5, generator=g), torch.randn(4, 5, generator=g))
    cfg = LossConfig(tau=1.0, eta=0.05)
    q = torch.nn.functional.normalize(batch.queries, dim=-1)
    c = torch.nn.functional.normalize(batch.candidates, dim=-1)
    sim = q @ c.T
    gap = (sim.diagonal()[:, None] - sim.gather(1, batch.negatives)).min(1).values
    per = [triplet_loss(SimilarityBatch(batch.queries[i:i + 1], batch.candidates, torch.tensor([i]),
                                        batch.negatives[i:i + 1]), cfg).item() for i in range(4)]
    for g_i, p in zip(gap.tolist(), per):
        if g_i >= cfg.eta:
            assert p == 0.0


# diversity

def test_smooth_l1():
    assert smooth_l1(t([0.0, 0.4, 0.5, 1.0]), 0.5).tolist() == pytest.approx([0.0, 0.16, 0.25, 0.75])


def test_diversity_examples():
    cfg = LossConfig()
    q, _ = torch.linalg.qr(torch.randn(5, 5))
    assert diversity_loss(q[:3], cfg).item() == pytest.approx(0.0, abs=1e-14)
    same = t([[0.6, 0.8], [0.6, 0.8]])
    assert diversity_loss(same, cfg).item() == pytest.approx(0.375, abs=1e-9)
    a = math.acos(0.4)
    assert diversity_loss(t([unit(0.0), unit(a)]), cfg).item() == pytest.approx(0.08, abs=1e-9)
    # rows are normalized first
    assert diversity_loss(t([[3.0, 0.0], [7.0, 0.0]]), cfg).item() == pytest.approx(0.375, abs=1e-9)


def test_diversity_negative_cosine_free():
    cfg = LossConfig()
    assert diversity_loss(t([unit(0.0), unit(2.5)]), cfg).item() == 0.0


def test_diversity_row_permutation_and_sign_flip():
    cfg = LossConfig()
    m = torch.randn(5, 7)
    base = diversity_loss(m, cfg).item()
    assert diversity_loss(m[torch.randperm(5)], cfg).item() == pytest.approx(base, rel=1e-13)
    q, _ = torch.linalg.qr(torch.randn(7, 7))
    # three correlated rows plus one orthogonal to all of them
    rows = torch.cat([q[:3] + 0.3 * q[3:4], q[6:7]])
    flipped = rows.clone()
    flipped[-1] = -flipped[-1]
    assert diversity_loss(flipped, cfg).item() == pytest.approx(diversity_loss(rows, cfg).item(), rel=1e-13)


def test_diversity_batched():
    cfg = LossConfig()
    m = torch.randn(4, 3, 5)
    out = diversity_loss(m, cfg)
    assert out.shape == (4,)
    assert torch.allclose(out, torch.stack([diversity_loss(x, cfg) for x in m]), atol=1e-15)


def test_diversity_dropout_unbiased():
    cfg = LossConfig(diversity_dropout=0.5)
    g = torch.Generator().manual_seed(0)
    m = torch.randn(6, 4, generator=g)
    clean = diversity_loss(m, cfg).item()
    masks = diversity_mask((20000, 6, 6), cfg.diversity_dropout, g)
    avg = diversity_loss(m.expand(20000, 6, 4), cfg, masks).mean().item()
    assert abs(avg - clean) <= 0.02 * clean


def test_diversity_mask_rate():
    mask = diversity_mask((200, 50), 0.3, torch.Generator().manual_seed(0))
    assert set(mask.unique().tolist()) <= {0.0, 1.0}
    assert abs(mask.mean().item() - 0.7) < 0.01
    assert torch.equal(diversity_mask((3, 3), 0.0), torch.ones(3, 3))


# gradients

def _points(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield t(rng.standard_normal((4, 6))), t(rng.standard_normal((4, 6)))


def test_info_nce_gradients():
    cfg = LossConfig()
    worst = 0.0
    for q, c in _points(100, 0):
        f = lambda a, b: info_nce(SimilarityBatch.in_batch(a, b), cfg)
        worst = max(worst, grad_check_many(f, [q, c], 1e-5, rel_floor=1e-3))
    assert worst <= 1e-6


def test_triplet_gradients():
    cfg = LossConfig(eta=0.3, triplet_raw_cosine=True)
    worst = 0.0
    for q, c in _points(100, 1):
        f = lambda a, b: triplet_loss(SimilarityBatch.in_batch(a, b), cfg)
        worst = max(worst, grad_check_many(f, [q, c], 1e-5, signature=traced_signature(f)))
    assert worst <= 1e-6


def test_diversity_gradients_frozen_mask():
    cfg = LossConfig()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        m = t(rng.standard_normal((2, 4, 5)))
        mask = diversity_mask((2, 4, 4), 0.5, torch.Generator().manual_seed(i))
        f = lambda x: diversity_loss(x, cfg, mask).sum()
        worst = max(worst, grad_check_many(f, [m], 1e-5, signature=traced_signature(f)))
    assert worst <= 1e-6


# total

def test_total_loss_degenerate_weights():
    g = torch.Generator().manual_seed(3)
    batch = SimilarityBatch.in_batch(torch.randn(4, 5, generator=g), torch.randn(4, 5, generator=g))
    cfg = LossConfig(mu1=0.0, mu2=0.0)
    parts = total_loss(batch, [torch.randn(4, 3, 5, generator=g)], cfg)
    assert parts["total"].item() == info_nce(batch, cfg).item()


def test_total_loss_separable_batch():
    cfg = LossConfig()
    q = [unit(0.0), unit(math.pi / 2)]
    c = [unit(0.0), unit(math.pi / 2), unit(math.pi), unit(-math.pi / 2)]
    batch = explicit(q, c, [0, 1], [[2], [3]])
    tokens = torch.eye(4)[None, :3]
    parts = total_loss(batch, [tokens], cfg)
    for k in ("info_nce", "triplet", "diversity", "total"):
        assert 0.0 <= parts[k].item() <= 1e-6


def test_total_loss_snapshot():
    batch, media, cfg, masks = snap.loss_fixture()
    parts = total_loss(batch, media, cfg, masks=masks)
    rec = snap.load()["total_loss"]
    for k, v in rec.items():
        assert parts[k].item() == pytest.approx(v, rel=1e-12)
    assert parts["total"].item() == pytest.approx(
        rec["info_nce"] + cfg.mu1 * rec["triplet"] + cfg.mu2 * rec["diversity"], rel=1e-12
    )


def test_total_loss_masks_from_generator_deterministic():
    cfg = LossConfig()
    batch, media, _, _ = snap.loss_fixture()
    a = total_loss(batch, media, cfg, generator=torch.Generator().manual_seed(4))["total"].item()
    b = total_loss(batch, media, cfg, generator=torch.Generator().manual_seed(4))["total"].item()
    assert a == b

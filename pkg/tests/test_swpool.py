import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oret.oracle import monge_sweep
from oret.swpool import (
    ASWPool,
    SlicedPool,
    aswp_pool,
    brute_force_w2,
    induced_assignment,
    monge_coupling_1d,
    pswe_embed,
    slice_project,
    stm_select,
    stm_surrogate,
    stm_surrogate_at,
    unit_rows,
)
from oret.tensor_core import ShapeError, grad_check, grad_check_many, traced_signature

import snapshot_fixtures as snap

pytestmark = pytest.mark.usefixtures("f64")


def t(x):
    return torch.tensor(x, dtype=torch.float64)


# slice_project

def test_slice_project_basis():
    assert slice_project(torch.eye(3), t([1.0, 0.0, 0.0])).tolist() == [1.0, 0.0, 0.0]
    tok = torch.randn(5, 3)
    assert torch.equal(slice_project(tok, t([0.0, 1.0, 0.0])), tok[:, 1])


def test_slice_project_diagonal():
    r = 1 / math.sqrt(2)
    out = slice_project(t([[1.0, 1.0], [2.0, 0.0]]), t([r, r]))
    assert torch.allclose(out, t([math.sqrt(2)] * 2), atol=1e-15)


def test_slice_project_dim_mismatch():
    with pytest.raises(ShapeError):
        slice_project(torch.zeros(3, 2), torch.zeros(3))


# monge coupling

def test_monge_examples():
    assert monge_coupling_1d(t([3.0, 1.0, 2.0]), t([0.0, 1.0, 2.0])).tolist() == [1.0, 1.0, 1.0]
    x = torch.randn(6)
    assert torch.equal(monge_coupling_1d(x, x.clone()), torch.zeros(6))
    assert monge_coupling_1d(t([5.0, -1.0]), t([0.0, 2.0])).tolist() == [-1.0, 3.0]


def test_monge_reports_at_reference_slot():
    # refs out of order: smallest token goes to the smallest reference wherever it sits
    out = monge_coupling_1d(t([10.0, 20.0, 30.0]), t([2.0, 0.0, 1.0]))
    assert out.tolist() == [28.0, 10.0, 19.0]


def test_monge_length_mismatch():
    with pytest.raises(ShapeError):
        monge_coupling_1d(torch.zeros(3), torch.zeros(4))


# brute force oracle

def test_brute_force_examples():
    cost, perm = brute_force_w2([3.0, 1.0, 2.0], [0.0, 1.0, 2.0])
    assert cost == 3.0
    assert perm == (1, 2, 0)
    assert tuple(induced_assignment(t([3.0, 1.0, 2.0]), t([0.0, 1.0, 2.0]))) == perm
    x = [0.3, -1.2, 2.0, 0.5]
    assert brute_force_w2(x, x) == (0.0, (0, 1, 2, 3))
    z = [0.1, 2.5, -0.7, 1.1]
    assert brute_force_w2(z, sorted(x))[0] == pytest.approx(brute_force_w2(z, sorted(x)[::-1])[0], abs=1e-12)


def test_brute_force_refuses_large():
    with pytest.raises(ValueError):
        brute_force_w2(np.zeros(9), np.zeros(9))


def test_brute_force_matches_python_enumeration():
    rng = np.random.default_rng(3)
    z, x = rng.standard_normal(5), rng.standard_normal(5)
    ref = min(sum((z[p[i]] - x[i]) ** 2 for i in range(5)) for p in itertools.permutations(range(5)))
    assert brute_force_w2(z, x)[0] == pytest.approx(ref, abs=1e-12)


@settings(deadline=None, max_examples=200)
@given(st.integers(2, 7).flatmap(lambda s: st.tuples(
    arrays(np.float64, s, elements=st.floats(-10, 10)),
    arrays(np.float64, s, elements=st.floats(-10, 10)),
)))
def test_sort_matching_attains_brute_force_minimum(pair):
    z, x = pair
    best, _ = brute_force_w2(z, x)
    psi = monge_coupling_1d(torch.as_tensor(z), torch.as_tensor(x))
    assert float((psi**2).sum()) == pytest.approx(best, rel=1e-12, abs=1e-12)


def test_monge_sweep_all_exact():
    rows = monge_sweep(s_max=5, trials=100, seed=1)
    assert [r.size for r in rows] == [2, 3, 4, 5]
    assert all(r.exact == r.trials for r in rows)


# pswe

def test_pswe_hand_trace():
    out = pswe_embed(t([[2.0], [0.0]]), t([[1.0]]), t([[0.0], [1.0]]))
    assert out.tolist() == [[0.0], [1.0]]


def test_pswe_zero_at_coincidence():
    tokens = torch.randn(5, 3)
    slicers = unit_rows(torch.randn(4, 3))
    refs = (tokens @ slicers.T)[torch.randperm(5)]
    z = pswe_embed(tokens, slicers, refs)
    assert torch.equal(z, torch.zeros(5, 4))
    assert torch.equal(stm_select(z), torch.zeros(4))


@settings(deadline=None, max_examples=200)
@given(st.integers(0, 2**31 - 1), st.integers(1, 7))
def test_pswe_permutation_invariance_bitwise(seed, s):
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randn(s, 4, generator=g)
    slicers = unit_rows(torch.randn(6, 4, generator=g))
    refs = torch.randn(s, 6, generator=g)
    perm = torch.randperm(s, generator=g)
    assert torch.equal(pswe_embed(tokens[perm], slicers, refs), pswe_embed(tokens, slicers, refs))


def test_pswe_columns_are_monge_couplings():
    tokens = torch.randn(6, 3)
    slicers = unit_rows(torch.randn(5, 3))
    refs = torch.randn(6, 5)
    z = pswe_embed(tokens, slicers, refs)
    for l in range(5):
        col = monge_coupling_1d(slice_project(tokens, slicers[l]), refs[:, l])
        assert torch.allclose(z[:, l], col, atol=1e-14, rtol=0)


def test_pswe_batched_matches_loop():
    tokens = torch.randn(3, 4, 2)
    slicers = unit_rows(torch.randn(5, 2))
    refs = torch.randn(4, 5)
    batched = pswe_embed(tokens, slicers, refs)
    for i in range(3):
        # batched and single matmuls may round differently
        assert torch.allclose(batched[i], pswe_embed(tokens[i], slicers, refs), atol=1e-14, rtol=0)


def test_pswe_shape_errors():
    with pytest.raises(ShapeError):
        pswe_embed(torch.zeros(3, 2), torch.zeros(4, 2), torch.zeros(2, 4))
    with pytest.raises(ShapeError):
        pswe_embed(torch.zeros(3, 2), torch.zeros(4, 2), torch.zeros(3, 5))


def test_pswe_gradients():
    rng = np.random.default_rng(4)
    for _ in range(5):
        tokens = t(rng.standard_normal((5, 3)))
        slicers = unit_rows(t(rng.standard_normal((4, 3))))
        refs = t(rng.standard_normal((5, 4)))
        w = t(rng.standard_normal((5, 4)))

        def f(a, b, c):
            return (w * pswe_embed(a, b, c)).sum()

        err = grad_check_many(f, [tokens, slicers, refs], 1e-5, signature=traced_signature(f))
        assert err <= 1e-6


# straight-through maximum

def test_stm_examples():
    assert stm_select(t([[0.0], [10.0], [0.0]])).tolist() == [10.0]
    assert stm_select(torch.full((4, 3), 2.5)).tolist() == [2.5] * 3


def test_stm_forward_is_column_max_exact():
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        z = torch.randn(6, 5, generator=g) * 10
        assert torch.equal(stm_select(z), z.max(dim=0).values)


def test_stm_tie_goes_to_lowest_row():
    z = t([[1.0], [3.0], [3.0]]).requires_grad_(True)
    stm_select(z).sum().backward()
    y = torch.softmax(z.detach()[:, 0], 0)
    # gradient of (onehot - y0 + y) * z at the base is onehot + y * (z - sum y z)
    expect = torch.zeros(3)
    expect[1] = 1.0
    expect = expect + y * (z.detach()[:, 0] - (y * z.detach()[:, 0]).sum())
    assert torch.allclose(z.grad[:, 0], expect, atol=1e-15)


def test_stm_backward_matches_surrogate_at_hand_column():
    z0 = t([[1.0], [2.0], [0.0]])
    err = grad_check(lambda z: stm_select(z).sum(), z0, 1e-5, numeric_f=lambda z: stm_surrogate(z, z0).sum())
    assert err <= 1e-6


def test_stm_surrogate_value_at_base_is_max():
    z = torch.randn(5, 4)
    assert torch.allclose(stm_surrogate(z, z), z.max(0).values, atol=1e-14)


def test_surrogate_replay_context():
    z = torch.randn(4, 3)
    with stm_surrogate_at() as bases:
        stm_select(z)
    assert len(bases) == 1 and torch.equal(bases[0], z)
    moved = z + 0.1 * torch.randn(4, 3)
    with stm_surrogate_at(bases):
        out = stm_select(moved)
    assert torch.allclose(out, stm_surrogate(moved, z), atol=0)


# sliced pool / aswp

def test_sliced_pool_unit_slicers_and_renormalize():
    pool = SlicedPool(6, 4, 9)
    assert torch.allclose(pool.slicers.norm(dim=1), torch.ones(9), atol=1e-12)
    with torch.no_grad():
        pool.slicers.mul_(3.0)
    pool.renormalize()
    assert torch.allclose(pool.slicers.norm(dim=1), torch.ones(9), atol=1e-12)


def test_aswp_pass_through_composition():
    pool = SlicedPool(3, 4, 5)
    states = torch.randn(4, 3)
    out = aswp_pool(states, lambda x: x, pool)
    assert torch.equal(out, stm_select(pswe_embed(states, pool.slicers, pool.refs)))


@pytest.mark.parametrize("T", [1, 7, 500])
def test_aswp_output_dim(T):
    pool = ASWPool(8, 4, 6, 2)
    assert pool(torch.randn(T, 8)).shape == (6,)
    assert pool.out_dim == 6


def test_aswp_duplicate_padding_snapshot():
    pool, states, padded = snap.aswp_fixture()
    rec = snap.load()
    with torch.no_grad():
        a, b = pool(states), pool(padded)
    assert not torch.allclose(a, b)
    assert torch.allclose(a, t(rec["aswp"]), atol=1e-12, rtol=0)
    assert torch.allclose(b, t(rec["aswp_padded"]), atol=1e-12, rtol=0)


def test_aswp_empty_states():
    with pytest.raises(ShapeError):
        aswp_pool(torch.zeros(0, 4), lambda x: x, SlicedPool(4, 2, 3))

"""Finite-difference verification of every backward pass in the package."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch.func import functional_call

from . import losses as L
from .resampler import CrossAttentionBlock, SharedMediaResampler
from .swpool import pswe_embed, stm_select, stm_surrogate, stm_surrogate_at, unit_rows
from .tensor_core import grad_check, grad_check_many, matmul, softmax_rows, traced_signature

STEP = 1e-5
TOL = 1e-6
# composite checks: derivatives this far below the largest one are not
# resolvable by a 1e-5 central difference in 64-bit
REL_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tol)


def _params_check(module: torch.nn.Module, loss_of: Callable, rng, max_coords=None) -> float:
    """grad_check over all parameters of ``module``; ``loss_of(module)`` -> scalar.

    Any straight-through selection inside is differenced through its surrogate.
    """
    names = [n for n, _ in module.named_parameters()]
    shapes = [p.shape for _, p in module.named_parameters()]
    sizes = [p.numel() for _, p in module.named_parameters()]
    flat = torch.cat([p.detach().reshape(-1) for _, p in module.named_parameters()])

    class _Wrap(torch.nn.Module):
        def __init__(self, m):
            super().__init__()
            self.m = m

        def forward(self):
            return loss_of(self.m)

    wrap = _Wrap(module)

    def f(v):
        parts = torch.split(v, sizes)
        params = {f"m.{n}": p.reshape(s) for n, p, s in zip(names, parts, shapes)}
        return functional_call(wrap, params, ())

    coords = None
    if max_coords is not None and flat.numel() > max_coords:
        # a few coordinates from every parameter tensor
        per = max(1, -(-max_coords // len(sizes)))
        starts = np.cumsum([0] + sizes[:-1])
        coords = sorted(
            int(o + j) for o, n in zip(starts, sizes) for j in rng.choice(n, size=min(n, per), replace=False)
        )
    with torch.no_grad(), stm_surrogate_at() as bases:
        f(flat)

    def smooth(v):
        with stm_surrogate_at(bases):
            return f(v)

    return grad_check(
        f, flat, STEP, coords=coords, signature=traced_signature(f), numeric_f=smooth, rel_floor=REL_FLOOR
    )


def check_sum_squares(rng):
    x = torch.as_tensor(rng.standard_normal(12))
    return grad_check(lambda v: (v * v).sum(), x, STEP)


def check_matmul(rng):
    a = torch.as_tensor(rng.standard_normal((3, 4)))
    b = torch.as_tensor(rng.standard_normal((4, 2)))
    w = torch.as_tensor(rng.standard_normal((3, 2)))
    return grad_check_many(lambda a_, b_: (w * matmul(a_, b_)).sum(), [a, b], STEP)


def check_softmax_dot(rng):
    x = torch.as_tensor(rng.standard_normal((3, 5)))
    w = torch.as_tensor(rng.standard_normal((3, 5)))
    return grad_check(lambda v: (softmax_rows(v) * w).sum(), x, STEP)


def _pswe_inputs(rng, s=5, d=4, l=6):
    tokens = torch.as_tensor(rng.standard_normal((2, s, d)))
    slicers = unit_rows(torch.as_tensor(rng.standard_normal((l, d))))
    refs = torch.as_tensor(rng.standard_normal((s, l)))
    readout = torch.as_tensor(rng.standard_normal((2, s, l)))
    return tokens, slicers, refs, readout


def check_pswe(rng):
    tokens, slicers, refs, readout = _pswe_inputs(rng)

    def f(t, th, x):
        return (readout * pswe_embed(t, th, x)).sum()

    return grad_check_many(
        f, [tokens, slicers, refs], STEP, signature=traced_signature(f), rel_floor=REL_FLOOR
    )


def check_stm(rng):
    z0 = torch.as_tensor(rng.standard_normal((6, 5)))
    r = torch.as_tensor(rng.standard_normal(5))
    return grad_check(
        lambda z: (stm_select(z) * r).sum(),
        z0,
        STEP,
        numeric_f=lambda z: (stm_surrogate(z, z0) * r).sum(),
    )


def check_aswp_readout(rng):
    """pswe followed by STM, differentiated through the surrogate at the base point."""
    tokens, slicers, refs, _ = _pswe_inputs(rng)
    r = torch.as_tensor(rng.standard_normal(refs.shape[1]))
    base = pswe_embed(tokens, slicers, refs).detach()

    def f(t):
        return (stm_select(pswe_embed(t, slicers, refs)) * r).sum()

    def g(t):
        return (stm_surrogate(pswe_embed(t, slicers, refs), base) * r).sum()

    return grad_check(f, tokens, STEP, numeric_f=g, signature=traced_signature(g))


def check_block(rng):
    torch.manual_seed(int(rng.integers(1 << 31)))
    block = CrossAttentionBlock(4, 2).double()
    lat = torch.as_tensor(rng.standard_normal((2, 4)))
    inp = torch.as_tensor(rng.standard_normal((3, 4)))
    w = torch.as_tensor(rng.standard_normal((2, 4)))
    return _params_check(block, lambda m: ((m(lat, inp) * w).sum()) ** 2 / 10, rng)


def check_resampler(rng):
    torch.manual_seed(int(rng.integers(1 << 31)))
    res = SharedMediaResampler(4, 2, 2, max_frames=4, video_grid=(2, 2, 1)).double()
    with torch.no_grad():
        for p in res.modality_latents.values():
            p.normal_(0, 0.5)
    img = torch.as_tensor(rng.standard_normal((5, 4)))
    vid = torch.as_tensor(rng.standard_normal((3, 2, 2, 4)))
    w = torch.as_tensor(rng.standard_normal((2, 4)))

    def loss(m):
        a = (m(img, "image") * w).sum()
        b = (m(m.video_tokens(vid), "video") * w).sum()
        return (a * a + b * b) / 10

    return _params_check(res, loss, rng)


def _sim_batch(rng, b=4, l=6):
    q = torch.as_tensor(rng.standard_normal((b, l)))
    c = torch.as_tensor(rng.standard_normal((b, l)))
    return q, c


def check_info_nce(rng):
    q, c = _sim_batch(rng)
    cfg = L.LossConfig()
    return grad_check_many(
        lambda q_, c_: L.info_nce(L.SimilarityBatch.in_batch(q_, c_), cfg), [q, c], STEP, rel_floor=REL_FLOOR
    )


def check_triplet(rng):
    q, c = _sim_batch(rng)
    cfg = L.LossConfig(eta=0.3, triplet_raw_cosine=True)

    def f(q_, c_):
        return L.triplet_loss(L.SimilarityBatch.in_batch(q_, c_), cfg)

    return grad_check_many(f, [q, c], STEP, signature=traced_signature(f))


def check_diversity(rng):
    m = torch.as_tensor(rng.standard_normal((3, 4, 5)))
    cfg = L.LossConfig()
    mask = L.diversity_mask((3, 4, 4), cfg.diversity_dropout, torch.Generator().manual_seed(3))

    def f(x):
        return L.diversity_loss(x, cfg, mask).sum()

    return grad_check(f, m, STEP, signature=traced_signature(f))


def pipeline_config():
    """Desk model in 64-bit on a small stage-2 batch."""
    from .config import preset

    return preset("desk").replace(
        **{"train.dtype": "float64", "stage2.batch_size": 16, "stage2.tasks_per_batch": 4}
    )


def check_pipeline(rng, max_coords: int = 200):
    """End-to-end: total loss of one stage-2 batch w.r.t. every model parameter."""
    from .bench.data import get_tasks
    from .bench.sampler import TaskBalancedSampler
    from .bench.train import Bench

    cfg = pipeline_config().replace(seed=int(rng.integers(1 << 16)))
    bench = Bench(cfg)
    with torch.no_grad():
        for p in bench.model.resampler.modality_latents.values():
            p.normal_(0, 0.3)
    st = cfg.stage2
    sampler = TaskBalancedSampler(
        bench.dataset, get_tasks(st.tasks), st.batch_size, st.tasks_per_batch, st.datasets_per_task, cfg.seed
    )
    batch = sampler.batch(0)

    def loss(_m):
        return bench.batch_loss(batch, torch.Generator().manual_seed(11))["total"]

    return _params_check(bench.model, loss, rng, max_coords=max_coords)


CHECKS: dict[str, tuple[Callable, float]] = {
    "sum_squares": (check_sum_squares, 1e-7),
    "matmul": (check_matmul, TOL),
    "softmax_dot": (check_softmax_dot, TOL),
    "pswe_embed": (check_pswe, TOL),
    "stm_select": (check_stm, TOL),
    "aswp_readout": (check_aswp_readout, TOL),
    "cross_attention_block": (check_block, TOL),
    "resampler": (check_resampler, TOL),
    "info_nce": (check_info_nce, TOL),
    "triplet": (check_triplet, TOL),
    "diversity": (check_diversity, TOL),
    "pipeline": (check_pipeline, TOL),
}


def run_suite(seed: int = 0, names=None, repeats: int = 1) -> list[CheckResult]:
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        out = []
        for name in names or CHECKS:
            fn, tol = CHECKS[name]
            worst = 0.0
            for r in range(repeats):
                rng = np.random.default_rng([seed, r, list(CHECKS).index(name)])
                worst = max(worst, fn(rng))
            out.append(CheckResult(name, worst, tol))
        return out
    finally:
        torch.set_default_dtype(prev)

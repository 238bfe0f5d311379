"""Dense tensor substrate.

Tensors are ``torch.Tensor`` values; torch autograd plays the role of the
gradient tape. ``grad_check`` is a finite-difference oracle that never
touches autograd for the numeric side, so it can certify every backward
pass built on top of this module.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Hashable, Optional, Sequence

import numpy as np
import torch

DTYPE = torch.float64


_TRACE: list[list] = []


@contextlib.contextmanager
def discrete_trace():
    """Collect every discrete decision (sort order, argmax, active kink) made inside."""
    record: list = []
    _TRACE.append(record)
    try:
        yield record
    finally:
        _TRACE.pop()


def note_discrete(t: torch.Tensor) -> None:
    if _TRACE:
        blob = t.detach().cpu().numpy().tobytes()
        for record in _TRACE:
            record.append(blob)


def traced_signature(f: Callable) -> Callable[[torch.Tensor], Hashable]:
    """Signature function for ``grad_check``: the discrete trace of one forward pass."""

    def sig(*args):
        with torch.no_grad(), discrete_trace() as record:
            f(*args)
        return tuple(record)

    return sig


class ShapeError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=dtype)
    if t.dim() > 4:
        raise ShapeError(f"rank {t.dim()} exceeds 4")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects matrices, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    # max-shift keeps exp finite; softmax is shift invariant
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def argsort(x) -> torch.Tensor:
    """Stable ascending argsort; equal values keep their original order."""
    t = torch.as_tensor(x)
    return torch.sort(t, dim=-1, stable=True).indices


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
    signature: Optional[Callable[[torch.Tensor], Hashable]] = None,
    numeric_f: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    rel_floor: Optional[float] = None,
) -> float:
    """Worst relative error between autograd and central differences.

    ``numeric_f`` (default ``f``) is the function differenced numerically;
    pass a smooth surrogate when ``f`` only defines its gradient through one.

    ``coords`` restricts the check to a subset of flat coordinates. When
    ``signature`` is given it must return the discrete state (sort orders,
    argmax picks, active hinges) of ``f`` at a point; coordinates whose
    perturbation changes that state straddle a kink and are skipped.

    With ``rel_floor`` set, coordinates where both the analytic and numeric
    derivative are below ``rel_floor * max|analytic|`` are skipped too: their
    difference quotient is dominated by rounding at this step size.
    """
    x0 = x.detach().clone().to(DTYPE)
    xa = x0.clone().requires_grad_(True)
    out = f(xa)
    if out.numel() != 1:
        raise GradCheckError("f must be scalar valued")
    if not torch.isfinite(out):
        raise GradCheckError(f"non-finite value {out.item()} at base point")
    (analytic,) = torch.autograd.grad(out, xa, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.reshape(-1)

    flat = x0.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    base_sig = signature(x0) if signature is not None else None
    g = f if numeric_f is None else numeric_f
    floor = 0.0 if rel_floor is None else rel_floor * analytic.abs().max().item()
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += step
            xm[i] -= step
            xp = xp.reshape(x0.shape)
            xm = xm.reshape(x0.shape)
            if signature is not None and not (signature(xp) == base_sig == signature(xm)):
                continue
            fp = g(xp).item()
            fm = g(xm).item()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"non-finite value at coordinate {i}")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[i].item()
            if max(abs(a), abs(numeric)) < floor:
                continue
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def grad_check_many(f, xs: Sequence[torch.Tensor], step: float = 1e-5, **kw) -> float:
    """grad_check over several inputs at once by packing them into one vector."""
    shapes = [t.shape for t in xs]
    sizes = [int(np.prod(s)) if len(s) else 1 for s in shapes]

    def unpack(v):
        parts = torch.split(v, sizes)
        return [p.reshape(s) for p, s in zip(parts, shapes)]

    packed = torch.cat([t.detach().reshape(-1).to(DTYPE) for t in xs])
    sig = kw.pop("signature", None)
    return grad_check(
        lambda v: f(*unpack(v)),
        packed,
        step,
        signature=(lambda v: sig(*unpack(v))) if sig is not None else None,
        **kw,
    )

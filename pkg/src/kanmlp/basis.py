"""Pointwise evaluation of the two equivalent bases of S_r(T)."""

from __future__ import annotations

import numpy as np

from .cob import build_Ar
from .knots import BasisKind, KnotVector

__all__ = ["eval_bspline_basis", "eval_trunc_power_basis", "eval_basis"]


def _cox_de_boor(knots: np.ndarray, r: int, x: np.ndarray, right_closed_at: int) -> np.ndarray:
    """All order-``r`` B-splines on ``knots`` at points ``x`` (shape (..., m - r)).

    Order-1 indicators use half-open intervals, except interval
    ``right_closed_at`` which also contains its right endpoint.
    """
    x = x[..., None]
    left, right = knots[:-1], knots[1:]
    basis = ((x >= left) & (x < right)).astype(np.float64)
    at_end = x[..., 0] == right[right_closed_at]
    basis[..., right_closed_at] = np.where(at_end, 1.0, basis[..., right_closed_at])
    if right_closed_at + 1 < basis.shape[-1]:
        basis[..., right_closed_at + 1] = np.where(at_end, 0.0, basis[..., right_closed_at + 1])
    for s in range(2, r + 1):
        t_i = knots[: -s]
        t_is1 = knots[s - 1 : -1]
        t_i1 = knots[1 : -s + 1]
        t_is = knots[s:]
        basis = (x - t_i) / (t_is1 - t_i) * basis[..., :-1] + (t_is - x) / (t_is - t_i1) * basis[
            ..., 1:
        ]
    return basis


def eval_bspline_basis(kv: KnotVector, x) -> np.ndarray:
    """B-splines ``b_{1-r}, ..., b_{n-1}`` at ``x`` (any shape; basis on a new last axis).

    Cox-de Boor recursion on ``[a, b]``; outside the domain the values are
    the truncated-power expansion ``A @ Phi(x)``, which extends the basis to
    the whole real line consistently with the other basis.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN in basis evaluation input")
    # the interval [t_{n-1}, t_n] is closed on the right
    out = _cox_de_boor(kv.knots, kv.r, x, right_closed_at=kv.n + kv.r - 2)
    outside = (x < kv.a) | (x > kv.b)
    if outside.any():
        if kv.r == 1:
            out[outside] = 0.0
        else:
            A = build_Ar(kv)
            out[outside] = eval_trunc_power_basis(kv, x[outside]) @ A.dense().T
    return out


def eval_trunc_power_basis(kv: KnotVector, x) -> np.ndarray:
    """Truncated powers ``max(x - t_i, 0) ** (r - 1)`` for ``i = 1-r .. n-1``.

    For ``r = 1`` these are the unit steps ``x >= t_i``.
    """
    x = np.asarray(x, dtype=np.float64)[..., None]
    t = kv.knots[: kv.dim]
    if kv.r == 1:
        return (x >= t).astype(np.float64)
    return np.maximum(x - t, 0.0) ** (kv.r - 1)


def eval_basis(kv: KnotVector, kind: BasisKind | str, x) -> np.ndarray:
    kind = BasisKind.parse(kind)
    if kind is BasisKind.SPLINE:
        return eval_bspline_basis(kv, x)
    return eval_trunc_power_basis(kv, x)

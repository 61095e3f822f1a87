"""Nested knot refinement and exact prolongation of KAN weights.

Every coarse B-spline is a fixed combination of fine B-splines when the
coarse knots are a subset of the fine ones:

    b_i^coarse(x) = sum_j I[i, j] * b_j^fine(x)      on [a, b]

so a layer with spline weights ``W`` and the refined layer with weights
``W @ I`` compute the same function.  ``I`` is built by inserting the new
knots one at a time (Boehm's rule); each insertion is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cob import apply_cob, apply_cob_inverse, build_Ar
from .knots import BasisKind, FreeKnotParam, KnotVector, knots_from_params, logits_from_fractions
from .network import KanLayer, Network

__all__ = [
    "RefinementOp",
    "subdivide_knots",
    "build_interpolation",
    "refine_layer",
    "refine_network",
]


@dataclass(frozen=True)
class RefinementOp:
    """Prolongation from ``coarse`` to ``fine``.

    ``matrix`` has shape ``(coarse.dim, fine.dim)``; row ``i`` holds the
    fine coefficients of coarse basis function ``i``.  Entries are
    nonnegative and every column sums to one (partition of unity is
    preserved).
    """

    coarse: KnotVector
    fine: KnotVector
    matrix: np.ndarray = field(repr=False)

    def prolong(self, weights: np.ndarray) -> np.ndarray:
        """Map spline coefficients on the channel axis to the fine grid."""
        return np.asarray(weights, dtype=np.float64) @ self.matrix


def _midpoints_between(knots: np.ndarray) -> np.ndarray:
    merged = np.empty(2 * knots.size - 1)
    merged[0::2] = knots
    merged[1::2] = 0.5 * (knots[:-1] + knots[1:])
    return merged


def subdivide_knots(kv: KnotVector, extension: str = "subdivide") -> KnotVector:
    """Insert the midpoint of every knot interval, doubling ``n``.

    With ``extension="subdivide"`` the extended knots are subdivided too and
    the ``r - 1`` nearest to each endpoint are kept, so a uniform grid stays
    uniform.  ``extension="keep"`` leaves the extension knots untouched
    (used for free-knot layers, whose extension knots have their own
    parameters).
    """
    r, n = kv.r, kv.n
    if extension == "subdivide":
        merged = _midpoints_between(kv.knots)
        # a sits at merged[2(r-1)]; keep r-1 knots to its left
        fine = merged[r - 1 : 3 * r - 2 + 2 * n]
    elif extension == "keep":
        inner = _midpoints_between(kv.interior)
        fine = np.concatenate([kv.knots[: r - 1], inner, kv.knots[n + r :]])
    else:
        raise ValueError(f"unknown extension rule {extension!r}")
    return KnotVector(kv.a, kv.b, r, 2 * n, fine)


def _insert_knot(coef: np.ndarray, tau: np.ndarray, u: float, r: int) -> tuple[np.ndarray, np.ndarray]:
    """One Boehm insertion of ``u`` into ``tau`` acting on coefficient columns."""
    p = r - 1
    k = int(np.searchsorted(tau, u, side="right")) - 1
    if k < p or k >= tau.size - 1 - p:
        raise ValueError(f"knot {u} cannot be inserted outside the supported range")
    rows, cols = coef.shape
    out = np.empty((rows, cols + 1))
    out[:, : k - p + 1] = coef[:, : k - p + 1]
    for j in range(k - p + 1, k + 1):
        alpha = (u - tau[j]) / (tau[j + p] - tau[j])
        out[:, j] = alpha * coef[:, j] + (1.0 - alpha) * coef[:, j - 1]
    out[:, k + 1 :] = coef[:, k:]
    return out, np.insert(tau, k + 1, u)


def build_interpolation(coarse: KnotVector, fine: KnotVector) -> RefinementOp:
    """Exact prolongation matrix between nested knot vectors."""
    if coarse.r != fine.r:
        raise ValueError(f"order mismatch: {coarse.r} vs {fine.r}")
    if (coarse.a, coarse.b) != (fine.a, fine.b):
        raise ValueError("coarse and fine knot vectors live on different domains")
    if not np.all(np.isin(coarse.interior, fine.interior)):
        raise ValueError("knot sets are not nested: a coarse knot is missing from the fine set")
    r = coarse.r
    tau = coarse.knots.copy()
    lo, hi = tau[0], tau[-1]
    new = fine.knots[~np.isin(fine.knots, tau)]
    if np.any(new <= lo) or np.any(new >= hi):
        raise ValueError("fine extension knots reach beyond the coarse knot range")
    # phantom knots and zero coefficients so insertions near the ends are legal
    pad = r - 1
    left = tau[0] - (tau[1] - tau[0]) * np.arange(pad, 0, -1)
    right = tau[-1] + (tau[-1] - tau[-2]) * np.arange(1, pad + 1)
    tau = np.concatenate([left, tau, right])
    coef = np.zeros((coarse.dim, coarse.dim + 2 * pad))
    coef[:, pad : pad + coarse.dim] = np.eye(coarse.dim)
    for u in np.sort(new):
        coef, tau = _insert_knot(coef, tau, float(u), r)
    start = int(np.searchsorted(tau, fine.knots[0]))
    stop = start + fine.knots.size
    if stop > tau.size or not np.array_equal(tau[start:stop], fine.knots):
        raise ValueError("fine knots are not a contiguous part of the refined knot vector")
    return RefinementOp(coarse, fine, coef[:, start : start + fine.dim])


def _refine_free(layer: KanLayer) -> tuple[KanLayer, RefinementOp]:
    kv = layer.knot_vector()
    fine_kv = subdivide_knots(kv, extension="keep")
    op = build_interpolation(kv, fine_kv)
    fk = layer.free_knots
    s_int = logits_from_fractions(np.diff(fine_kv.interior) / (kv.b - kv.a))
    fine_fk = FreeKnotParam(s_int, fk.s_left.copy(), fk.s_right.copy())
    return _with_weights(layer, op, fine_kv, fine_fk), op


def _with_weights(layer: KanLayer, op: RefinementOp, fine_kv: KnotVector, fine_fk) -> KanLayer:
    if layer.basis is BasisKind.SPLINE:
        w = op.prolong(layer.weights)
    else:
        w_tilde = apply_cob_inverse(layer.weights, build_Ar(op.coarse))
        realized = fine_kv if fine_fk is None else knots_from_params(fine_kv.a, fine_kv.b, fine_fk, fine_kv.r)
        w = apply_cob(op.prolong(w_tilde), build_Ar(realized))
    return KanLayer(layer.P, layer.Q, fine_kv, layer.basis, w, fine_fk)


def refine_layer(layer: KanLayer, op: RefinementOp | None = None) -> KanLayer:
    """Return a layer on the subdivided grid computing the same function.

    Truncated-power layers are mapped to spline coefficients, prolonged,
    and mapped back, so they keep their basis.  Free-knot layers subdivide
    their realized interior knots; the new logits reproduce the fine gaps.
    """
    if op is None:
        if layer.free_knots is not None:
            return _refine_free(layer)[0]
        op = build_interpolation(layer.kv, subdivide_knots(layer.kv))
    elif op.coarse != layer.knot_vector():
        raise ValueError("refinement operator was built for a different knot vector")
    fine_fk = None
    if layer.free_knots is not None:
        s_int = logits_from_fractions(np.diff(op.fine.interior) / (op.fine.b - op.fine.a))
        fine_fk = FreeKnotParam(s_int, layer.free_knots.s_left.copy(), layer.free_knots.s_right.copy())
    return _with_weights(layer, op, op.fine, fine_fk)


def refine_network(net: Network, return_ops: bool = False):
    """Refine every KAN layer once; MLP layers and normalization carry over.

    With ``return_ops`` the per-layer operators (``None`` for layers that
    were not refined) are returned alongside the new network.
    """
    layers, ops = [], []
    for layer in net.layers:
        if isinstance(layer, KanLayer):
            if layer.free_knots is not None:
                new, op = _refine_free(layer)
            else:
                op = build_interpolation(layer.kv, subdivide_knots(layer.kv))
                new = refine_layer(layer, op)
            layers.append(new)
            ops.append(op)
        else:
            layers.append(layer)
            ops.append(None)
    out = Network(layers, list(net.normalize), net.domain, list(net.frozen)).copy()
    return (out, ops) if return_ops else out

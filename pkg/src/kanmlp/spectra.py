"""Gram matrices, conditioning, empirical Hessians and NTK spectra.

All matrices are dense and computed in double precision; the sizes here
are small enough that a symmetric eigensolver is the right tool.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .basis import eval_basis
from .cob import BlockDiagonalCOB, build_Ar, scaled
from .knots import BasisKind, KnotVector, make_uniform_knots
from .network import KanLayer, Network, convert_basis, forward_on_tape, network_forward

__all__ = [
    "gram_matrix",
    "condition_number",
    "ConditionInfo",
    "empirical_hessian",
    "empirical_jacobian",
    "empirical_ntk",
    "scaled_ntk_pair",
    "min_batch_size",
    "normal_outside_probability",
    "nullspace_demo",
    "NullspaceResult",
    "scaled_cob_norm",
    "spectral_radius",
    "SpectraReport",
    "run_analysis",
]

MAX_NTK_WEIGHTS = 10_000
MAX_NTK_SAMPLES = 200


def gram_matrix(kv: KnotVector, basis: BasisKind | str, quad_order: int | None = None) -> np.ndarray:
    """``G[i, j] = integral over [a, b] of phi_i * phi_j dx``.

    Composite Gauss-Legendre with ``quad_order`` nodes per knot interval
    (default ``r + 1``); exact for these piecewise polynomials once
    ``quad_order >= r``.
    """
    q = kv.r + 1 if quad_order is None else int(quad_order)
    if q < kv.r:
        raise ValueError(f"quad_order {q} is below the exactness threshold r = {kv.r}")
    nodes, weights = np.polynomial.legendre.leggauss(q)
    lo, hi = kv.interior[:-1], kv.interior[1:]
    half = 0.5 * (hi - lo)
    x = (0.5 * (hi + lo))[:, None] + half[:, None] * nodes
    w = half[:, None] * weights
    phi = eval_basis(kv, basis, x.ravel())
    G = phi.T @ (phi * w.ravel()[:, None])
    return 0.5 * (G + G.T)


@dataclass(frozen=True)
class ConditionInfo:
    kappa: float
    excluded: int
    lambda_max: float
    lambda_min: float


def condition_number(M: np.ndarray, rel_threshold: float = 1e-12, details: bool = False):
    """``lambda_max / lambda_min`` over eigenvalues above ``rel_threshold * lambda_max``.

    With ``details`` a :class:`ConditionInfo` is returned, including the
    number of excluded (numerically zero) eigenvalues.
    """
    M = np.asarray(M, dtype=np.float64)
    lam = np.linalg.eigvalsh(0.5 * (M + M.T))
    lmax = lam[-1]
    if not lmax > 0:
        raise ValueError("matrix has no positive eigenvalue")
    keep = lam > rel_threshold * lmax
    info = ConditionInfo(float(lmax / lam[keep][0]), int((~keep).sum()), float(lmax), float(lam[keep][0]))
    return info if details else info.kappa


def empirical_hessian(kv: KnotVector, basis: BasisKind | str, X) -> np.ndarray:
    """``(1/D) * Phi(X)^T Phi(X)``, the Hessian of a one-dimensional least-squares fit."""
    x = np.asarray(X, dtype=np.float64).ravel()
    if x.size < 1:
        raise ValueError("need at least one sample")
    phi = eval_basis(kv, basis, x)
    return phi.T @ phi / x.size


# ---------------------------------------------------------------------------
# NTK
# ---------------------------------------------------------------------------


def _weight_positions(net: Network) -> list[int]:
    """Indices into ``parameter_arrays`` holding KAN or MLP weight tensors."""
    pos, k = [], 0
    for layer in net.layers:
        pos.append(k)
        if isinstance(layer, KanLayer):
            fk = layer.free_knots
            k += 1 + (0 if fk is None else sum(1 for a in (fk.s_interior, fk.s_left, fk.s_right) if a.size))
        else:
            k += 1 + (layer.biases is not None)
    return pos


def empirical_jacobian(net: Network, X) -> np.ndarray:
    """Jacobian of the scalar outputs with respect to all weight tensors.

    Rows are samples; columns follow the C-order flattening of each
    layer's weights, layer by layer.  Normalization maps are frozen
    (recorded from ``X`` if missing) so samples do not interact.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > MAX_NTK_SAMPLES:
        raise ValueError(f"{X.shape[0]} samples exceeds the NTK guard of {MAX_NTK_SAMPLES}")
    arrays = net.parameter_arrays()
    pos = _weight_positions(net)
    n_weights = sum(arrays[k].size for k in pos)
    if n_weights > MAX_NTK_WEIGHTS:
        raise ValueError(f"{n_weights} weights exceeds the NTK guard of {MAX_NTK_WEIGHTS}")
    if any(rec is None for rec, norm in zip(net.frozen, net.normalize) if norm):
        network_forward(net, X)
    tape = ad.Tape()
    leaves = [tape.var(a) for a in arrays]
    out = forward_on_tape(net, X, leaves, frozen=True)
    if out.shape[1] != 1:
        raise ValueError("empirical NTK is defined here for scalar-output networks")
    J = np.empty((X.shape[0], n_weights))
    for d in range(X.shape[0]):
        pick = np.zeros(out.shape)
        pick[d, 0] = 1.0
        tape.backward(ad.sum_(out * pick))
        J[d] = np.concatenate([leaves[k].grad.ravel() for k in pos])
    return J


def empirical_ntk(net: Network, X, basis: BasisKind | str | None = None) -> np.ndarray:
    """``J J^T`` with ``J`` taken in the coordinates of ``basis`` (default: the net's own)."""
    if basis is not None:
        net = convert_basis(net, basis)
    J = empirical_jacobian(net, X)
    return J @ J.T


def _kan_layers(net: Network) -> list[KanLayer]:
    layers = [layer for layer in net.layers if isinstance(layer, KanLayer)]
    if len(layers) != len(net.layers):
        raise ValueError("the scaled NTK comparison needs an all-KAN network")
    return layers


def scaled_ntk_pair(net: Network, X) -> tuple[np.ndarray, np.ndarray]:
    """NTKs in the spacing-normalized truncated-power basis and in the B-spline basis.

    With features ``max((x - t)/h, 0)**(r-1)`` the change of basis is
    ``A_scaled = h**(r-1) * A`` and the spline Jacobian is
    ``J_scaled @ blockdiag(A_scaled.T)``.  Uniform knots are required.
    """
    layers = _kan_layers(net)
    relu = convert_basis(net, BasisKind.TRUNCATED_POWER)
    J = empirical_jacobian(relu, X)
    blocks, mult, col_scale = [], [], []
    for layer in layers:
        kv = layer.knot_vector()
        if not kv.is_uniform(rtol=1e-9):
            raise ValueError("scaled NTK comparison assumes uniform knots")
        h = (kv.b - kv.a) / kv.n
        blocks.append(scaled(build_Ar(kv), h))
        mult.append(layer.P * layer.Q)
        col_scale.append(np.full(layer.weights.size, h ** (1 - kv.r)))
    J_scaled = J * np.concatenate(col_scale)
    lift = BlockDiagonalCOB(blocks, mult)
    J_spline = lift.apply_transpose(J_scaled)
    return J_scaled @ J_scaled.T, J_spline @ J_spline.T


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (M + M.T)))))


def scaled_cob_norm(r: int, dim: int) -> float:
    """Largest singular value of ``h**(r-1) * A`` on uniform knots (independent of h)."""
    kv = make_uniform_knots(0.0, float(dim - r + 1), dim - r + 1, r)
    return float(np.linalg.norm(scaled(build_Ar(kv), 1.0).dense(), 2))


# ---------------------------------------------------------------------------
# sampling and nullspace
# ---------------------------------------------------------------------------


def min_batch_size(tau: float, p_outside: float) -> int:
    """Smallest batch for which some sample lands in a region with probability ``>= tau``.

    ``p_outside`` is the probability that one sample misses the region.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if not 0.0 < p_outside < 1.0:
        raise ValueError(f"p_outside must lie in (0, 1), got {p_outside}")
    return max(1, math.ceil(math.log1p(-tau) / math.log(p_outside)))


def normal_outside_probability(lo: float, hi: float) -> float:
    """Probability that a standard normal sample falls outside ``[lo, hi]``."""
    cdf = lambda z: 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    return 1.0 - (cdf(hi) - cdf(lo))


@dataclass(frozen=True)
class NullspaceResult:
    sigma_min: float
    sigma_max: float
    kernel: np.ndarray = field(repr=False)
    residual: float


def nullspace_demo(kv: KnotVector, P: int, samples, basis: BasisKind | str = BasisKind.SPLINE) -> NullspaceResult:
    """Singular values of the stacked per-input feature matrix.

    For the spline basis the vector that is ``+1`` on the first input's
    channels and ``-1`` on the second's lies in the kernel, since both
    blocks sum to one row by row.
    """
    if P < 1:
        raise ValueError("P must be positive")
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != P:
        raise ValueError(f"samples have {X.shape[1]} columns, expected {P}")
    F = np.concatenate([eval_basis(kv, basis, X[:, p]) for p in range(P)], axis=1)
    sv = np.linalg.svd(F, compute_uv=False)
    kernel = np.zeros(F.shape[1])
    if P >= 2:
        kernel[: kv.dim] = 1.0
        kernel[kv.dim : 2 * kv.dim] = -1.0
        kernel /= np.linalg.norm(kernel)
    residual = float(np.linalg.norm(F @ kernel)) if P >= 2 else float("nan")
    return NullspaceResult(float(sv[-1]), float(sv[0]), kernel, residual)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class SpectraReport:
    """Rows of ``(quantity, key, value)``."""

    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def add(self, quantity: str, key, value: float) -> None:
        self.rows.append((quantity, str(key), float(value)))

    def values(self, quantity: str) -> list[float]:
        return [v for q, _, v in self.rows if q == quantity]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "key", "value"])
            for q, k, v in self.rows:
                w.writerow([q, k, repr(v)])


def run_analysis(
    ns=(8, 16, 32, 64, 128),
    r: int = 2,
    orders=(2, 3, 4),
    dims=(8, 16, 32, 64, 128, 256),
    ntk_nets: int = 5,
    seed: int = 0,
) -> SpectraReport:
    """Conditioning sweep, scaled change-of-basis norms and NTK radius ratios."""
    from .network import build_kan

    report = SpectraReport()
    for n in ns:
        kv = make_uniform_knots(0.0, 1.0, n, r)
        report.add("kappa_spline", n, condition_number(gram_matrix(kv, BasisKind.SPLINE)))
        report.add("kappa_relu", n, condition_number(gram_matrix(kv, BasisKind.TRUNCATED_POWER)))
    for order in orders:
        for dim in dims:
            report.add(f"sigma_max_scaled_A_r{order}", dim, scaled_cob_norm(order, dim))
    rng = np.random.default_rng(seed)
    for order in (2, 3):
        for k in range(ntk_nets):
            net = build_kan([2, 3, 1], int(rng.integers(3, 9)), order, BasisKind.TRUNCATED_POWER,
                            seed=int(rng.integers(1 << 31)))
            X = rng.uniform(size=(64, 2))
            ntk_r, ntk_s = scaled_ntk_pair(net, X)
            report.add(f"ntk_ratio_r{order}", k, spectral_radius(ntk_s) / spectral_radius(ntk_r))
    return report

"""Numerical property checks behind ``kanmlp verify``.

Each check returns a :class:`CheckResult` with the measured quantity and
the tolerance it was held to.  None of them trains a full benchmark; see
:mod:`kanmlp.bench` for that.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .basis import eval_bspline_basis, eval_trunc_power_basis
from .cob import build_Ar, build_Ar_uniform, scaled, toeplitz_spectral_bound
from .knots import BasisKind, KnotVector, make_uniform_knots
from .network import Network, build_kan, convert_basis, forward_on_tape, loss_and_grad, network_forward
from .optim import preconditioned_gd_step
from .refinement import refine_network
from .spectra import (
    condition_number,
    gram_matrix,
    min_batch_size,
    normal_outside_probability,
    nullspace_demo,
    scaled_cob_norm,
    scaled_ntk_pair,
    spectral_radius,
)

__all__ = ["CheckResult", "CHECKS", "run_checks", "random_knots"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail} (value {self.value:.3e}, tolerance {self.tolerance:.1e}, {self.seconds:.1f}s)"


def random_knots(rng: np.random.Generator, a: float, b: float, n: int, r: int, min_ratio: float = 0.2) -> KnotVector:
    """Non-degenerate random knots: gaps drawn from ``[min_ratio, 1]`` then rescaled."""
    gaps = rng.uniform(min_ratio, 1.0, size=n)
    interior = a + (b - a) * np.concatenate([[0.0], np.cumsum(gaps) / gaps.sum()])
    interior[0], interior[-1] = a, b
    h = (b - a) / n
    left = a - h * np.cumsum(rng.uniform(0.5, 1.5, size=r - 1))[::-1]
    right = b + h * np.cumsum(rng.uniform(0.5, 1.5, size=r - 1))
    return KnotVector(a, b, r, n, np.concatenate([left, interior, right]))


def _timed(fn: Callable[[], CheckResult]) -> CheckResult:
    start = time.perf_counter()
    res = fn()
    return CheckResult(res.name, res.passed, res.value, res.tolerance, res.detail, time.perf_counter() - start)


# 1 ---------------------------------------------------------------------------


def check_basis_equivalence(seed: int = 0, samples: int = 1000, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for r in (2, 3, 4):
        for uniform in (True, False):
            for n in (4, 10, 25):
                kv = make_uniform_knots(-1.0, 1.0, n, r) if uniform else random_knots(rng, -1.0, 1.0, n, r)
                x = rng.uniform(-1.0, 1.0, size=samples)
                B = eval_bspline_basis(kv, x)
                AP = eval_trunc_power_basis(kv, x) @ build_Ar(kv).dense().T
                worst = max(worst, float(np.max(np.abs(B - AP))))
    return CheckResult("basis equivalence", worst <= tol, worst, tol, "max |B - A Phi|, r in {2,3,4}")


# 2 ---------------------------------------------------------------------------


def check_uniform_closed_form(tol: float = 1e-12, max_dim: int = 128) -> CheckResult:
    """Compared in units of the entry scale ``h**(1-r)``, i.e. on ``h**(r-1) * A``."""
    worst = 0.0
    for r in (1, 2, 3, 4):
        for dim in sorted({r + 1, 8, 16, 32, 64, max_dim}):
            n = dim - r + 1
            kv = make_uniform_knots(0.0, 1.0, n, r)
            h = 1.0 / n
            rec = scaled(build_Ar(kv), h).dense()
            closed = scaled(build_Ar_uniform(h, kv.dim, r), h).dense()
            worst = max(worst, float(np.max(np.abs(rec - closed))))
    return CheckResult("uniform closed form", worst <= tol, worst, tol,
                       f"max |h^(r-1) (A_closed - A_recursive)|, dims up to {max_dim}")


# 3 ---------------------------------------------------------------------------


def check_refinement_exactness(seed: int = 0, tol: float = 1e-10) -> CheckResult:
    from .optim import train_multilevel

    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(1000, 2))
    worst = 0.0
    for r in (2, 3, 4):
        for basis in ("spline", "relu"):
            for free in (False, True):
                net = build_kan([2, 4, 3, 1], 3, r, basis, free_knots=free, seed=int(rng.integers(1 << 30)))
                y = network_forward(net, X)
                fine = refine_network(net)
                worst = max(worst, float(np.max(np.abs(network_forward(fine, X, frozen=True) - y))))
    Y = np.sin(3 * X[:, :1]) * X[:, 1:]
    for free in (False, True):
        net = build_kan([2, 3, 1], 3, 3, "spline", free_knots=free, seed=7)
        res = train_multilevel(net, X[:400], Y[:400], [2, 2, 2], iters_per_epoch=5)
        worst = max(worst, max(abs(b - a) for _, b, a in res.transfers))
    return CheckResult("refinement exactness", worst <= tol, worst, tol,
                       "sup output change and loss jump at level transfers")


# 4 ---------------------------------------------------------------------------


def check_preconditioning(seed: int = 0, steps: int = 50, tol: float = 1e-6) -> CheckResult:
    """Spline-coordinate GD mapped through A versus preconditioned truncated-power GD."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(300, 2))
    Y = np.cos(2 * X[:, :1]) + X[:, 1:] ** 2
    net_s = build_kan([2, 3], 6, 3, "spline", seed=seed)
    net_s.layers[0].weights = rng.normal(size=net_s.layers[0].weights.shape)
    network_forward(net_s, X)
    # least squares in the output layer: a linear model in the weights
    Yq = np.repeat(Y, 3, axis=1)
    A = build_Ar(net_s.layers[0].kv)
    net_r = convert_basis(net_s, BasisKind.TRUNCATED_POWER)
    _, g0 = loss_and_grad(net_s, X, Yq, frozen=True)
    lr = 0.5 / max(1e-12, float(np.max(np.abs(g0[0]))))
    lr = min(lr, 1.0)
    worst = 0.0
    for _ in range(steps):
        _, gs = loss_and_grad(net_s, X, Yq, frozen=True)
        _, gr = loss_and_grad(net_r, X, Yq, frozen=True)
        net_s.layers[0].weights = net_s.layers[0].weights - lr * gs[0]
        net_r.layers[0].weights = preconditioned_gd_step(net_r.layers[0].weights, gr[0], A, lr)
        mapped = A.apply_rows(net_s.layers[0].weights)
        scale = max(1.0, float(np.max(np.abs(mapped))))
        worst = max(worst, float(np.max(np.abs(mapped - net_r.layers[0].weights))) / scale)
    return CheckResult("preconditioning equivalence", worst <= tol, worst, tol,
                       f"{steps}-step trajectories, relative max difference")


# 5 ---------------------------------------------------------------------------


def _grad_configs(rng):
    """(net, X, Y) triples; order-2 layers only see inputs kept away from knots."""
    out = []
    for k in range(20):
        free = k % 2 == 1
        basis = "spline" if k % 4 < 2 else "relu"
        if k < 6:
            r, widths = 2, [2, 3]
        else:
            r, widths = (3 if k % 3 else 4), [2, 3, 1]
        n = int(rng.integers(3, 7))
        net = build_kan(widths, n, r, basis, free_knots=free, seed=int(rng.integers(1 << 30)))
        if free:
            for layer in net.layers:
                fk = layer.free_knots
                fk.s_interior = rng.normal(scale=0.3, size=fk.s_interior.shape)
                fk.s_left = rng.normal(scale=0.3, size=fk.s_left.shape)
                fk.s_right = rng.normal(scale=0.3, size=fk.s_right.shape)
                layer.knot_vector()
        X = rng.uniform(size=(60, 2))
        if r == 2:
            net.normalize = [False] * len(net.layers)
            X = rng.uniform(-0.95, 0.95, size=(400, 2))
            knots = net.layers[0].kv.knots
            keep = np.all(np.min(np.abs(X[:, :, None] - knots), axis=2) > 1e-3, axis=1)
            X = X[keep][:60]
        Y = rng.normal(size=(X.shape[0], widths[-1]))
        out.append((net, X, Y))
    return out


def check_gradients(seed: int = 0, tol_w: float = 1e-5, tol_s: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_w = worst_s = 0.0
    for net, X, Y in _grad_configs(rng):
        params = net.parameter_arrays()
        w_idx, s_idx, k = [], [], 0
        for layer in net.layers:
            w_idx.append(k)
            k += 1
            fk = layer.free_knots
            if fk is not None:
                for arr in (fk.s_interior, fk.s_left, fk.s_right):
                    if arr.size:
                        s_idx.append(k)
                        k += 1

        def f(tape, vs, net=net, X=X, Y=Y):
            return ad.mse(forward_on_tape(net, X, vs), Y)

        worst_w = max(worst_w, ad.grad_check(f, params, only=w_idx))
        if s_idx:
            worst_s = max(worst_s, ad.grad_check(f, params, only=s_idx))
    ok = worst_w <= tol_w and worst_s <= tol_s
    return CheckResult("gradient checks", ok, max(worst_w / tol_w, worst_s / tol_s), 1.0,
                       f"20 configs; weights {worst_w:.2e} (tol {tol_w:.0e}), knot logits {worst_s:.2e} (tol {tol_s:.0e}); value is worst error / tolerance")


# 6 ---------------------------------------------------------------------------


def check_conditioning(ns=(8, 16, 32, 64, 128)) -> CheckResult:
    ks, kr = [], []
    for n in ns:
        kv = make_uniform_knots(0.0, 1.0, n, 2)
        ks.append(condition_number(gram_matrix(kv, BasisKind.SPLINE)))
        kr.append(condition_number(gram_matrix(kv, BasisKind.TRUNCATED_POWER)))
    growth_r = kr[-1] / kr[0]
    spread_s = max(ks) / min(ks)
    ok = growth_r >= 10 and spread_s <= 4
    return CheckResult("conditioning sweep", ok, spread_s, 4.0,
                       f"kappa(G_R) grows x{growth_r:.2e} (need >= 10); kappa(G_S) spread x{spread_s:.3f} (need <= 4)")


# 7 ---------------------------------------------------------------------------


def check_ntk_bound(seed: int = 0, nets: int = 20, bound: float = 4.0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(nets):
        r = 2 if k % 2 == 0 else 3
        widths = [2, 3, 1] if k % 4 < 2 else [2, 2, 2, 1]
        net = build_kan(widths, int(rng.integers(3, 9)), r, "relu", seed=int(rng.integers(1 << 30)))
        for layer in net.layers:
            layer.weights = rng.normal(size=layer.weights.shape)
        X = rng.uniform(size=(40, 2))
        ntk_r, ntk_s = scaled_ntk_pair(net, X)
        worst = max(worst, spectral_radius(ntk_s) / spectral_radius(ntk_r))
    sigma_ok = True
    sigma_worst = 0.0
    for r in (2, 3, 4):
        bound_r = toeplitz_spectral_bound(r)
        for dim in (8, 16, 32, 64, 128, 256):
            s = scaled_cob_norm(r, dim)
            sigma_worst = max(sigma_worst, s / bound_r)
            sigma_ok &= s <= bound_r * (1 + 1e-12)
    ok = worst <= bound and sigma_ok
    return CheckResult("NTK spectral bound", ok, worst, bound,
                       f"max rho(NTK_S)/rho(NTK_R) over {nets} nets; max sigma_max(A_scaled)/bound {sigma_worst:.6f}")


# 8 ---------------------------------------------------------------------------


def check_toeplitz_limit(dims=(4, 8, 16, 32, 64, 128, 256), slack: float = 1e-3) -> CheckResult:
    worst_drop = 0.0
    gaps = []
    for r in (2, 3, 4):
        vals = [scaled_cob_norm(r, d) for d in dims]
        bound = toeplitz_spectral_bound(r)
        drops = [max(0.0, a - b) for a, b in zip(vals, vals[1:])]
        worst_drop = max(worst_drop, max(drops))
        gaps.append(bound - vals[-1])
    ok = worst_drop <= slack and all(g >= -1e-12 for g in gaps) and max(gaps) < 0.05
    return CheckResult("Toeplitz limit", ok, worst_drop, slack,
                       f"sigma_max monotone in dim; remaining gap to 2^r/(r-1)! at dim {dims[-1]}: "
                       + ", ".join(f"{g:.1e}" for g in gaps))


# 9 ---------------------------------------------------------------------------


def check_batch_size() -> CheckResult:
    m = min_batch_size(0.999, normal_outside_probability(2.0, 3.0))
    return CheckResult("batch-size formula", abs(m - 320) <= 1, float(m), 1.0,
                       f"min batch for tau=0.999, N(0,1) mass on [2,3]: {m}")


# 11 --------------------------------------------------------------------------


def check_nullspace(seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    kv = make_uniform_knots(-1.0, 1.0, 6, 3)
    X = rng.uniform(-1.0, 1.0, size=(500, 2))
    res = nullspace_demo(kv, 2, X)
    ratio = res.sigma_min / res.sigma_max
    ok = ratio <= tol and res.residual <= tol * res.sigma_max
    return CheckResult("nullspace", ok, ratio, tol,
                       f"sigma_min/sigma_max for P=2; kernel residual {res.residual:.1e}")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "1": check_basis_equivalence,
    "2": check_uniform_closed_form,
    "3": check_refinement_exactness,
    "4": check_preconditioning,
    "5": check_gradients,
    "6": check_conditioning,
    "7": check_ntk_bound,
    "8": check_toeplitz_limit,
    "9": check_batch_size,
    "11": check_nullspace,
}


def run_checks(select=None) -> list[CheckResult]:
    keys = list(CHECKS) if select is None else [k for k in CHECKS if k in set(select)]
    return [_timed(CHECKS[k]) for k in keys]

"""Adam, L-BFGS, preconditioned gradient descent and multilevel training.

Training is full batch and deterministic: the same network, data and
configuration always produce the same loss history.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning

from .cob import ChangeOfBasis
from .network import KanLayer, Network, count_flops_per_sample, loss_and_grad
from .knots import BasisKind
from .refinement import refine_network

__all__ = [
    "NumericalFailure",
    "AdamConfig",
    "AdamState",
    "adam_step",
    "LbfgsConfig",
    "LbfgsState",
    "lbfgs_step",
    "Schedule",
    "HistoryRow",
    "TrainResult",
    "train_multilevel",
    "gd_step",
    "preconditioned_gd_step",
    "schedule_flops",
]

log = logging.getLogger(__name__)


class NumericalFailure(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for beta in (self.beta1, self.beta2):
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"betas must lie in [0, 1), got {beta}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, cfg: AdamConfig
) -> list[np.ndarray]:
    """One bias-corrected Adam update with decoupled weight decay."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite gradient in Adam step")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - cfg.beta1**state.step
    c2 = 1.0 - cfg.beta2**state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        p = p * (1.0 - cfg.lr * cfg.weight_decay)
        out.append(p - cfg.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + cfg.eps))
    return out


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LbfgsConfig:
    """L-BFGS settings.

    ``line_search`` is ``"strong_wolfe"`` or ``"none"``; without a line
    search every step has length ``lr`` (the first one of a fresh state
    scaled by ``min(1, 1/|g|_1)``).  An epoch of iterations stops early once the
    loss or the step changes by less than ``tolerance_change``.
    """

    lr: float = 1.0
    history_size: int = 10
    tolerance_grad: float = 1e-12
    tolerance_change: float = 1e-9
    line_search: str = "strong_wolfe"
    c1: float = 1e-4
    c2: float = 0.9
    max_ls: int = 25

    def __post_init__(self):
        if self.history_size < 1:
            raise ValueError("history size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.line_search not in ("strong_wolfe", "none"):
            raise ValueError(f"unknown line search {self.line_search!r}")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class LbfgsState:
    s: list[np.ndarray] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)
    loss: float | None = None
    grad: np.ndarray | None = None
    prev_loss: float | None = None
    iterations: int = 0
    converged: bool = False
    stalled: bool = False
    fallbacks: int = 0

    def reset(self) -> None:
        self.s.clear()
        self.y.clear()
        self.loss = self.grad = self.prev_loss = None
        self.converged = False


def _two_loop(g: np.ndarray, s_list, y_list) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho))
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= (s @ y) / (y @ y)
    for (a, rho), s, y in zip(reversed(alphas), s_list, y_list):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


Closure = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _checked(closure: Closure, x: np.ndarray) -> tuple[float, np.ndarray]:
    loss, grad = closure(x)
    loss = float(loss)
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericalFailure(f"non-finite loss {loss}")
    return loss, np.asarray(grad, dtype=np.float64)


def lbfgs_step(x: np.ndarray, closure: Closure, state: LbfgsState, cfg: LbfgsConfig) -> np.ndarray:
    """One L-BFGS iteration on the flat parameter vector ``x``.

    ``closure(x)`` returns ``(loss, grad)``.  The state caches the loss and
    gradient at the returned point, so consecutive calls evaluate each
    iterate once.  When ``|grad|_inf <= tolerance_grad`` the point is
    returned unchanged and ``state.converged`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if state.grad is None:
        state.loss, state.grad = _checked(closure, x)
    g = state.grad
    if np.max(np.abs(g)) <= cfg.tolerance_grad:
        state.converged = True
        return x
    d = _two_loop(g, state.s, state.y)
    gtd = float(g @ d)
    if cfg.line_search == "none":
        # plain fixed steps: only the very first one is scaled, and a
        # direction that is not a descent direction ends the epoch
        if gtd > -cfg.tolerance_change:
            state.stalled = True
            return x
        first = state.iterations == 0
    else:
        first = not state.s
        if gtd >= 0:
            state.s.clear()
            state.y.clear()
            d, gtd, first = -g, -float(g @ g), True
    t0 = cfg.lr * min(1.0, 1.0 / np.sum(np.abs(g))) if first else cfg.lr

    new = None
    if cfg.line_search == "strong_wolfe":
        new = _wolfe(x, d * t0, closure, state, cfg)
        if new is None:
            state.fallbacks += 1
            log.info("line search failed at iteration %d; taking a gradient step", state.iterations)
            state.s.clear()
            state.y.clear()
            d = -g
            t0 = cfg.lr * min(1.0, 1.0 / np.sum(np.abs(g)))
    if new is None:
        x_new = x + t0 * d
        new = (x_new, *_checked(closure, x_new))
    x_new, loss_new, g_new = new

    s = x_new - x
    y = g_new - g
    if y @ s > 1e-10:
        state.s.append(s)
        state.y.append(y)
        if len(state.s) > cfg.history_size:
            state.s.pop(0)
            state.y.pop(0)
    state.prev_loss = state.loss
    state.loss, state.grad = loss_new, g_new
    state.iterations += 1
    state.converged = bool(np.max(np.abs(g_new)) <= cfg.tolerance_grad)
    state.stalled = bool(
        abs(loss_new - state.prev_loss) < cfg.tolerance_change
        or np.max(np.abs(s)) < cfg.tolerance_change
    )
    return x_new


def _wolfe(x, p, closure, state, cfg):
    """Strong-Wolfe search along ``p`` (unit step first); ``None`` on failure."""
    cache: dict[bytes, tuple[float, np.ndarray]] = {}

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            loss, grad = closure(z)
            loss = float(loss)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                loss, grad = math.inf, np.zeros_like(z)
            cache[key] = (loss, np.asarray(grad, dtype=np.float64))
        return cache[key]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LineSearchWarning)
        with np.errstate(all="ignore"):
            alpha, *_ = line_search(
                lambda z: evaluate(z)[0],
                lambda z: evaluate(z)[1],
                x,
                p,
                gfk=state.grad,
                old_fval=state.loss,
                c1=cfg.c1,
                c2=cfg.c2,
                maxiter=cfg.max_ls,
            )
    if alpha is None or not math.isfinite(alpha):
        return None
    x_new = x + alpha * p
    loss, grad = evaluate(x_new)
    if not math.isfinite(loss):
        return None
    return x_new, loss, grad


# ---------------------------------------------------------------------------
# gradient descent in either basis
# ---------------------------------------------------------------------------


def gd_step(weights: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return weights - lr * grad


def preconditioned_gd_step(
    weights: np.ndarray, grad: np.ndarray, A: ChangeOfBasis | np.ndarray, lr: float = 1.0
) -> np.ndarray:
    """``W - lr * grad @ A.T @ A`` on the channel axis.

    This is the truncated-power image of a plain descent step taken in
    spline coordinates ``W_tilde`` with ``W = W_tilde @ A``.
    """
    dense = A.dense() if isinstance(A, ChangeOfBasis) else np.asarray(A, dtype=np.float64)
    if grad.shape != weights.shape:
        raise ValueError(f"shape mismatch {grad.shape} vs {weights.shape}")
    return weights - lr * (grad @ dense.T @ dense)


# ---------------------------------------------------------------------------
# multilevel training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Epochs per level; the grid is subdivided between consecutive levels."""

    epochs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))
        if not self.epochs:
            raise ValueError("schedule needs at least one level")
        if any(e < 0 for e in self.epochs):
            raise ValueError("epoch counts must be nonnegative")

    @classmethod
    def parse(cls, text: "str | Sequence[int] | Schedule") -> "Schedule":
        if isinstance(text, Schedule):
            return text
        if isinstance(text, str):
            text = [int(tok) for tok in text.replace("[", "").replace("]", "").split(",") if tok.strip()]
        return cls(tuple(text))

    @property
    def levels(self) -> int:
        return len(self.epochs)

    def __str__(self) -> str:
        return "[" + ",".join(str(e) for e in self.epochs) + "]"

    def scaled(self, factor: float) -> "Schedule":
        """Divide epoch counts by ``1/factor``, keeping nonzero levels nonzero."""
        return Schedule(tuple(0 if e == 0 else max(1, math.ceil(e * factor)) for e in self.epochs))


@dataclass(frozen=True)
class HistoryRow:
    level: int
    epoch: int
    loss: float
    grad_norm: float


@dataclass
class TrainResult:
    net: Network
    history: list[HistoryRow]
    transfers: list[tuple[int, float, float]]
    converged: bool = False
    line_search_fallbacks: int = 0

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss


def _layer_param_counts(net: Network) -> list[int]:
    counts = []
    for layer in net.layers:
        if isinstance(layer, KanLayer):
            fk = layer.free_knots
            extra = 0 if fk is None else sum(1 for a in (fk.s_interior, fk.s_left, fk.s_right) if a.size)
            counts.append(1 + extra)
        else:
            counts.append(1 + (layer.biases is not None))
    return counts


def _prolong_adam(state: AdamState, old: Network, new: Network, ops) -> AdamState:
    """Carry Adam moments across a refinement where this is exact, reset elsewhere."""
    if not state.m:
        return state
    fresh = new.parameter_arrays()
    m, v = [], []
    k = 0
    for layer, op, count in zip(old.layers, ops, _layer_param_counts(old)):
        exact = op is not None and layer.free_knots is None and layer.basis is BasisKind.SPLINE
        for c in range(count):
            if c == 0 and exact:
                m.append(op.prolong(state.m[k]))
                v.append(op.prolong(state.v[k]))
            elif state.m[k].shape == fresh[k].shape and op is None:
                m.append(state.m[k].copy())
                v.append(state.v[k].copy())
            else:
                m.append(np.zeros_like(fresh[k]))
                v.append(np.zeros_like(fresh[k]))
            k += 1
    return AdamState(state.step, m, v)


def train_multilevel(
    net: Network,
    X: np.ndarray,
    Y: np.ndarray,
    schedule: Schedule | Sequence[int] | str,
    optimizer: LbfgsConfig | AdamConfig | None = None,
    iters_per_epoch: int = 20,
) -> TrainResult:
    """Train level by level, subdividing every KAN grid between levels.

    An epoch is ``iters_per_epoch`` full-batch L-BFGS iterations, or one
    full-batch Adam step.  The history has a row at the start of every
    level (for levels after the first, the loss right after the transfer)
    and one after each epoch.  L-BFGS curvature pairs are discarded at
    each transfer; Adam moments of fixed-knot spline weights are prolonged
    with the same operator as the weights.
    """
    schedule = Schedule.parse(schedule)
    optimizer = LbfgsConfig() if optimizer is None else optimizer
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    net = net.copy()
    history: list[HistoryRow] = []
    transfers: list[tuple[int, float, float]] = []
    epoch = 0
    adam = AdamState()
    fallbacks = 0
    converged = False

    def closure(flat):
        net.set_flat(flat)
        loss, grads = loss_and_grad(net, X, Y)
        return loss, np.concatenate([g.ravel() for g in grads])

    def record(level):
        loss, grad = _checked(closure, net.get_flat())
        history.append(HistoryRow(level, epoch, loss, float(np.linalg.norm(grad))))
        return loss

    for level, n_epochs in enumerate(schedule.epochs):
        if level > 0:
            before = history[-1].loss
            closure(net.get_flat())
            refined, ops = refine_network(net, return_ops=True)
            if isinstance(optimizer, AdamConfig):
                adam = _prolong_adam(adam, net, refined, ops)
            net = refined
            after = record(level)
            transfers.append((level, before, after))
        else:
            record(level)
        state = LbfgsState()
        for _ in range(n_epochs):
            if isinstance(optimizer, AdamConfig):
                _, grads = loss_and_grad(net, X, Y)
                net.set_parameter_arrays(adam_step(net.parameter_arrays(), grads, adam, optimizer))
            else:
                x = net.get_flat()
                for _ in range(iters_per_epoch):
                    x = lbfgs_step(x, closure, state, optimizer)
                    if state.converged or state.stalled:
                        break
                net.set_flat(x)
            epoch += 1
            record(level)
            converged = state.converged
        fallbacks = max(fallbacks, state.fallbacks)
    # leave the stored normalization consistent with the final weights
    closure(net.get_flat())
    return TrainResult(net, history, transfers, converged, fallbacks)


def schedule_flops(net: Network, schedule: Schedule | Sequence[int] | str, samples: int = 1) -> int:
    """Nominal forward FLOPs of a schedule: epochs times per-sample cost per level."""
    schedule = Schedule.parse(schedule)
    total = 0
    current = net
    for level, e in enumerate(schedule.epochs):
        if level > 0:
            current = refine_network(current)
        total += e * count_flops_per_sample(current) * samples
    return total

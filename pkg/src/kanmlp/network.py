"""KAN layers as multichannel MLPs, plain reordered MLP layers, and networks.

A KAN layer maps ``(batch, P)`` to ``(batch, Q)`` through

    y_q = sum_p sum_i W[q, p, i] * phi_i(x_p)

where ``phi`` is either the B-spline basis or the truncated-power
(``ReLU**(r-1)``) basis on the layer's knot vector.  Inputs of every KAN
layer are min-max normalized onto the spline domain ``[a, b]``.

Two forward paths exist: :func:`network_forward` evaluates with plain numpy
(Cox-de Boor for the spline basis), and :func:`forward_on_tape` records a
differentiable evaluation in which every layer is computed as a truncated
power expansion with effective weights ``W_tilde @ A``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .basis import eval_basis
from .cob import apply_cob, apply_cob_inverse, build_Ar, cob_matrix_on_tape
from .knots import (
    BasisKind,
    FreeKnotParam,
    KnotVector,
    free_knots_on_tape,
    knots_from_params,
    make_uniform_knots,
)

__all__ = [
    "KanLayer",
    "MlpLayer",
    "Network",
    "AffineRecord",
    "build_kan",
    "build_mlp",
    "kan_layer_forward",
    "mlp_layer_forward",
    "normalize_uniform",
    "network_forward",
    "forward_on_tape",
    "loss_and_grad",
    "count_params",
    "count_flops_per_sample",
    "convert_basis",
    "FLOPS_PER_MULTIPLY_ADD",
]

FLOPS_PER_MULTIPLY_ADD = 2


@dataclass
class KanLayer:
    P: int
    Q: int
    kv: KnotVector
    basis: BasisKind
    weights: np.ndarray
    free_knots: FreeKnotParam | None = None

    def __post_init__(self):
        self.basis = BasisKind.parse(self.basis)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.Q, self.P, self.kv.dim):
            raise ValueError(
                f"weights {self.weights.shape} inconsistent with (Q, P, dim) = "
                f"({self.Q}, {self.P}, {self.kv.dim})"
            )
        if self.free_knots is not None:
            self.kv = knots_from_params(self.kv.a, self.kv.b, self.free_knots, self.kv.r)

    @property
    def r(self) -> int:
        return self.kv.r

    @property
    def n(self) -> int:
        return self.kv.n

    def knot_vector(self) -> KnotVector:
        """Current knots (regenerated from the logits for free-knot layers)."""
        if self.free_knots is not None:
            self.kv = knots_from_params(self.kv.a, self.kv.b, self.free_knots, self.kv.r)
        return self.kv


@dataclass
class MlpLayer:
    """``y_q = sum_p W[q, p] * relu(x_p - t_p)``; with no biases, a plain linear map."""

    weights: np.ndarray
    biases: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.biases is not None:
            self.biases = np.asarray(self.biases, dtype=np.float64)
            if self.biases.shape != (self.P,):
                raise ValueError(f"expected {self.P} biases, got {self.biases.shape}")

    @property
    def P(self) -> int:
        return self.weights.shape[1]

    @property
    def Q(self) -> int:
        return self.weights.shape[0]


@dataclass
class AffineRecord:
    """Column-wise affine map ``x * scale + shift`` captured from a batch."""

    scale: np.ndarray
    shift: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.shift


@dataclass
class Network:
    layers: list
    normalize: list[bool]
    domain: tuple[float, float] = (-1.0, 1.0)
    frozen: list[AffineRecord | None] = field(default_factory=list)

    def __post_init__(self):
        if len(self.normalize) != len(self.layers):
            raise ValueError("one normalization flag per layer is required")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.Q != nxt.P:
                raise ValueError(f"width mismatch between layers: {prev.Q} -> {nxt.P}")
        if not self.frozen:
            self.frozen = [None] * len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].P] + [layer.Q for layer in self.layers]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    # -- flat parameter access used by the optimizers -------------------------

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if isinstance(layer, KanLayer):
                out.append(layer.weights)
                if layer.free_knots is not None:
                    fk = layer.free_knots
                    out.extend(a for a in (fk.s_interior, fk.s_left, fk.s_right) if a.size)
            else:
                out.append(layer.weights)
                if layer.biases is not None:
                    out.append(layer.biases)
        return out

    def set_parameter_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        it = iter(arrays)
        for layer in self.layers:
            if isinstance(layer, KanLayer):
                layer.weights = np.array(next(it), dtype=np.float64)
                if layer.free_knots is not None:
                    fk = layer.free_knots
                    for name in ("s_interior", "s_left", "s_right"):
                        if getattr(fk, name).size:
                            setattr(fk, name, np.array(next(it), dtype=np.float64))
                    layer.knot_vector()
            else:
                layer.weights = np.array(next(it), dtype=np.float64)
                if layer.biases is not None:
                    layer.biases = np.array(next(it), dtype=np.float64)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.parameter_arrays()])

    def set_flat(self, flat: np.ndarray) -> None:
        arrays, start = [], 0
        for a in self.parameter_arrays():
            arrays.append(flat[start : start + a.size].reshape(a.shape))
            start += a.size
        if start != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, network has {start}")
        self.set_parameter_arrays(arrays)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def build_kan(
    widths: Sequence[int],
    n: int,
    r: int,
    basis: BasisKind | str = BasisKind.SPLINE,
    free_knots: bool = False,
    seed: int = 0,
    domain: tuple[float, float] = (-1.0, 1.0),
) -> Network:
    """KAN with a shared uniform grid per layer and seeded uniform init.

    Weights are drawn from ``U[-s, s]`` with ``s = (P * (n + r - 1)) ** -0.5``.
    """
    rng = np.random.default_rng(seed)
    a, b = domain
    layers = []
    for P, Q in zip(widths, widths[1:]):
        kv = make_uniform_knots(a, b, n, r)
        s = (P * kv.dim) ** -0.5
        w = rng.uniform(-s, s, size=(Q, P, kv.dim))
        fk = FreeKnotParam.zeros(n, r) if free_knots else None
        layers.append(KanLayer(P, Q, kv, BasisKind.parse(basis), w, fk))
    return Network(layers, [True] * len(layers), (float(a), float(b)))


def build_mlp(widths: Sequence[int], seed: int = 0, domain: tuple[float, float] = (-1.0, 1.0)) -> Network:
    """Reordered ReLU MLP: a linear first layer, then ``W relu(x - t)`` layers.

    Only the network input is normalized.  Init follows the usual
    ``U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` rule for weights and biases.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for k, (P, Q) in enumerate(zip(widths, widths[1:])):
        s = P**-0.5
        w = rng.uniform(-s, s, size=(Q, P))
        t = None
        if k > 0:
            fan = widths[k - 1] ** -0.5
            t = rng.uniform(-fan, fan, size=P)
        layers.append(MlpLayer(w, t))
    flags = [True] + [False] * (len(layers) - 1)
    return Network(layers, flags, (float(domain[0]), float(domain[1])))


# ---------------------------------------------------------------------------
# numpy forward
# ---------------------------------------------------------------------------


def _check_batch(X: np.ndarray, P: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != P or X.shape[0] < 1:
        raise ValueError(f"expected a (batch >= 1, {P}) input, got {X.shape}")
    if np.isnan(X).any():
        raise ValueError("NaN in layer input")
    return X


def kan_layer_forward(layer: KanLayer, X) -> np.ndarray:
    X = _check_batch(X, layer.P)
    feats = eval_basis(layer.knot_vector(), layer.basis, X)
    return np.einsum("dpi,qpi->dq", feats, layer.weights, optimize=True)


def mlp_layer_forward(layer: MlpLayer, X) -> np.ndarray:
    X = _check_batch(X, layer.P)
    if layer.biases is not None:
        X = np.maximum(X - layer.biases, 0.0)
    return X @ layer.weights.T


def normalize_uniform(batch, target: tuple[float, float]) -> tuple[np.ndarray, AffineRecord]:
    """Per-column affine map of ``[min, max]`` onto ``target``.

    Constant columns go to the midpoint of the target interval.
    """
    tape = ad.Tape()
    out, scale, shift = ad.minmax_normalize(tape.const(batch), *target)
    return out.value, AffineRecord(scale, shift)


def network_forward(net: Network, X, frozen: bool = False) -> np.ndarray:
    """Evaluate the network with numpy.

    With ``frozen=False`` every normalized layer recomputes its affine map
    from the batch and stores it; with ``frozen=True`` the stored maps are
    reused so each sample is evaluated independently.
    """
    x = np.asarray(X, dtype=np.float64)
    for k, (layer, norm) in enumerate(zip(net.layers, net.normalize)):
        if norm:
            if frozen:
                if net.frozen[k] is None:
                    raise ValueError(f"layer {k} has no frozen normalization yet")
                x = net.frozen[k].apply(x)
            else:
                x, net.frozen[k] = normalize_uniform(x, net.domain)
        if isinstance(layer, KanLayer):
            x = kan_layer_forward(layer, x)
        else:
            x = mlp_layer_forward(layer, x)
    return x


# ---------------------------------------------------------------------------
# differentiable forward
# ---------------------------------------------------------------------------


def _kan_on_tape(layer: KanLayer, x: ad.Var, leaves: list[ad.Var]) -> ad.Var:
    tape = x.tape
    kv = layer.kv
    r, dim = kv.r, kv.dim
    weights = leaves.pop(0)
    if layer.free_knots is not None:
        logits = []
        for arr in (layer.free_knots.s_interior, layer.free_knots.s_left, layer.free_knots.s_right):
            logits.append(leaves.pop(0) if arr.size else tape.const(arr))
        knots = free_knots_on_tape(kv.a, kv.b, r, *logits)
        A = cob_matrix_on_tape(knots, dim, r) if layer.basis is BasisKind.SPLINE else None
    else:
        knots = tape.const(kv.knots)
        A = tape.const(build_Ar(kv).dense()) if layer.basis is BasisKind.SPLINE else None
    if r == 1:
        raise ValueError("order-1 layers are not differentiable")
    w_eff = ad.contract("qpi,ij->qpj", weights, A) if A is not None else weights
    return ad.trunc_power_contract(x, knots[:dim], w_eff, r - 1)


def _mlp_on_tape(layer: MlpLayer, x: ad.Var, leaves: list[ad.Var]) -> ad.Var:
    weights = leaves.pop(0)
    if layer.biases is not None:
        x = ad.relu_pow(x - leaves.pop(0), 1)
    return ad.contract("dp,qp->dq", x, weights)


def forward_on_tape(
    net: Network, X, leaves: Sequence[ad.Var], frozen: bool = False
) -> ad.Var:
    """Record a forward pass; ``leaves`` follow :meth:`Network.parameter_arrays`.

    Batch normalization statistics are differentiated through and the
    realized affine maps are stored on ``net`` unless ``frozen``.
    """
    if not leaves:
        raise ValueError("no parameter variables given")
    tape = leaves[0].tape
    pending = list(leaves)
    x = X if isinstance(X, ad.Var) else tape.const(X)
    for k, (layer, norm) in enumerate(zip(net.layers, net.normalize)):
        if norm:
            if frozen:
                rec = net.frozen[k]
                if rec is None:
                    raise ValueError(f"layer {k} has no frozen normalization yet")
                x = ad.affine(x, rec.scale, rec.shift)
            else:
                x, scale, shift = ad.minmax_normalize(x, *net.domain)
                net.frozen[k] = AffineRecord(scale, shift)
        if isinstance(layer, KanLayer):
            x = _kan_on_tape(layer, x, pending)
        else:
            x = _mlp_on_tape(layer, x, pending)
    if pending:
        raise ValueError(f"{len(pending)} parameter variables were not consumed")
    return x


def loss_and_grad(net: Network, X, Y, frozen: bool = False) -> tuple[float, list[np.ndarray]]:
    """Mean squared error of ``net`` on ``(X, Y)`` and its parameter gradients."""
    tape = ad.Tape()
    leaves = [tape.var(a) for a in net.parameter_arrays()]
    pred = forward_on_tape(net, X, leaves, frozen=frozen)
    loss = ad.mse(pred, np.asarray(Y, dtype=np.float64).reshape(pred.shape))
    tape.backward(loss)
    grads = [v.grad for v in leaves]
    tape.nodes.clear()  # drop tape <-> node reference cycles right away
    return float(loss.value), grads


def convert_basis(net: Network, kind: BasisKind | str) -> Network:
    """Copy of ``net`` with every KAN layer re-expressed in basis ``kind``.

    The network function is unchanged (up to rounding).
    """
    kind = BasisKind.parse(kind)
    out = net.copy()
    for layer in out.layers:
        if not isinstance(layer, KanLayer) or layer.basis is kind:
            continue
        A = build_Ar(layer.knot_vector())
        if kind is BasisKind.TRUNCATED_POWER:
            layer.weights = apply_cob(layer.weights, A)
        else:
            layer.weights = apply_cob_inverse(layer.weights, A)
        layer.basis = kind
    return out


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def count_params(net: Network) -> int:
    """Trainable parameters: KAN weights (+ knot logits) and MLP weights/biases."""
    return int(sum(a.size for a in net.parameter_arrays()))


def count_flops_per_sample(net: Network) -> int:
    """Forward FLOPs per sample.

    A KAN layer costs ``2 * P * Q * (n + r)``: one multiply-add per weight
    after the truncated-power features are formed; an MLP layer ``2 * P * Q``.
    """
    total = 0
    for layer in net.layers:
        if isinstance(layer, KanLayer):
            total += FLOPS_PER_MULTIPLY_ADD * layer.P * layer.Q * (layer.n + layer.r)
        else:
            total += FLOPS_PER_MULTIPLY_ADD * layer.P * layer.Q
    return total

"""Small reverse-mode automatic differentiation engine on numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Var` in
execution order; :meth:`Tape.backward` sweeps the record in reverse and
accumulates adjoints.  Only the primitives needed by the KAN layers, the
free-knot parameterization and the training losses are provided.

Example
-------
>>> tape = Tape()
>>> w = tape.var(np.array([1.0, 2.0]))
>>> loss = sum_(w * w)
>>> tape.backward(loss)
>>> w.grad
array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "contract",
    "relu_pow",
    "trunc_power_contract",
    "softmax",
    "cumsum",
    "affine",
    "concat",
    "reshape",
    "sum_",
    "mse",
    "minmax_normalize",
    "grad_check",
]


class Var:
    """A value recorded on a tape, with a gradient buffer of the same shape."""

    __slots__ = ("value", "grad", "requires_grad", "tape", "_parents", "_backward")

    def __init__(self, value, tape: "Tape", requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended as they are computed, so the record is always in a
    valid topological order and the reverse sweep needs no sorting.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value, requires_grad: bool = True) -> Var:
        """Create a leaf variable (a trainable parameter by default)."""
        v = Var(np.array(value, dtype=np.float64), self, requires_grad)
        self.nodes.append(v)
        return v

    def const(self, value) -> Var:
        return self.var(value, requires_grad=False)

    def record(self, value, parents: Sequence[Var], backward) -> Var:
        """Append the result of a primitive.

        ``backward`` maps the output adjoint to one adjoint per parent
        (``None`` for parents that need none).
        """
        needs = any(p.requires_grad for p in parents)
        v = Var(value, self, needs)
        if needs:
            v._parents = tuple(parents)
            v._backward = backward
        self.nodes.append(v)
        return v

    def backward(self, loss: Var) -> None:
        """Populate ``grad`` on every variable that requires it."""
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        for v in self.nodes:
            v.grad = None
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.value)
            for v in reversed(self.nodes):
                if v._backward is None or v.grad is None:
                    continue
                grads = v._backward(v.grad)
                for parent, g in zip(v._parents, grads):
                    if g is None or not parent.requires_grad:
                        continue
                    if parent.grad is None:
                        parent.grad = np.array(g, dtype=np.float64, copy=True).reshape(parent.shape)
                    else:
                        parent.grad += g
        for v in self.nodes:
            if v.requires_grad and v.grad is None:
                v.grad = np.zeros_like(v.value)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one argument must be a Var")


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(x, y) -> Var:
    tape = _tape_of(x, y)
    x, y = _lift(x, tape), _lift(y, tape)
    sx, sy = x.shape, y.shape
    return tape.record(
        x.value + y.value, (x, y), lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy))
    )


def sub(x, y) -> Var:
    tape = _tape_of(x, y)
    x, y = _lift(x, tape), _lift(y, tape)
    sx, sy = x.shape, y.shape
    return tape.record(
        x.value - y.value, (x, y), lambda g: (_unbroadcast(g, sx), -_unbroadcast(g, sy))
    )


def mul(x, y) -> Var:
    tape = _tape_of(x, y)
    x, y = _lift(x, tape), _lift(y, tape)
    xv, yv = x.value, y.value

    def backward(g):
        return _unbroadcast(g * yv, xv.shape), _unbroadcast(g * xv, yv.shape)

    return tape.record(xv * yv, (x, y), backward)


def div(x, y) -> Var:
    tape = _tape_of(x, y)
    x, y = _lift(x, tape), _lift(y, tape)
    xv, yv = x.value, y.value
    out = xv / yv

    def backward(g):
        gx = g / yv
        return _unbroadcast(gx, xv.shape), _unbroadcast(-gx * out, yv.shape)

    return tape.record(out, (x, y), backward)


def neg(x: Var) -> Var:
    return x.tape.record(-x.value, (x,), lambda g: (-g,))


def affine(x: Var, scale, shift) -> Var:
    """``x * scale + shift`` with broadcasting; scale and shift may be Vars."""
    return add(mul(x, scale), shift)


def _int_power(x: np.ndarray, k: int) -> np.ndarray:
    """``x ** k`` by repeated multiplication (much faster than ``np.power``)."""
    out = x
    for _ in range(k - 1):
        out = out * x
    return out


def relu_pow(x: Var, k: int) -> Var:
    """``max(x, 0) ** k`` for integer ``k >= 1``.

    The adjoint at exactly ``x = 0`` is taken as 0 for every k, which is
    the true derivative for ``k >= 2`` and the usual subgradient for k = 1.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"relu_pow needs an integer power k >= 1, got {k}")
    k = int(k)
    pos = np.maximum(x.value, 0.0)
    if k == 1:
        mask = (x.value > 0.0).astype(np.float64)
        return x.tape.record(pos, (x,), lambda g: (g * mask,))
    lower = _int_power(pos, k - 1)
    out = lower * pos
    return x.tape.record(out, (x,), lambda g: (g * (k * lower),))


def trunc_power_contract(x, knots, weights, k: int) -> Var:
    """Fused ``y[d, q] = sum_{p, j} w[q, p, j] * max(x[d, p] - t[j], 0) ** k``.

    Equivalent to ``contract("dpj,qpj->dq", relu_pow(x[..., None] - t, k), w)``
    but without the broadcast temporaries on the tape.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"power must be an integer >= 1, got {k}")
    k = int(k)
    tape = _tape_of(x, knots, weights)
    x, knots, weights = _lift(x, tape), _lift(knots, tape), _lift(weights, tape)
    xv, tv, wv = x.value, knots.value, weights.value
    if xv.ndim != 2 or tv.ndim != 1 or wv.shape[1:] != (xv.shape[1], tv.shape[0]):
        raise ValueError(f"incompatible shapes {xv.shape}, {tv.shape}, {wv.shape}")
    D, P = xv.shape
    Q, J = wv.shape[0], tv.shape[0]
    # (D, P*J) layout, channel index fastest; avoids slow broadcasting over a short axis
    pos = np.repeat(xv, J, axis=1)
    pos -= np.tile(tv, P)
    np.maximum(pos, 0.0, out=pos)
    F = pos
    if k > 1:
        F = pos * pos
        for _ in range(k - 2):
            F *= pos
    Wm = wv.reshape(Q, P * J)

    def backward(g):
        gw = (g.T @ F).reshape(wv.shape) if weights.requires_grad else None
        gx = gt = None
        if x.requires_grad or knots.requires_grad:
            # slope k * pos**(k-1), built in place on the upstream product
            gz = g @ Wm
            if k == 1:
                gz *= pos > 0.0
            else:
                for _ in range(k - 1):
                    gz *= pos
                gz *= k
            if x.requires_grad:
                gx = gz.reshape(D, P, J).sum(axis=2)
            if knots.requires_grad:
                gt = -gz.sum(axis=0).reshape(P, J).sum(axis=0)
        return gx, gt, gw

    return tape.record(F @ Wm.T, (x, knots, weights), backward)


# ---------------------------------------------------------------------------
# reductions, shape ops, contractions
# ---------------------------------------------------------------------------


def sum_(x: Var, axis=None) -> Var:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape.record(x.value.sum(axis=axis), (x,), backward)


def getitem(x: Var, index) -> Var:
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return x.tape.record(x.value[index], (x,), backward)


def reshape(x: Var, shape) -> Var:
    old = x.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = 0) -> Var:
    tape = _tape_of(*parts)
    vs = [_lift(p, tape) for p in parts]
    sizes = [v.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record(np.concatenate([v.value for v in vs], axis=axis), vs, backward)


def _einsum_grad_spec(spec: str) -> tuple[str, str]:
    lhs, out = spec.replace(" ", "").split("->")
    a, b = lhs.split(",")
    for idx in a:
        if idx not in out and idx not in b:
            raise ValueError(f"index {idx!r} summed out of a single operand in {spec!r}")
    for idx in b:
        if idx not in out and idx not in a:
            raise ValueError(f"index {idx!r} summed out of a single operand in {spec!r}")
    return f"{out},{b}->{a}", f"{a},{out}->{b}"


def contract(spec: str, x, y) -> Var:
    """Two-operand ``np.einsum`` contraction, e.g. ``"dpi,qpi->dq"``."""
    tape = _tape_of(x, y)
    x, y = _lift(x, tape), _lift(y, tape)
    ga, gb = _einsum_grad_spec(spec)
    xv, yv = x.value, y.value

    def backward(g):
        gx = np.einsum(ga, g, yv, optimize=True) if x.requires_grad else None
        gy = np.einsum(gb, xv, g, optimize=True) if y.requires_grad else None
        return gx, gy

    return tape.record(np.einsum(spec, xv, yv, optimize=True), (x, y), backward)


def softmax(x: Var) -> Var:
    """Softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return x.tape.record(s, (x,), backward)


def cumsum(x: Var) -> Var:
    """Cumulative sum over the last axis."""

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1),)

    return x.tape.record(np.cumsum(x.value, axis=-1), (x,), backward)


def mse(pred: Var, target, half: bool = False) -> Var:
    """Mean squared error over all entries (``half`` multiplies by 1/2)."""
    tape = pred.tape
    t = target.value if isinstance(target, Var) else np.asarray(target, dtype=np.float64)
    r = pred.value - t
    scale = (0.5 if half else 1.0) / r.size
    value = scale * float(np.dot(r.ravel(), r.ravel()))

    def backward(g):
        return (g * (2.0 * scale) * r,)

    return tape.record(np.asarray(value), (pred,), backward)


def minmax_normalize(x: Var, a: float, b: float) -> tuple[Var, np.ndarray, np.ndarray]:
    """Column-wise affine map of a batch sending ``[min, max]`` onto ``[a, b]``.

    The column extrema are differentiated through (adjoint routed to the
    first arg-min / arg-max row).  Constant columns are sent to the midpoint
    with zero derivative.  Returns the output and the ``(scale, shift)``
    arrays of the realized affine map.
    """
    xv = x.value
    if xv.ndim != 2:
        raise ValueError("minmax_normalize expects a (batch, features) matrix")
    lo_idx = np.argmin(xv, axis=0)
    hi_idx = np.argmax(xv, axis=0)
    cols = np.arange(xv.shape[1])
    lo = xv[lo_idx, cols]
    hi = xv[hi_idx, cols]
    span = hi - lo
    flat = span <= 0.0
    safe = np.where(flat, 1.0, span)
    scale = np.where(flat, 0.0, (b - a) / safe)
    shift = np.where(flat, 0.5 * (a + b), a - scale * lo)
    out = xv * scale + shift
    u = np.where(flat, 0.0, (xv - lo) / safe)

    def backward(g):
        gx = g * scale
        d_lo = -(g * scale * (1.0 - u)).sum(axis=0)
        d_hi = -(g * scale * u).sum(axis=0)
        gx[lo_idx, cols] += np.where(flat, 0.0, d_lo)
        gx[hi_idx, cols] += np.where(flat, 0.0, d_hi)
        return (gx,)

    return x.tape.record(out, (x,), backward), scale, shift


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tape, list[Var]], Var],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    only: Sequence[int] | None = None,
) -> float:
    """Compare tape gradients against central finite differences.

    ``f(tape, vars)`` must build a scalar loss from the given leaf
    variables.  Returns ``max |g_ad - g_fd| / (|g_fd| + 1e-8)`` over every
    entry of the parameters listed in ``only`` (default: all).
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.var(p) for p in params]
    tape.backward(f(tape, leaves))
    ad = [v.grad for v in leaves]

    def value(ps):
        t = Tape()
        return float(f(t, [t.const(p) for p in ps]).value)

    worst = 0.0
    for k, p in enumerate(params):
        if only is not None and k not in only:
            continue
        flat = p.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = value(params)
            flat[j] = orig - step
            down = value(params)
            flat[j] = orig
            fd = (up - down) / (2.0 * step)
            err = abs(ad[k].ravel()[j] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst

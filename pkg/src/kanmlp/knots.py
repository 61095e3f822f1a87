"""Extended knot vectors for the spline space S_r(T) on [a, b].

Knots are stored 0-based: ``knots[k]`` is the mathematical knot
``t_{k+1-r}``, so ``knots[r-1] == a`` and ``knots[n+r-1] == b``.  The
vector holds ``n + 2r - 1`` strictly increasing values and spans a basis of
dimension ``n + r - 1``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "BasisKind",
    "KnotVector",
    "FreeKnotParam",
    "make_uniform_knots",
    "knots_from_params",
    "free_knots_on_tape",
    "params_from_knots",
    "logits_from_fractions",
    "side_logit_count",
    "MIN_GAP_FRACTION",
]


class BasisKind(str, enum.Enum):
    """Which of the two equivalent bases a layer's weights are expressed in."""

    SPLINE = "spline"
    TRUNCATED_POWER = "relu"

    @classmethod
    def parse(cls, value: "BasisKind | str") -> "BasisKind":
        if isinstance(value, cls):
            return value
        aliases = {"spline": cls.SPLINE, "relu": cls.TRUNCATED_POWER,
                   "truncated_power": cls.TRUNCATED_POWER, "truncatedpower": cls.TRUNCATED_POWER}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown basis kind {value!r}") from None


@dataclass(frozen=True)
class KnotVector:
    a: float
    b: float
    r: int
    n: int
    knots: np.ndarray = field(repr=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        if self.r < 1 or self.n < 1:
            raise ValueError(f"need r >= 1 and n >= 1, got r={self.r}, n={self.n}")
        if knots.shape != (self.n + 2 * self.r - 1,):
            raise ValueError(
                f"expected {self.n + 2 * self.r - 1} knots for n={self.n}, r={self.r}, "
                f"got {knots.shape}"
            )
        if not np.all(np.diff(knots) > 0):
            raise ValueError("knots must be strictly increasing")
        if knots[self.r - 1] != self.a or knots[self.n + self.r - 1] != self.b:
            raise ValueError("knot vector must satisfy t_0 = a and t_n = b")

    @property
    def dim(self) -> int:
        """Dimension of S_r(T), i.e. the number of basis functions."""
        return self.n + self.r - 1

    @property
    def interior(self) -> np.ndarray:
        """The knots ``t_0 = a, ..., t_n = b``."""
        return self.knots[self.r - 1 : self.n + self.r]

    def t(self, i: int) -> float:
        """Knot with the mathematical index ``i`` (``1 - r <= i <= n + r - 1``)."""
        return float(self.knots[i + self.r - 1])

    def is_uniform(self, rtol: float = 1e-12) -> bool:
        gaps = np.diff(self.knots)
        return bool(np.allclose(gaps, gaps[0], rtol=rtol, atol=0.0))

    def __eq__(self, other):
        if not isinstance(other, KnotVector):
            return NotImplemented
        return (self.a, self.b, self.r, self.n) == (other.a, other.b, other.r, other.n) and bool(
            np.array_equal(self.knots, other.knots)
        )

    def __hash__(self):
        return hash((self.a, self.b, self.r, self.n, self.knots.tobytes()))


def make_uniform_knots(a: float, b: float, n: int, r: int) -> KnotVector:
    """Uniform knots ``t_i = a + i h``, ``h = (b - a) / n``, for ``i = 1-r .. n+r-1``."""
    if not a < b:
        raise ValueError(f"need a < b, got [{a}, {b}]")
    if n < 1 or r < 1:
        raise ValueError(f"need n >= 1 and r >= 1, got n={n}, r={r}")
    a, b = float(a), float(b)
    idx = np.arange(1 - r, n + r)
    knots = a + idx * ((b - a) / n)
    knots[r - 1] = a
    knots[n + r - 1] = b
    return KnotVector(a, b, r, n, knots)


# smallest gap as a fraction of its construction interval
MIN_GAP_FRACTION = 1e-12


def side_logit_count(r: int) -> int:
    """Logits per side for the extension knots (none needed when r <= 2)."""
    return r - 1 if r >= 3 else 0


@dataclass
class FreeKnotParam:
    """Gap logits for trainable knots.

    ``s_interior`` has one entry per interior interval; ``s_left`` and
    ``s_right`` place the ``r - 1`` extension knots on each side, whose
    outermost positions are pinned at ``a - (b - a)`` and ``b + (b - a)``.
    """

    s_interior: np.ndarray
    s_left: np.ndarray
    s_right: np.ndarray

    @classmethod
    def zeros(cls, n: int, r: int) -> "FreeKnotParam":
        m = side_logit_count(r)
        return cls(np.zeros(n), np.zeros(m), np.zeros(m))

    @property
    def n(self) -> int:
        return int(np.size(self.s_interior))

    @property
    def size(self) -> int:
        return int(np.size(self.s_interior) + np.size(self.s_left) + np.size(self.s_right))

    def copy(self) -> "FreeKnotParam":
        return FreeKnotParam(
            np.array(self.s_interior, dtype=float),
            np.array(self.s_left, dtype=float),
            np.array(self.s_right, dtype=float),
        )


def _gap_fractions(s: ad.Var) -> ad.Var:
    """Softmax with every fraction floored at ``MIN_GAP_FRACTION``.

    A plain softmax of extreme logits yields gaps far below the float
    spacing near ``b``, collapsing knots; the floor keeps them distinct
    while zero logits still give equal gaps.
    """
    m = s.shape[0]
    return ad.softmax(s) * (1.0 - m * MIN_GAP_FRACTION) + MIN_GAP_FRACTION


def logits_from_fractions(fractions) -> np.ndarray:
    """Inverse of the floored softmax (up to an additive constant).

    Fractions at or below the floor map to a very negative logit.
    """
    f = np.asarray(fractions, dtype=np.float64)
    core = (f - MIN_GAP_FRACTION) / (1.0 - f.size * MIN_GAP_FRACTION)
    return np.log(np.maximum(core, 1e-300))


def free_knots_on_tape(a: float, b: float, r: int, s_int, s_left, s_right) -> ad.Var:
    """Differentiable knot construction from gap logits (all arguments Vars).

    Interior knots are ``a + (b - a) * cumsum(gaps)`` with gap fractions
    from a floored softmax of ``s_int`` and the endpoints pinned exactly at
    a and b; the extension knots repeat the construction over
    ``[a - (b - a), a]`` and ``[b, b + (b - a)]``.
    """
    width = b - a
    n = s_int.shape[0]
    parts: list = []
    if r >= 2:
        if r == 2:
            parts.append(np.array([a - width]))
        else:
            left = ad.cumsum(_gap_fractions(s_left) * width) + (a - width)
            parts.extend([np.array([a - width]), left[: r - 2]])
    parts.append(np.array([a]))
    if n > 1:
        inner = ad.cumsum(_gap_fractions(s_int) * width) + a
        parts.append(inner[: n - 1])
    parts.append(np.array([b]))
    if r >= 2:
        if r == 2:
            parts.append(np.array([b + width]))
        else:
            right = ad.cumsum(_gap_fractions(s_right) * width) + b
            parts.extend([right[: r - 2], np.array([b + width])])
    tape = s_int.tape
    return ad.concat([p if isinstance(p, ad.Var) else tape.const(p) for p in parts])


def _knot_array(a: float, b: float, r: int, p: FreeKnotParam) -> np.ndarray:
    tape = ad.Tape()
    return free_knots_on_tape(
        a, b, r, tape.const(p.s_interior), tape.const(p.s_left), tape.const(p.s_right)
    ).value


def knots_from_params(a: float, b: float, p: FreeKnotParam, r: int) -> KnotVector:
    """Realize the knot vector described by gap logits ``p``."""
    m = side_logit_count(r)
    if np.size(p.s_interior) < 1:
        raise ValueError("s_interior must have at least one entry")
    if np.size(p.s_left) != m or np.size(p.s_right) != m:
        raise ValueError(f"order {r} needs {m} logits per side, got "
                         f"{np.size(p.s_left)} and {np.size(p.s_right)}")
    knots = _knot_array(float(a), float(b), r, p)
    if r == 1:
        knots = knots.copy()
    return KnotVector(float(a), float(b), r, p.n, knots)


def params_from_knots(kv: KnotVector) -> FreeKnotParam:
    """Logits reproducing ``kv`` under :func:`knots_from_params`.

    The extension knots of ``kv`` must follow the pinned-endpoint rule.
    """
    width = kv.b - kv.a
    s_int = logits_from_fractions(np.diff(kv.interior) / width)
    m = side_logit_count(kv.r)
    if m:
        left = kv.knots[: kv.r]
        right = kv.knots[kv.n + kv.r - 1 :]
        s_left = logits_from_fractions(np.diff(left) / width)
        s_right = logits_from_fractions(np.diff(right) / width)
    else:
        s_left = np.zeros(0)
        s_right = np.zeros(0)
    return FreeKnotParam(s_int, s_left, s_right)

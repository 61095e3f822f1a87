"""Change of basis between truncated-power and B-spline coefficients.

With ``B`` the column of B-splines and ``Phi`` the column of truncated
powers ``max(x - t_j, 0) ** (r - 1)`` on the same knots, ``B = A @ Phi``.
A weight tensor expressed against B-splines maps to truncated-power weights
by right-multiplying its channel axis with ``A``.

``A`` is upper triangular with ``r + 1`` nonzero diagonals; it is stored as
bands and applied/inverted in ``O(dim * r)`` per fibre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded, solve_triangular

from . import autodiff as ad
from .knots import KnotVector

__all__ = [
    "ChangeOfBasis",
    "BlockDiagonalCOB",
    "build_A1",
    "build_Ar",
    "build_Ar_uniform",
    "cob_matrix_on_tape",
    "apply_cob",
    "apply_cob_inverse",
    "toeplitz_spectral_bound",
]

DENSE_BELOW = 16


@dataclass(frozen=True)
class ChangeOfBasis:
    """Banded upper-triangular change-of-basis matrix.

    ``bands[k, i]`` holds ``A[i, i + k]`` (zero-padded past the last
    column).  ``scaled`` marks the knot-spacing-normalized variant
    ``h**(r-1) * A`` used for spectral bounds.
    """

    r: int
    bands: np.ndarray = field(repr=False)
    scaled: bool = False

    @classmethod
    def from_dense(cls, dense: np.ndarray, r: int, scaled: bool = False) -> "ChangeOfBasis":
        dense = np.asarray(dense, dtype=np.float64)
        dim = dense.shape[0]
        width = min(r, dim - 1) + 1
        bands = np.zeros((r + 1, dim))
        for k in range(width):
            bands[k, : dim - k] = np.diagonal(dense, offset=k)
        outside = dense.copy()
        for k in range(width):
            idx = np.arange(dim - k)
            outside[idx, idx + k] = 0.0
        if np.any(outside != 0.0):
            raise ValueError("matrix has entries outside the upper band of width r + 1")
        return cls(r, bands, scaled)

    @property
    def dim(self) -> int:
        return self.bands.shape[1]

    def dense(self) -> np.ndarray:
        dim = self.dim
        out = np.zeros((dim, dim))
        for k in range(min(self.r, dim - 1) + 1):
            idx = np.arange(dim - k)
            out[idx, idx + k] = self.bands[k, : dim - k]
        return out

    def apply_rows(self, rows: np.ndarray) -> np.ndarray:
        """``rows @ A`` along the last axis."""
        if rows.shape[-1] != self.dim:
            raise ValueError(f"channel axis {rows.shape[-1]} does not match dim {self.dim}")
        if self.dim < DENSE_BELOW:
            return rows @ self.dense()
        out = np.zeros(rows.shape)
        for k in range(min(self.r, self.dim - 1) + 1):
            # out[..., j] += rows[..., j - k] * A[j - k, j]
            out[..., k:] += rows[..., : self.dim - k] * self.bands[k, : self.dim - k]
        return out

    def solve_rows(self, rows: np.ndarray) -> np.ndarray:
        """``rows @ inv(A)`` along the last axis, by banded substitution."""
        if rows.shape[-1] != self.dim:
            raise ValueError(f"channel axis {rows.shape[-1]} does not match dim {self.dim}")
        lead = rows.shape[:-1]
        rhs = rows.reshape(-1, self.dim).T
        if self.dim < DENSE_BELOW:
            sol = solve_triangular(self.dense().T, rhs, lower=True)
        else:
            # A^T is lower triangular with r subdiagonals
            u = min(self.r, self.dim - 1)
            ab = np.zeros((u + 1, self.dim))
            for k in range(u + 1):
                ab[k, : self.dim - k] = self.bands[k, : self.dim - k]
            sol = solve_banded((u, 0), ab, rhs)
        return sol.T.reshape(*lead, self.dim)


def build_A1(kv: KnotVector) -> ChangeOfBasis:
    """Order-1 matrix: indicator i equals step i minus step i+1."""
    dim = kv.dim
    dense = np.eye(dim) - np.eye(dim, k=1)
    return ChangeOfBasis.from_dense(dense, 1)


def _recurrence(knots: np.ndarray, dim: int, r: int, ops):
    """Shared body of the order-raising recurrence.

    Row ``k`` of the order-``s`` matrix is
    ``A_{s-1}[k] / (tau[k+s-1] - tau[k]) - A_{s-1}[k+1] / (tau[k+s] - tau[k+1])``
    with a zero phantom row past the end.
    """
    mat = ops.eye_minus_shift(dim)
    for s in range(2, r + 1):
        left = ops.gaps(knots, s - 1, dim)
        right = ops.gaps(knots, s - 1, dim, offset=1)
        below = ops.shift_up(mat, dim)
        mat = ops.sub(ops.row_scale(mat, left), ops.row_scale(below, right))
    return mat


class _NumpyOps:
    @staticmethod
    def eye_minus_shift(dim):
        return np.eye(dim) - np.eye(dim, k=1)

    @staticmethod
    def gaps(knots, span, dim, offset=0):
        idx = np.arange(dim) + offset
        return knots[idx + span] - knots[idx]

    @staticmethod
    def shift_up(mat, dim):
        out = np.zeros_like(mat)
        out[:-1] = mat[1:]
        return out

    @staticmethod
    def row_scale(mat, gaps):
        return mat / gaps[:, None]

    @staticmethod
    def sub(x, y):
        return x - y


class _TapeOps:
    @staticmethod
    def eye_minus_shift(dim):
        return np.eye(dim) - np.eye(dim, k=1)

    @staticmethod
    def gaps(knots, span, dim, offset=0):
        idx = np.arange(dim) + offset
        return knots[idx + span] - knots[idx]

    @staticmethod
    def shift_up(mat, dim):
        if isinstance(mat, ad.Var):
            return ad.concat([mat[1:], np.zeros((1, dim))], axis=0)
        out = np.zeros_like(mat)
        out[:-1] = mat[1:]
        return out

    @staticmethod
    def row_scale(mat, gaps):
        return ad.div(mat, ad.reshape(gaps, (-1, 1)))

    @staticmethod
    def sub(x, y):
        return ad.sub(x, y)


def build_Ar(kv: KnotVector, r: int | None = None) -> ChangeOfBasis:
    """Change of basis for order ``r`` (default ``kv.r``) on arbitrary knots."""
    r = kv.r if r is None else r
    if r != kv.r:
        raise ValueError(f"order {r} does not match knot vector order {kv.r}")
    if r == 1:
        return build_A1(kv)
    gaps = np.diff(kv.knots)
    if np.any(gaps <= 0):
        raise ValueError("degenerate knot spacing")
    dense = _recurrence(kv.knots, kv.dim, r, _NumpyOps)
    return ChangeOfBasis.from_dense(dense, r)


def cob_matrix_on_tape(knots: ad.Var, dim: int, r: int) -> ad.Var:
    """Dense ``A`` as a differentiable function of the knot positions."""
    if r == 1:
        return knots.tape.const(_NumpyOps.eye_minus_shift(dim))
    return _recurrence(knots, dim, r, _TapeOps)


def build_Ar_uniform(h: float, dim: int, r: int) -> ChangeOfBasis:
    """Closed form on uniform knots.

    ``A[i, j] = (-1)**(j-i) * r / ((j-i)! (r-j+i)! h**(r-1))`` for
    ``i <= j <= i + r``.
    """
    if h <= 0:
        raise ValueError(f"spacing must be positive, got {h}")
    stencil = np.array(
        [(-1) ** k * r / (math.factorial(k) * math.factorial(r - k)) for k in range(r + 1)]
    ) / h ** (r - 1)
    bands = np.zeros((r + 1, dim))
    for k in range(min(r, dim - 1) + 1):
        bands[k, : dim - k] = stencil[k]
    return ChangeOfBasis(r, bands)


def scaled(cob: ChangeOfBasis, h: float) -> ChangeOfBasis:
    """``h**(r-1) * A``: the change of basis onto ``max((x - t)/h, 0)**(r-1)``."""
    return ChangeOfBasis(cob.r, cob.bands * h ** (cob.r - 1), scaled=True)


def apply_cob(w_tilde: np.ndarray, A: ChangeOfBasis) -> np.ndarray:
    """Spline-basis weights (Q, P, dim) to truncated-power weights."""
    return A.apply_rows(np.asarray(w_tilde, dtype=np.float64))


def apply_cob_inverse(w: np.ndarray, A: ChangeOfBasis) -> np.ndarray:
    """Truncated-power weights (Q, P, dim) back to spline-basis weights."""
    return A.solve_rows(np.asarray(w, dtype=np.float64))


def toeplitz_spectral_bound(r: int) -> float:
    """Maximum of the generating-function modulus, ``2**r / (r-1)!``."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    return 2.0**r / math.factorial(r - 1)


@dataclass
class BlockDiagonalCOB:
    """Per-layer change of basis lifted to the flattened weight vector.

    Each layer's weights are flattened in C order from shape
    ``(Q, P, dim)``, so every ``(q, p)`` fibre is a contiguous block and
    ``W_flat = A_block @ W_tilde_flat`` with ``A_block = A.T`` per fibre.
    """

    blocks: list[ChangeOfBasis]
    multiplicities: list[int]

    @property
    def size(self) -> int:
        return sum(c.dim * m for c, m in zip(self.blocks, self.multiplicities))

    def _split(self, vec: np.ndarray) -> list[np.ndarray]:
        out, start = [], 0
        for c, m in zip(self.blocks, self.multiplicities):
            stop = start + c.dim * m
            out.append(vec[..., start:stop].reshape(*vec.shape[:-1], m, c.dim))
            start = stop
        if start != vec.shape[-1]:
            raise ValueError(f"vector length {vec.shape[-1]} does not match {start}")
        return out

    def _join(self, parts: Sequence[np.ndarray], lead: tuple[int, ...]) -> np.ndarray:
        return np.concatenate([p.reshape(*lead, -1) for p in parts], axis=-1)

    def apply(self, w_tilde_flat: np.ndarray) -> np.ndarray:
        """Spline coordinates to truncated-power coordinates."""
        lead = w_tilde_flat.shape[:-1]
        parts = [c.apply_rows(p) for c, p in zip(self.blocks, self._split(w_tilde_flat))]
        return self._join(parts, lead)

    def apply_transpose(self, vec: np.ndarray) -> np.ndarray:
        """Multiply by the transposed lift (``A`` per fibre)."""
        lead = vec.shape[:-1]
        parts = [p @ c.dense().T for c, p in zip(self.blocks, self._split(vec))]
        return self._join(parts, lead)

    def dense(self, max_size: int = 10_000) -> np.ndarray:
        if self.size > max_size:
            raise ValueError(f"block-diagonal lift of size {self.size} exceeds guard {max_size}")
        out = np.zeros((self.size, self.size))
        start = 0
        for c, m in zip(self.blocks, self.multiplicities):
            blk = c.dense().T
            for _ in range(m):
                out[start : start + c.dim, start : start + c.dim] = blk
                start += c.dim
        return out

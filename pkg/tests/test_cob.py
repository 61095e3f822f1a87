import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kanmlp.basis import eval_bspline_basis, eval_trunc_power_basis
from kanmlp.cob import (
    BlockDiagonalCOB,
    ChangeOfBasis,
    apply_cob,
    apply_cob_inverse,
    build_A1,
    build_Ar,
    build_Ar_uniform,
    scaled,
    toeplitz_spectral_bound,
)
from kanmlp.knots import make_uniform_knots
from kanmlp.verify import random_knots


class TestA1:
    def test_entries(self):
        A = build_A1(make_uniform_knots(0, 1, 3, 1)).dense()
        np.testing.assert_array_equal(A, [[1, -1, 0], [0, 1, -1], [0, 0, 1]])

    def test_indicator_is_difference_of_steps(self):
        kv = make_uniform_knots(0, 1, 5, 1)
        x = np.random.default_rng(0).uniform(0, 1, 200)
        steps = eval_trunc_power_basis(kv, x)
        np.testing.assert_array_equal(eval_bspline_basis(kv, x), steps @ build_A1(kv).dense().T)

    def test_telescoping(self):
        A = build_A1(make_uniform_knots(0, 1, 4, 1))
        np.testing.assert_array_equal(A.dense() @ np.ones(A.dim), [0, 0, 0, 1])


class TestAr:
    def test_linear_uniform_stencil(self):
        h = 0.25
        A = build_Ar(make_uniform_knots(0, 1, 4, 2)).dense()
        assert A.shape == (5, 5)
        for i in range(3):
            np.testing.assert_allclose(A[i, i : i + 3], np.array([1, -2, 1]) / h, rtol=1e-13)
        np.testing.assert_allclose(A[3, 3:], np.array([1, -2]) / h, rtol=1e-13)
        np.testing.assert_allclose(A[4, 4:], np.array([1]) / h, rtol=1e-13)

    @pytest.mark.parametrize("r", [2, 3, 4])
    @pytest.mark.parametrize("uniform", [True, False])
    def test_basis_equivalence(self, r, uniform):
        rng = np.random.default_rng(r + 7 * uniform)
        kv = make_uniform_knots(0, 1, 6, r) if uniform else random_knots(rng, 0.0, 1.0, 6, r)
        x = rng.uniform(0, 1, 1000)
        resid = eval_bspline_basis(kv, x) - eval_trunc_power_basis(kv, x) @ build_Ar(kv).dense().T
        assert np.abs(resid).max() <= 1e-10

    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_band_structure(self, r):
        kv = random_knots(np.random.default_rng(r), 0.0, 1.0, 8, r)
        A = build_Ar(kv).dense()
        i, j = np.indices(A.shape)
        assert np.all(A[(j < i) | (j > i + r)] == 0.0)
        assert np.all(np.diag(A) != 0.0)

    def test_order_mismatch_rejected(self):
        with pytest.raises(ValueError):
            build_Ar(make_uniform_knots(0, 1, 3, 3), 2)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 4))
    def test_relu_power_recursion_identity(self, x, a, b, rho):
        lhs = (x - a) * max(x - b, 0.0) ** rho
        rhs = max(x - b, 0.0) ** (rho + 1) + (b - a) * max(x - b, 0.0) ** rho
        assert lhs == pytest.approx(rhs, abs=1e-9)


class TestUniformClosedForm:
    def test_linear_stencil(self):
        A = build_Ar_uniform(0.5, 6, 2)
        np.testing.assert_allclose(A.dense()[1, 1:4], np.array([1, -2, 1]) / 0.5)

    def test_quadratic_stencil(self):
        A = build_Ar_uniform(1.0, 6, 3)
        np.testing.assert_allclose(A.dense()[0, :4], [0.5, -1.5, 1.5, -0.5], rtol=1e-15)

    @pytest.mark.parametrize("r", [2, 3, 4])
    @pytest.mark.parametrize("n", [1, 4, 32, 125])
    def test_agrees_with_recursion(self, r, n):
        kv = make_uniform_knots(0.0, 1.0, n, r)
        h = 1.0 / n
        closed = build_Ar_uniform(h, kv.dim, r).dense()
        rec = build_Ar(kv).dense()
        # entries scale like h^(1-r); compare on the scale-free matrices
        assert np.abs(h ** (r - 1) * (closed - rec)).max() <= 1e-12

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError):
            build_Ar_uniform(0.0, 4, 2)


class TestApply:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(3)
        kv = random_knots(rng, 0.0, 1.0, 20, 3)
        return build_Ar(kv), rng.normal(size=(4, 3, kv.dim))

    def test_identity(self):
        eye = ChangeOfBasis.from_dense(np.eye(5), 2)
        W = np.arange(30.0).reshape(2, 3, 5)
        np.testing.assert_array_equal(apply_cob(W, eye), W)

    def test_zero(self, setup):
        A, W = setup
        np.testing.assert_array_equal(apply_cob(np.zeros_like(W), A), 0.0)

    def test_matches_dense_mode_product(self, setup):
        A, W = setup
        np.testing.assert_allclose(apply_cob(W, A), np.einsum("qpi,ij->qpj", W, A.dense()), rtol=1e-12, atol=1e-9)

    def test_round_trip(self, setup):
        A, W = setup
        back = apply_cob_inverse(apply_cob(W, A), A)
        np.testing.assert_allclose(back, W, atol=1e-10)

    def test_shape_mismatch(self, setup):
        A, _ = setup
        with pytest.raises(ValueError):
            apply_cob(np.zeros((2, 2, A.dim + 1)), A)

    def test_from_dense_rejects_out_of_band(self):
        M = np.eye(4)
        M[3, 0] = 1.0
        with pytest.raises(ValueError):
            ChangeOfBasis.from_dense(M, 2)


class TestToeplitzBound:
    @pytest.mark.parametrize("r,want", [(1, 2.0), (2, 4.0), (3, 4.0), (4, 8 / 3)])
    def test_formula(self, r, want):
        assert toeplitz_spectral_bound(r) == pytest.approx(want)

    @pytest.mark.parametrize("r", [1, 2, 3, 4])
    @pytest.mark.parametrize("dim", [4, 64, 256])
    def test_scaled_norm_below_bound(self, r, dim):
        h = 0.1
        A = scaled(build_Ar_uniform(h, dim, r), h)
        assert np.linalg.norm(A.dense(), 2) <= toeplitz_spectral_bound(r) * (1 + 1e-12)

    def test_rejects_order_zero(self):
        with pytest.raises(ValueError):
            toeplitz_spectral_bound(0)


class TestBlockDiagonal:
    def test_apply_matches_dense(self):
        rng = np.random.default_rng(0)
        blocks = [build_Ar(random_knots(rng, 0.0, 1.0, 3, 2)), build_Ar(random_knots(rng, 0.0, 1.0, 4, 3))]
        lift = BlockDiagonalCOB(blocks, [2, 3])
        v = rng.normal(size=lift.size)
        D = lift.dense()
        np.testing.assert_allclose(lift.apply(v), D @ v, rtol=1e-12, atol=1e-10)
        np.testing.assert_allclose(lift.apply_transpose(v), D.T @ v, rtol=1e-12, atol=1e-10)

    def test_length_mismatch(self):
        lift = BlockDiagonalCOB([build_Ar_uniform(1.0, 3, 2)], [2])
        with pytest.raises(ValueError):
            lift.apply(np.zeros(7))

    def test_size_guard(self):
        lift = BlockDiagonalCOB([build_Ar_uniform(1.0, 100, 2)], [200])
        with pytest.raises(ValueError):
            lift.dense()


def test_factorials_in_closed_form():
    r, h = 4, 0.3
    A = build_Ar_uniform(h, 8, r).dense()
    for k in range(r + 1):
        want = (-1) ** k * r / (math.factorial(k) * math.factorial(r - k) * h ** (r - 1))
        assert A[2, 2 + k] == pytest.approx(want, rel=1e-14)

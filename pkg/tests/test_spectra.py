import csv

import numpy as np
import pytest

from kanmlp.cob import build_Ar, toeplitz_spectral_bound
from kanmlp.knots import BasisKind, make_uniform_knots
from kanmlp.network import build_kan
from kanmlp.spectra import (
    SpectraReport,
    condition_number,
    empirical_hessian,
    empirical_jacobian,
    empirical_ntk,
    gram_matrix,
    min_batch_size,
    normal_outside_probability,
    nullspace_demo,
    scaled_cob_norm,
    scaled_ntk_pair,
    spectral_radius,
)


class TestGram:
    def test_indicators_diagonal(self):
        G = gram_matrix(make_uniform_knots(0, 1, 4, 1), "spline")
        np.testing.assert_allclose(G, 0.25 * np.eye(4), atol=1e-15)

    def test_hats_interior_entries(self):
        h = 0.125
        G = gram_matrix(make_uniform_knots(0, 1, 8, 2), "spline")
        for i in range(1, 8):
            assert G[i, i] == pytest.approx(2 * h / 3, rel=1e-13)
            assert G[i, i + 1] == pytest.approx(h / 6, rel=1e-13)
        assert G[0, 0] == pytest.approx(h / 3, rel=1e-13)
        assert np.all(G[np.abs(np.subtract.outer(range(9), range(9))) > 1] == 0.0)

    @pytest.mark.parametrize("basis", ["spline", "relu"])
    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_symmetric_psd(self, basis, r):
        G = gram_matrix(make_uniform_knots(-1, 2, 6, r), basis)
        np.testing.assert_array_equal(G, G.T)
        assert np.linalg.eigvalsh(G).min() > -1e-12 * np.abs(G).max()

    def test_quadrature_order_irrelevant_once_exact(self):
        kv = make_uniform_knots(0, 1, 5, 3)
        np.testing.assert_allclose(gram_matrix(kv, "relu", 3), gram_matrix(kv, "relu", 7), rtol=1e-12, atol=1e-15)

    def test_rejects_low_quadrature(self):
        with pytest.raises(ValueError):
            gram_matrix(make_uniform_knots(0, 1, 5, 3), "spline", 2)

    def test_bases_related_by_change_of_basis(self):
        kv = make_uniform_knots(0, 1, 6, 3)
        A = build_Ar(kv).dense()
        np.testing.assert_allclose(gram_matrix(kv, "spline"), A @ gram_matrix(kv, "relu") @ A.T,
                                   rtol=1e-9, atol=1e-10)


class TestCondition:
    def test_identity(self):
        assert condition_number(np.eye(5)) == pytest.approx(1.0)

    def test_diagonal(self):
        assert condition_number(np.diag([1.0, 10.0])) == pytest.approx(10.0)

    def test_excludes_null_directions(self):
        info = condition_number(np.diag([0.0, 2.0, 4.0]), details=True)
        assert info.kappa == pytest.approx(2.0) and info.excluded == 1

    def test_rejects_zero_matrix(self):
        with pytest.raises(ValueError):
            condition_number(np.zeros((3, 3)))

    def test_relu_grows_spline_flat(self):
        ks, kr = [], []
        for n in (8, 16, 32, 64):
            kv = make_uniform_knots(0, 1, n, 2)
            ks.append(condition_number(gram_matrix(kv, "spline")))
            kr.append(condition_number(gram_matrix(kv, "relu")))
        assert all(b > 2 * a for a, b in zip(kr, kr[1:]))
        assert max(ks) / min(ks) < 1.1
        assert max(ks) < 10


class TestHessian:
    def test_single_sample_rank_one(self):
        kv = make_uniform_knots(0, 1, 4, 3)
        H = empirical_hessian(kv, "spline", [0.3])
        assert np.linalg.matrix_rank(H) == 1

    def test_transforms_with_change_of_basis(self):
        kv = make_uniform_knots(0, 1, 5, 2)
        X = np.random.default_rng(0).uniform(size=50)
        A = build_Ar(kv).dense()
        np.testing.assert_allclose(empirical_hessian(kv, "spline", X),
                                   A @ empirical_hessian(kv, "relu", X) @ A.T, atol=1e-11)

    def test_monte_carlo_limit(self):
        kv = make_uniform_knots(0, 2, 4, 2)
        X = np.random.default_rng(1).uniform(0, 2, 200_000)
        np.testing.assert_allclose(empirical_hessian(kv, "spline", X), gram_matrix(kv, "spline") / 2.0, atol=3e-3)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            empirical_hessian(make_uniform_knots(0, 1, 2, 2), "spline", [])


class TestNtk:
    def test_single_layer_jacobian_is_feature_matrix(self):
        from kanmlp.basis import eval_basis

        net = build_kan([1, 1], 3, 2, "spline", seed=0)
        X = np.random.default_rng(0).uniform(size=(10, 1))
        J = empirical_jacobian(net, X)
        z = net.frozen[0].apply(X)[:, 0] if net.normalize[0] else X[:, 0]
        np.testing.assert_allclose(J, eval_basis(net.layers[0].knot_vector(), "spline", z), atol=1e-14)

    @pytest.mark.parametrize("basis", ["spline", "relu"])
    def test_psd(self, basis):
        net = build_kan([2, 3, 1], 4, 3, basis, seed=2)
        K = empirical_ntk(net, np.random.default_rng(2).uniform(size=(20, 2)))
        np.testing.assert_allclose(K, K.T, atol=1e-12)
        assert np.linalg.eigvalsh(K).min() > -1e-9 * np.abs(K).max()

    def test_conversion_changes_kernel_not_function(self):
        net = build_kan([2, 2, 1], 4, 2, "relu", seed=3)
        X = np.random.default_rng(3).uniform(size=(15, 2))
        Kr, Ks = empirical_ntk(net, X), empirical_ntk(net, X, basis="spline")
        assert not np.allclose(Kr, Ks)

    @pytest.mark.parametrize("r", [2, 3])
    @pytest.mark.parametrize("seed", range(3))
    def test_scaled_ratio_bound(self, r, seed):
        net = build_kan([2, 3, 1], 5, r, "relu", seed=seed)
        X = np.random.default_rng(seed).uniform(size=(40, 2))
        Kr, Ks = scaled_ntk_pair(net, X)
        assert spectral_radius(Ks) <= toeplitz_spectral_bound(r) ** 2 * spectral_radius(Kr) * (1 + 1e-10)

    def test_scaled_pair_rejects_nonuniform(self):
        net = build_kan([1, 1], 3, 2, "relu", free_knots=True, seed=0)
        net.layers[0].free_knots.s_interior[:] = [0.5, -0.5, 0.0]
        with pytest.raises(ValueError):
            scaled_ntk_pair(net, np.linspace(0, 1, 5)[:, None])

    def test_sample_guard(self):
        with pytest.raises(ValueError):
            empirical_jacobian(build_kan([1, 1], 2, 2), np.zeros((201, 1)))

    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_scaled_norm_bounded_and_dimension_stable(self, r):
        vals = [scaled_cob_norm(r, d) for d in (16, 64, 256)]
        assert max(vals) <= toeplitz_spectral_bound(r) * (1 + 1e-12)
        assert vals[-1] >= vals[0] - 1e-12


class TestSampling:
    def test_example_value(self):
        assert min_batch_size(0.99, normal_outside_probability(-2.0, 2.0)) > 1
        assert min_batch_size(0.99, 0.5) == 7

    def test_half(self):
        assert min_batch_size(0.5, 0.5) == 1

    def test_tau_tiny(self):
        assert min_batch_size(1e-9, 0.9) == 1

    @pytest.mark.parametrize("p", [0.3, 0.9, 0.999])
    def test_definition(self, p):
        B = min_batch_size(0.95, p)
        assert 1 - p ** B >= 0.95 > 1 - p ** (B - 1) or B == 1

    @pytest.mark.parametrize("tau,p", [(0, 0.5), (1, 0.5), (0.5, 0), (0.5, 1)])
    def test_rejects(self, tau, p):
        with pytest.raises(ValueError):
            min_batch_size(tau, p)

    def test_normal_outside(self):
        assert normal_outside_probability(-1.96, 1.96) == pytest.approx(0.05, abs=1e-4)


class TestNullspace:
    def test_two_inputs_kernel(self):
        kv = make_uniform_knots(0, 1, 4, 3)
        X = np.random.default_rng(0).uniform(size=(200, 2))
        res = nullspace_demo(kv, 2, X)
        assert res.residual <= 1e-12
        assert res.sigma_min <= 1e-10 * res.sigma_max

    def test_one_input_full_rank(self):
        kv = make_uniform_knots(0, 1, 4, 3)
        res = nullspace_demo(kv, 1, np.random.default_rng(0).uniform(size=200))
        assert res.sigma_min > 1e-3 * res.sigma_max

    def test_relu_basis_no_shared_constant(self):
        kv = make_uniform_knots(0, 1, 4, 3)
        X = np.random.default_rng(0).uniform(size=(200, 2))
        assert nullspace_demo(kv, 2, X, BasisKind.TRUNCATED_POWER).residual > 1e-3

    def test_column_mismatch(self):
        with pytest.raises(ValueError):
            nullspace_demo(make_uniform_knots(0, 1, 2, 2), 2, np.zeros((5, 3)))


class TestReport:
    def test_csv_round_trip(self, tmp_path):
        rep = SpectraReport()
        rep.add("kappa", 8, 1.5)
        rep.add("kappa", 16, 0.1 + 0.2)
        rep.to_csv(tmp_path / "s.csv")
        with (tmp_path / "s.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["quantity", "key", "value"]
        assert float(rows[2][2]) == 0.1 + 0.2
        assert rep.values("kappa") == [1.5, 0.1 + 0.2]

import numpy as np
import pytest

from kanmlp.basis import eval_basis
from kanmlp.cob import apply_cob, build_Ar
from kanmlp.knots import make_uniform_knots
from kanmlp.network import build_kan, build_mlp, count_flops_per_sample, network_forward
from kanmlp.optim import (
    AdamConfig,
    AdamState,
    LbfgsConfig,
    LbfgsState,
    NumericalFailure,
    Schedule,
    adam_step,
    gd_step,
    lbfgs_step,
    preconditioned_gd_step,
    schedule_flops,
    train_multilevel,
)
from kanmlp.refinement import refine_network


def quadratic(H, b):
    def closure(x):
        return 0.5 * x @ H @ x - b @ x, H @ x - b

    return closure


def rosenbrock(x):
    f = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
    g = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
    return f, g


@pytest.fixture(scope="module")
def toy_data():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(300, 2))
    return X, np.sin(3 * X[:, :1]) * np.cos(2 * X[:, 1:])


class TestAdam:
    def test_first_step_length_is_lr(self):
        p = [np.array([1.0, -2.0, 0.5])]
        g = [np.array([0.3, -5.0, 1e-3])]
        out = adam_step(p, g, AdamState(), AdamConfig(lr=1e-3))
        np.testing.assert_allclose(np.abs(out[0] - p[0]), 1e-3, rtol=1e-4)

    def test_zero_gradient_no_change(self):
        p = [np.array([1.0, 2.0])]
        out = adam_step(p, [np.zeros(2)], AdamState(), AdamConfig())
        np.testing.assert_array_equal(out[0], p[0])

    def test_decoupled_weight_decay(self):
        p = [np.array([2.0, -4.0])]
        out = adam_step(p, [np.zeros(2)], AdamState(), AdamConfig(lr=1e-3, weight_decay=0.1))
        np.testing.assert_allclose(out[0], p[0] * 0.9999, rtol=1e-15)

    def test_nan_gradient_aborts(self):
        with pytest.raises(NumericalFailure):
            adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], AdamState(), AdamConfig())

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"weight_decay": -1.0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            AdamConfig(**kwargs)


class TestLbfgs:
    @pytest.mark.parametrize("seed", range(5))
    def test_quadratic_termination(self, seed):
        rng = np.random.default_rng(seed)
        M = rng.normal(size=(2, 2))
        H, b = M @ M.T + 0.1 * np.eye(2), rng.normal(size=2)
        closure = quadratic(H, b)
        # termination needs near-exact line minimization, hence a tight curvature condition
        cfg = LbfgsConfig(c2=1e-3)
        state, x = LbfgsState(), 5 * rng.normal(size=2)
        for _ in range(3):
            x = lbfgs_step(x, closure, state, cfg)
        np.testing.assert_allclose(x, np.linalg.solve(H, b), atol=1e-10)

    def test_converged_point_unchanged(self):
        closure = quadratic(np.eye(2), np.zeros(2))
        state = LbfgsState()
        x = lbfgs_step(np.zeros(2), closure, state, LbfgsConfig())
        np.testing.assert_array_equal(x, 0.0)
        assert state.converged and state.iterations == 0

    def test_rosenbrock(self):
        state, x = LbfgsState(), np.array([-1.2, 1.0])
        cfg = LbfgsConfig(tolerance_change=0.0)
        for _ in range(200):
            x = lbfgs_step(x, rosenbrock, state, cfg)
            if state.converged or rosenbrock(x)[0] <= 1e-8:
                break
        assert rosenbrock(x)[0] <= 1e-8
        assert state.iterations <= 200

    def test_fixed_step_mode(self):
        H = np.diag([1.0, 4.0])
        closure = quadratic(H, np.array([1.0, 1.0]))
        state, x = LbfgsState(), np.zeros(2)
        for _ in range(30):
            x = lbfgs_step(x, closure, state, LbfgsConfig(line_search="none", tolerance_change=0.0))
        np.testing.assert_allclose(x, [1.0, 0.25], atol=1e-8)

    def test_fixed_step_scales_first_step_only(self):
        # the first step has length min(1, 1/|g|_1); the second is a full lr step
        closure = quadratic(np.eye(2), np.array([3.0, 1.0]))
        state, cfg = LbfgsState(), LbfgsConfig(line_search="none", tolerance_change=0.0)
        x1 = lbfgs_step(np.zeros(2), closure, state, cfg)
        np.testing.assert_allclose(x1, np.array([3.0, 1.0]) / 4.0)
        x2 = lbfgs_step(x1, closure, state, cfg)
        np.testing.assert_allclose(x2, [3.0, 1.0], atol=1e-12)

    def test_fixed_step_negligible_descent_stalls(self):
        # |g|_inf is above the gradient tolerance but g.d is below tolerance_change
        state, cfg = LbfgsState(), LbfgsConfig(line_search="none")
        x = lbfgs_step(np.ones(2), lambda x: (0.0, np.full(2, 1e-6)), state, cfg)
        assert state.stalled and not state.converged
        np.testing.assert_array_equal(x, 1.0)

    def test_line_search_failure_falls_back(self):
        # the reported gradient is biased, so no step satisfies the Wolfe conditions
        def closure(x):
            return float(x @ x), 2 * x + 10.0

        state = LbfgsState()
        lbfgs_step(np.zeros(3), closure, state, LbfgsConfig())
        assert state.fallbacks == 1

    def test_nan_loss_raises(self):
        with pytest.raises(NumericalFailure):
            lbfgs_step(np.zeros(2), lambda x: (np.nan, np.zeros(2)), LbfgsState(), LbfgsConfig())

    @pytest.mark.parametrize("kwargs", [{"history_size": 0}, {"lr": -1.0}, {"line_search": "armijo"},
                                        {"c1": 0.5, "c2": 0.4}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            LbfgsConfig(**kwargs)


class TestPreconditionedGd:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.kv = make_uniform_knots(0, 1, 8, 3)
        self.A = build_Ar(self.kv)
        self.W = rng.normal(size=(2, 3, self.kv.dim))
        self.G = rng.normal(size=self.W.shape)

    def test_identity_is_plain_gd(self):
        eye = np.eye(self.kv.dim)
        np.testing.assert_allclose(preconditioned_gd_step(self.W, self.G, eye, 0.1), gd_step(self.W, self.G, 0.1))

    def test_zero_gradient(self):
        np.testing.assert_array_equal(preconditioned_gd_step(self.W, np.zeros_like(self.G), self.A), self.W)

    def test_matches_spline_step(self):
        # least squares in the truncated-power basis; its gradient maps to the spline one through A
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, 200)
        Phi = eval_basis(self.kv, "relu", x)
        y = np.sin(4 * x)
        wt = rng.normal(size=self.kv.dim)
        A = self.A.dense()
        w = wt @ A

        def grad_relu(w):
            return Phi.T @ (Phi @ w - y) / x.size

        lr = 1e-3
        spline_next = gd_step(wt, grad_relu(w) @ A.T, lr)
        relu_next = preconditioned_gd_step(w, grad_relu(w), self.A, lr)
        np.testing.assert_allclose(spline_next @ A, relu_next, rtol=1e-8, atol=1e-8 * np.abs(relu_next).max())

    def test_spline_basis_converges_faster(self):
        kv = make_uniform_knots(0, 1, 64, 2)
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, 4000)
        y = eval_basis(kv, "spline", x) @ rng.normal(size=kv.dim)

        def iterations(kind, cap=20_000):
            F = eval_basis(kv, kind, x)
            lam = np.linalg.eigvalsh(F.T @ F / x.size)[-1]
            w = np.zeros(kv.dim)
            for k in range(cap):
                r = F @ w - y
                if 0.5 * np.mean(r * r) <= 1e-6:
                    return k
                w = gd_step(w, F.T @ r / x.size, 1.0 / lam)
            return cap + 1

        assert iterations("spline") < iterations("relu")


class TestSchedule:
    @pytest.mark.parametrize("text", ["32,16,8,4", "[32,16,8,4]", [32, 16, 8, 4]])
    def test_parse(self, text):
        assert Schedule.parse(text).epochs == (32, 16, 8, 4)

    def test_str(self):
        assert str(Schedule((128, 0, 0, 0))) == "[128,0,0,0]"

    def test_scaled_keeps_nonzero(self):
        assert Schedule((128, 0, 3)).scaled(0.1).epochs == (13, 0, 1)

    @pytest.mark.parametrize("bad", [[], [1, -1]])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            Schedule.parse(bad)

    def test_flop_matching(self):
        # equal budgets in the regime n >> r where per-level cost doubles
        net = build_kan([2, 5, 1], 64, 2)
        budgets = [schedule_flops(net, s) for s in ([128, 0, 0, 0], [0, 0, 0, 16], [32, 16, 8, 4])]
        assert max(budgets) / min(budgets) <= 1.05

    def test_flops_are_per_level_sums(self):
        net = build_kan([2, 5, 1], 3, 3)
        fine = refine_network(net)
        want = 2 * count_flops_per_sample(net) + 3 * count_flops_per_sample(fine)
        assert schedule_flops(net, [2, 3]) == want


class TestTrainMultilevel:
    def test_single_level_is_plain_training(self, toy_data):
        X, Y = toy_data
        res = train_multilevel(build_kan([2, 3, 1], 3, 3, seed=0), X, Y, [2], iters_per_epoch=5)
        assert [h.level for h in res.history] == [0, 0, 0]
        assert res.transfers == []
        assert res.history[-1].loss < res.history[0].loss

    @pytest.mark.parametrize("basis", ["spline", "relu"])
    @pytest.mark.parametrize("free", [False, True])
    def test_transfer_exact(self, toy_data, basis, free):
        X, Y = toy_data
        net = build_kan([2, 3, 1], 3, 3, basis=basis, free_knots=free, seed=1)
        res = train_multilevel(net, X, Y, [2, 1, 1], iters_per_epoch=5)
        assert len(res.transfers) == 2
        for _, before, after in res.transfers:
            assert abs(after - before) <= 1e-10
        assert res.net.layers[0].kv.n == 12

    def test_history_ordering(self, toy_data):
        X, Y = toy_data
        res = train_multilevel(build_kan([2, 3, 1], 3, 3), X, Y, [1, 0, 2], iters_per_epoch=3)
        keys = [(h.level, h.epoch) for h in res.history]
        assert keys == sorted(keys)
        assert [h.epoch for h in res.history] == [0, 1, 1, 1, 2, 3]

    def test_deterministic(self, toy_data):
        X, Y = toy_data
        a = train_multilevel(build_kan([2, 3, 1], 3, 3, seed=4), X, Y, [2, 1], iters_per_epoch=4)
        b = train_multilevel(build_kan([2, 3, 1], 3, 3, seed=4), X, Y, [2, 1], iters_per_epoch=4)
        assert [(h.loss, h.grad_norm) for h in a.history] == [(h.loss, h.grad_norm) for h in b.history]

    def test_input_net_untouched(self, toy_data):
        X, Y = toy_data
        net = build_kan([2, 3, 1], 3, 3, seed=4)
        flat = net.get_flat()
        train_multilevel(net, X, Y, [1, 1], iters_per_epoch=2)
        np.testing.assert_array_equal(net.get_flat(), flat)
        assert net.layers[0].kv.n == 3

    def test_adam_with_refinement(self, toy_data):
        X, Y = toy_data
        res = train_multilevel(build_kan([2, 3, 1], 3, 3, seed=2), X, Y, [20, 20], AdamConfig(lr=1e-2))
        assert res.history[-1].loss < res.history[0].loss
        _, before, after = res.transfers[0]
        assert abs(after - before) <= 1e-10

    def test_mlp_training(self, toy_data):
        X, Y = toy_data
        res = train_multilevel(build_mlp([2, 8, 1], seed=0), X, Y, [3], iters_per_epoch=5)
        assert res.history[-1].loss < res.history[0].loss
        pred = network_forward(res.net, X)
        assert np.mean((pred - Y) ** 2) == pytest.approx(res.history[-1].loss, rel=1e-10)


def test_adam_moments_prolonged():
    from kanmlp.optim import _prolong_adam

    net = build_kan([2, 3, 1], 3, 3, seed=0)
    fine, ops = refine_network(net, return_ops=True)
    rng = np.random.default_rng(0)
    state = AdamState(3, [rng.normal(size=a.shape) for a in net.parameter_arrays()],
                      [rng.uniform(size=a.shape) for a in net.parameter_arrays()])
    new = _prolong_adam(state, net, fine, ops)
    for k, op in enumerate(ops):
        np.testing.assert_allclose(new.m[k], op.prolong(state.m[k]))
    assert new.step == 3


def test_relu_layers_refine_through_spline_coordinates():
    net = build_kan([2, 3, 1], 3, 3, basis="relu", seed=0)
    fine = refine_network(net)
    A = build_Ar(fine.layers[0].kv)
    spline_net = refine_network(build_kan([2, 3, 1], 3, 3, seed=0))
    # both refine the same function; the relu weights stay in their basis
    X = np.random.default_rng(1).uniform(size=(50, 2))
    np.testing.assert_allclose(network_forward(fine, X), network_forward(net, X), atol=1e-10)
    assert fine.layers[0].weights.shape == apply_cob(spline_net.layers[0].weights, A).shape

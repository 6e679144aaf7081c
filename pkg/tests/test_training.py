import csv
import math

import numpy as np
import pytest

from impflow.flow import LN2, FlowModel, build_flow
from impflow.numeric import RandomState
from impflow.solvers import SolverConfig
from impflow.theory import construct_exact_impflow_1d, theorem3_bound
from impflow.training import (HISTORY_COLUMNS, AdamState, DatasetSpec, RegressionConfig, TrainConfig, adam_step,
                              checkerboard_logp, checkerboard_parity, checkerboard_sampler, fit_1d_regression,
                              SpectralReparam, sup_error, target_1d, train_density)


class TestTarget1d:
    def test_values(self):
        assert target_1d(0.0) == 0.0
        assert target_1d(1.0) == 10.0
        assert target_1d(-1.0) == pytest.approx(-0.1, abs=1e-15)

    def test_vectorised(self):
        np.testing.assert_allclose(target_1d(np.array([-2.0, 0.5])), [-0.2, 5.0])


class TestCheckerboard:
    def test_parity_predicate(self):
        s = checkerboard_sampler(RandomState(0), 10_000)
        assert np.all(checkerboard_parity(s))
        assert np.all(np.abs(s) <= 4.0)

    def test_acceptance_rate(self):
        prop = RandomState(1).uniform((1_000_000, 2), -4.0, 4.0)
        acc = checkerboard_parity(prop)
        se = math.sqrt(0.25 / len(acc))
        assert abs(acc.mean() - 0.5) <= 3 * se

    def test_cells_equally_likely(self):
        s = checkerboard_sampler(RandomState(2), 80_000)
        cells = (np.floor(s[:, 0] / 2) + 2) * 4 + (np.floor(s[:, 1] / 2) + 2)
        counts = np.bincount(cells.astype(int), minlength=16)
        active = counts[counts > 0]
        assert len(active) == 8
        # binomial SE for p = 1/8
        se = math.sqrt(len(s) * (1 / 8) * (7 / 8))
        assert np.all(np.abs(active - len(s) / 8) <= 4 * se)

    def test_oracle_bits(self):
        s = checkerboard_sampler(RandomState(3), 1000)
        bits = -np.mean(checkerboard_logp(s)) / LN2
        assert bits == pytest.approx(5.0, abs=1e-12)

    def test_oracle_outside_support(self):
        assert checkerboard_logp(np.array([[1.0, -1.0]]))[0] == -np.inf
        assert checkerboard_logp(np.array([[5.0, 5.0]]))[0] == -np.inf

    def test_single_point(self):
        assert checkerboard_sampler(RandomState(4)).shape == (2,)

    def test_deterministic(self):
        np.testing.assert_array_equal(checkerboard_sampler(RandomState(5), 100),
                                      checkerboard_sampler(RandomState(5), 100))


class TestDatasetSpec:
    def test_kinds(self):
        rng = RandomState(0)
        assert DatasetSpec("checkerboard2d").sample(rng, 5).shape == (5, 2)
        x = DatasetSpec("target1d").sample(rng, 1000)
        assert x.shape == (1000, 1) and x.min() >= -1 and x.max() <= 1
        assert DatasetSpec("gaussian", dim=3).sample(rng, 4).shape == (4, 3)

    def test_rejects(self):
        with pytest.raises(ValueError):
            DatasetSpec("moons")
        with pytest.raises(ValueError):
            DatasetSpec("gaussian", std=0.0)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = [np.array([1.0, -2.0]), np.ones((2, 2))]
        state = AdamState.zeros_like(p)
        out = adam_step(p, [np.zeros(2), np.zeros((2, 2))], state, 1e-3, 0.0)
        for a, b in zip(out, p):
            np.testing.assert_array_equal(a, b)

    def test_quadratic_converges(self):
        theta = [np.array([1.0])]
        state = AdamState.zeros_like(theta)
        for _ in range(1000):
            theta = adam_step(theta, [2 * theta[0]], state, 1e-2)
        assert abs(theta[0][0]) < 1e-3

    def test_first_step_is_lr_sign(self):
        # bias correction makes the first step exactly lr * sign(g) (up to eps)
        out = adam_step([np.array([0.0, 0.0])], [np.array([3.0, -0.01])], AdamState.zeros_like([np.zeros(2)]), 0.1)
        np.testing.assert_allclose(out[0], [-0.1, 0.1], rtol=1e-6)

    def test_weight_decay(self):
        out = adam_step([np.array([2.0])], [np.array([0.0])], AdamState.zeros_like([np.zeros(1)]), 0.1, 1e-2)
        assert out[0][0] < 2.0

    def test_rejects_bad_gradients(self):
        state = AdamState.zeros_like([np.zeros(2)])
        with pytest.raises(FloatingPointError):
            adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], state)
        with pytest.raises(ValueError):
            adam_step([np.zeros(2)], [np.zeros(3)], state)

    def test_projection_applied(self):
        out = adam_step([np.zeros(1)], [np.ones(1)], AdamState.zeros_like([np.zeros(1)]), 1.0,
                        project=lambda arrs: [np.clip(a, -0.5, 0.5) for a in arrs])
        assert out[0][0] == -0.5


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"lr": 0.0}, {"batch_size": 0}, {"weight_decay": -1.0}, {"eval_interval": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def small_model(seed=0, kind="imp", scale=1e-3):
    return build_flow(kind, 2, 1, 16, 3, "lipswish", 0.9, RandomState(seed), init_scale=scale)


class TestTrainDensity:
    def test_gaussian_entropy(self):
        model = small_model()
        cfg = TrainConfig(batch_size=500, n_iters=200, seed=1, eval_interval=100)
        train_density(model, DatasetSpec("gaussian", dim=2), cfg)
        test = DatasetSpec("gaussian", dim=2).sample(RandomState(99), 20_000)
        assert abs(model.nll(test).nats - (1 + math.log(2 * math.pi))) <= 0.05

    def test_deterministic_histories(self, tmp_path):
        cfg = TrainConfig(batch_size=64, n_iters=15, seed=3, eval_interval=5)
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            train_density(small_model(2, scale=1.0), DatasetSpec("checkerboard2d"), cfg, history_path=p)
        assert paths[0].read_text() == paths[1].read_text()
        with open(paths[0]) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == HISTORY_COLUMNS
        assert len(rows) == 16

    def test_spectral_constraint_at_checkpoints(self, tmp_path):
        seen = []

        def check(it, model):
            for net in model.nets:
                for layer in net.layers:
                    seen.append(np.linalg.norm(layer.weight, 2) <= layer.c * (1 + 1e-3))

        cfg = TrainConfig(lr=5e-2, batch_size=64, n_iters=20, seed=0, eval_interval=5)
        train_density(small_model(4, "res", scale=1.0), DatasetSpec("checkerboard2d"), cfg,
                      checkpoint_dir=tmp_path, callback=check)
        assert seen and all(seen)
        assert len(list(tmp_path.glob("model_*.json"))) == 4

    def test_nll_decreases(self):
        model = small_model(5, "res", scale=1.0)
        cfg = TrainConfig(lr=5e-3, batch_size=256, n_iters=150, seed=2, eval_interval=50)
        hist = train_density(model, DatasetSpec("checkerboard2d"), cfg)
        nll = hist.nll_nats
        assert np.median(nll[-30:]) < np.median(nll[:30])

    def test_skipped_batches_counted(self):
        model = build_flow("imp", 2, 1, 16, 3, "lipswish", 0.99, RandomState(6), init_scale=4.0)
        cfg = TrainConfig(batch_size=32, n_iters=3, solver=SolverConfig(max_iter=1, eps_f=1e-14))
        hist = train_density(model, DatasetSpec("checkerboard2d"), cfg)
        assert len(hist.skipped) == 3 and not hist.rows

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            train_density(small_model(), DatasetSpec("gaussian", dim=3), TrainConfig(n_iters=1))


class TestRegression:
    def test_exact_construction_mse(self):
        model = FlowModel([construct_exact_impflow_1d()], 1)
        x = RandomState(0).uniform((100_000, 1), -1.0, 1.0)
        mse = np.mean((model.forward(x, SolverConfig(eps_f=1e-10)) - target_1d(x)) ** 2)
        assert mse < 1e-10

    @pytest.mark.parametrize("depth", [1, 2])
    def test_short_fit_respects_depth_bound(self, depth):
        cfg = RegressionConfig(n_blocks=depth, hidden=16, batch_size=256, window=50, max_iters=200)
        res = fit_1d_regression(cfg)
        assert res.n_iters <= 200
        assert len(res.window_losses) == res.n_iters // 50
        assert res.sup_error >= theorem3_bound(depth, 0.25, 10.0) - 0.01
        assert np.isfinite(res.mse) and res.mse > 0

    def test_plateau_rule_stops(self):
        cfg = RegressionConfig(n_blocks=1, hidden=8, batch_size=64, window=10, max_iters=5000,
                               rel_improvement=0.5)
        res = fit_1d_regression(cfg)
        assert res.n_iters < 5000
        w = res.window_losses
        assert (w[-2] - w[-1]) / w[-2] < 0.5

    def test_sup_error_of_identity(self):
        model = build_flow("res", 1, 1, 8, 2, "relu", 0.9, RandomState(0), init_scale=0.0)
        # identity map vs 10x on [0.25, 0.75]: worst at 0.75
        assert sup_error(model) == pytest.approx(0.75 * 9, abs=1e-12)

    def test_projection_variant_runs(self):
        cfg = RegressionConfig(n_blocks=1, hidden=8, batch_size=64, window=10, max_iters=20, spectral="project")
        res = fit_1d_regression(cfg)
        assert res.n_iters == 20 and np.isfinite(res.mse)

    def test_rejects(self):
        with pytest.raises(ValueError):
            RegressionConfig(spectral="clip")
        with pytest.raises(ValueError):
            RegressionConfig(kind="conv")
        with pytest.raises(ValueError):
            RegressionConfig(n_blocks=0)


class TestSpectralReparam:
    def setup_method(self):
        self.model = build_flow("res", 1, 2, 6, 3, "relu", 0.5, RandomState(0), init_scale=3.0)
        self.rp = SpectralReparam(self.model, RandomState(1), 500)
        self.rp.raw = [2.0 * p for p in self.rp.raw]

    def test_effective_weights_bounded(self):
        eff = self.rp.effective()
        for W, layer in zip(eff[0::2], self.rp.layers):
            assert np.linalg.norm(W, 2) <= layer.c * (1 + 1e-6)
        np.testing.assert_array_equal(eff[1], self.rp.raw[1])

    def test_small_weights_pass_through(self):
        self.rp.raw = [1e-3 * p for p in self.rp.raw]
        eff = self.rp.effective()
        for a, b in zip(eff, self.rp.raw):
            np.testing.assert_array_equal(a, b)
        G = [np.ones_like(p) for p in eff]
        for a, b in zip(self.rp.backward(G), G):
            np.testing.assert_array_equal(a, b)

    def test_gradient_matches_fd(self):
        G = [RandomState(2).normal(p.shape) for p in self.rp.raw]

        def f():
            return sum(float(np.sum(g * e)) for g, e in zip(G, self.rp.effective()))

        self.rp.effective()
        analytic = self.rp.backward(G)
        base = [p.copy() for p in self.rp.raw]
        for i in range(0, len(base), 2):
            fd = np.zeros_like(base[i])
            for idx in np.ndindex(base[i].shape):
                vals = []
                for s in (1, -1):
                    self.rp.raw = [p.copy() for p in base]
                    self.rp.raw[i][idx] += s * 1e-6
                    vals.append(f())
                fd[idx] = (vals[0] - vals[1]) / 2e-6
            # sigma comes from power iteration at tolerance 1e-6
            np.testing.assert_allclose(analytic[i], fd, atol=1e-3 * np.abs(fd).max())

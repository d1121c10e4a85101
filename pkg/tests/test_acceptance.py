"""
End-to-end acceptance checks on synthetic data.

These fit many networks and run for minutes; they are deselected by default.
Run with: pytest -m slow
"""

import numpy as np
import pytest
import statsmodels.api as sm
from numpy.testing import assert_allclose
from scipy import stats

from backtest import BacktestConfig, run_backtest
from bounds import (
    ReluJacobianSpec,
    chernoff_upper,
    constrained_coefficients,
    general_variance_bound,
    mc_tail_frequency,
    variance_unsquared,
)
from cli import EXIT_OK, main
from data import (
    DEFAULT_SIGNAL_SCALE,
    FactorPanel,
    GeneratorSpec,
    gen_friedman,
    gen_het_panel,
    gen_linear2,
    gen_step10,
    generate,
    het_panel_signal,
    noise_scales,
)
from gls import fit_two_step
from interpret import garson, hessian_batch, jacobian_batch, olden, rank_interactions, sensitivity_bounds, sensitivity_distribution
from nn_core import Architecture, TrainConfig, predict, train
from tuning import cross_validate

pytestmark = pytest.mark.slow


def make_panel(returns, exposures):
    T, N, K = exposures.shape
    return FactorPanel(
        dates=[f"d{t:03d}" for t in range(T)],
        assets=[f"A{i:03d}" for i in range(N)],
        returns=returns,
        exposures=exposures,
        factor_names=[f"f{k + 1}" for k in range(K)],
    )


def standardized(y):
    return (y - y.mean()) / y.std()


class TestLinearModelRecovery:
    def test_linear_network_matches_ols(self):
        data = gen_linear2(400, seed=2024)
        ols = sm.OLS(data.y, sm.add_constant(data.X)).fit()
        fit = train(data.X, data.y, Architecture(n_inputs=2), TrainConfig(learning_rate=0.05, epochs=1000, batch_size=400))
        layer = fit.params.layers[0]
        assert_allclose(layer.weights[0], ols.params[1:], atol=0.02)
        assert_allclose(layer.bias[0], ols.params[0], atol=0.02)

    def test_tanh_sensitivities_match_ols(self):
        data = gen_linear2(400, seed=2024)
        ols = sm.OLS(data.y, sm.add_constant(data.X)).fit()
        config = TrainConfig(learning_rate=0.01, epochs=200, batch_size=20)
        fit = train(data.X, data.y, Architecture(n_inputs=2, hidden=(10,)), config)
        report = sensitivity_distribution(fit.params, data.X, ["x1", "x2"])
        assert_allclose(report.mean, ols.params[1:], atol=0.05)


class TestConfidenceNarrowing:
    WIDTHS = (2, 10, 50, 100, 200)

    def test_sensitivity_spread_shrinks_with_width(self):
        stds = np.empty((10, len(self.WIDTHS)))
        for seed in range(10):
            data = gen_linear2(400, seed=seed)
            config = TrainConfig(learning_rate=0.01, epochs=200, batch_size=20, seed=seed)
            for w, width in enumerate(self.WIDTHS):
                fit = train(data.X, data.y, Architecture(n_inputs=2, hidden=(width,)), config)
                stds[seed, w] = sensitivity_distribution(fit.params, data.X).std[0]
        mean_std = stds.mean(axis=0)
        assert int(np.sum(np.diff(mean_std) > 0)) <= 1, mean_std
        assert mean_std[-1] < 0.05
        assert mean_std[0] > 0.08


class TestStepRanking:
    def test_jacobian_recovers_order(self):
        data = gen_step10(5000, seed=0)
        X = data.X - 0.5
        y = standardized(data.y)
        config = TrainConfig(learning_rate=0.01, epochs=50, batch_size=50)
        fit = train(X, y, Architecture(n_inputs=10, hidden=(10,)), config)
        report = sensitivity_distribution(fit.params, X, data.feature_names)
        assert list(report.ranking) == list(range(9, -1, -1))
        assert len(garson(fit.params, data.feature_names).to_frame()) == 10
        assert len(olden(fit.params, data.feature_names).to_frame()) == 10


class TestFriedman:
    @pytest.fixture(scope="class")
    def friedman(self):
        data = gen_friedman(500, sigma=1.0, seed=1)
        return data.X - 0.5, standardized(data.y)

    CONFIG = TrainConfig(learning_rate=0.05, epochs=500, batch_size=10, l2_lambda=1e-4)
    ARCH = Architecture(n_inputs=10, hidden=(8,))

    def test_cross_validated_fit(self, friedman):
        X, y = friedman
        cv = cross_validate(X, y, self.ARCH, self.CONFIG, n_folds=5)
        assert cv.r2 >= 0.90

    def test_rankings(self, friedman):
        X, y = friedman
        fit = train(X, y, self.ARCH, self.CONFIG)
        report = sensitivity_distribution(fit.params, X)
        assert set(report.ranking[:3]) == {0, 1, 3}
        assert report.ranks[2] > report.ranks[4]
        assert rank_interactions(fit.params, X).top_pair == (0, 1)


class TestDerivativeOracles:
    def test_against_central_differences(self, make_network):
        rng = np.random.default_rng(7)
        for trial in range(100):
            depth = trial % 4
            hidden = tuple(int(h) for h in rng.integers(1, 6, size=depth))
            K = int(rng.integers(1, 5))
            params = make_network(rng, K, hidden)
            X = rng.standard_normal((3, K))

            J = jacobian_batch(params, X)
            H = hessian_batch(params, X)
            h1, h2 = 1e-5, 1e-4
            fd_J = np.empty_like(J)
            fd_H = np.empty_like(H)
            for k in range(K):
                e = np.zeros(K)
                e[k] = h1
                fd_J[:, k] = (predict(params, X + e) - predict(params, X - e)) / (2 * h1)
                e[k] = h2
                fd_H[:, :, k] = (jacobian_batch(params, X + e) - jacobian_batch(params, X - e)) / (2 * h2)
            assert_allclose(J, fd_J, rtol=1e-5, atol=1e-8)
            assert_allclose(H, fd_H, rtol=1e-3, atol=1e-6)


class TestSensitivityContainment:
    def test_no_violations(self, make_network):
        rng = np.random.default_rng(11)
        violations = 0
        for trial in range(10_000):
            depth = 1 + trial % 3
            hidden = tuple(int(h) for h in rng.integers(1, 6, size=depth))
            K = int(rng.integers(1, 4))
            params = make_network(rng, K, hidden, weight_scale=float(rng.uniform(0.1, 3.0)))
            X = 3.0 * rng.standard_normal((100, K))
            box = sensitivity_bounds(params)
            violations += int(np.sum(~box.contains(jacobian_batch(params, X))))
        assert violations == 0


class TestReluConcentration:
    def test_constrained_variance_identity(self):
        rng = np.random.default_rng(3)
        for n in range(2, 40):
            p = rng.dirichlet(np.ones(n))
            mu = float(rng.uniform(0.1, 10.0))
            spec = ReluJacobianSpec(constrained_coefficients(mu, p), p)
            assert_allclose(variance_unsquared(spec), mu * (n - 1) / n, rtol=1e-12)

    def test_general_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(10_000):
            n = int(rng.integers(1, 30))
            spec = ReluJacobianSpec(rng.uniform(0.0, 1.0, n), rng.uniform(0.0, 1.0, n))
            assert variance_unsquared(spec) <= general_variance_bound(spec) + 1e-15

    @pytest.mark.parametrize("delta", [0.1, 0.3, 0.6])
    def test_tail_frequency_within_chernoff(self, delta):
        rng = np.random.default_rng(5)
        spec = ReluJacobianSpec(rng.uniform(0.05, 1.0, 20), rng.uniform(0.05, 0.95, 20))
        check = mc_tail_frequency(spec, delta, n_samples=1_000_000, seed=6)
        assert check.passed

    def test_unit_bound(self):
        assert_allclose(chernoff_upper(1.0, 1.0).bound_value, np.e / 4, rtol=0, atol=1e-12)


class TestGlsImprovement:
    CONFIG = TrainConfig(learning_rate=0.1, epochs=500, batch_size=5000)
    # Five loud assets among fifty.
    LOUD_PROFILE = tuple(0.3 if i % 10 == 0 else 0.01 for i in range(50))

    def het_panel(self, seed, profile):
        return generate(GeneratorSpec(kind="het_panel", T=36, N=50, K=4, noise_profile=profile, seed=seed))

    def test_refined_fit_predicts_better(self):
        precision = 1.0 / noise_scales(self.LOUD_PROFILE, 50) ** 2
        wins = 0
        for seed in range(10):
            panel = self.het_panel(seed, self.LOUD_PROFILE)
            fit = fit_two_step(panel.window(0, 24), Architecture(n_inputs=4), self.CONFIG)
            test = panel.window(24, 36)
            X, _ = test.stack()
            truth = DEFAULT_SIGNAL_SCALE * het_panel_signal(test.exposures)
            truth = truth - truth.mean(axis=1, keepdims=True)

            def weighted_error(params):
                pred = predict(params, X).reshape(test.T, test.N)
                pred = pred - pred.mean(axis=1, keepdims=True)
                return np.mean(precision * (pred - truth) ** 2)

            wins += weighted_error(fit.params) < weighted_error(fit.first_pass_params)
        assert wins >= 8

    def test_homoscedastic_passes_agree(self):
        window = self.het_panel(0, "constant").window(0, 24)
        fit = fit_two_step(window, Architecture(n_inputs=4), self.CONFIG)
        X, y = window.stack()
        bse = sm.OLS(y, sm.add_constant(X)).fit().bse[1:]
        first = fit.first_pass_params.layers[0].weights[0]
        refined = fit.params.layers[0].weights[0]
        assert np.all(np.abs(first - refined) <= 2 * bse)


class TestBacktestOrdering:
    SIZES = (25, 50)
    TRAIN = TrainConfig(learning_rate=0.05, epochs=20, batch_size=64)

    def test_model_beats_linear_beats_random(self):
        model_wins = 0
        for seed in range(10):
            panel = gen_het_panel(T=120, N=218, K=6, seed=seed, signal_scale=1.0)
            common = dict(window=24, portfolio_sizes=self.SIZES, seed=seed)
            model = run_backtest(panel, BacktestConfig(hidden=(10,), train_config=self.TRAIN, **common))
            linear = run_backtest(panel, BacktestConfig(mode="linear", linear_solver="wls", **common))
            random = run_backtest(panel, BacktestConfig(mode="random", n_random_trials=100, **common))
            ir = {name: {n: r.information_ratios[n].value for n in self.SIZES}
                  for name, r in (("model", model), ("linear", linear), ("random", random))}
            model_wins += all(ir["model"][n] > ir["linear"][n] for n in self.SIZES)
            for n in self.SIZES:
                assert ir["model"][n] > ir["random"][n], (seed, n)
                assert ir["linear"][n] > ir["random"][n], (seed, n)
        assert model_wins >= 8


class TestNoLookAhead:
    def test_next_period_signal_is_not_exploited(self):
        base = gen_het_panel(T=40, N=60, K=2, seed=9, persistence=0.0)
        rng = np.random.default_rng(9)
        returns = 0.02 * rng.standard_normal((base.T, base.N))
        # Returns at t depend only on exposures published at t+1.
        returns[:-1] += het_panel_signal(base.exposures[1:])
        panel = make_panel(returns, base.exposures)

        common = dict(window=12, portfolio_sizes=(10,), seed=9)
        model = run_backtest(panel, BacktestConfig(
            hidden=(5,), train_config=TrainConfig(learning_rate=0.05, epochs=20, batch_size=64), **common,
        ))
        random = run_backtest(panel, BacktestConfig(mode="random", n_random_trials=50, **common))
        result = stats.mannwhitneyu(model.active_returns[10], random.active_returns[10], alternative="two-sided")
        assert result.pvalue > 0.01


class TestReplay:
    def test_every_command_replays_byte_identically(self, tmp_path):
        data_dir = tmp_path / "gen"
        runs = [
            ["gen", "--kind", "friedman", "--n", "200", "--seed", "5", "--out", str(data_dir)],
            ["train", "--data", str(data_dir / "dataset.csv"), "--arch", "6", "--epochs", "30",
             "--l2", "0.001", "--seed", "5", "--out", str(tmp_path / "train")],
            ["interpret", "--model", str(tmp_path / "train" / "model.net"), "--data", str(data_dir / "dataset.csv"),
             "--method", "all", "--out", str(tmp_path / "interpret")],
            ["bounds", "--sweep", "--mu", "0.5,1,2", "--delta-points", "20", "--out", str(tmp_path / "bounds")],
        ]
        for argv in runs:
            assert main(argv) == EXIT_OK
            original = tmp_path / argv[0] if argv[0] != "gen" else data_dir
            replay = tmp_path / f"{argv[0]}-replay"
            assert main([argv[0], "--config", str(original / "manifest.json"), "--out", str(replay)]) == EXIT_OK
            outputs = sorted(p.name for p in original.iterdir() if p.name != "manifest.json")
            assert outputs
            for name in outputs:
                assert (replay / name).read_bytes() == (original / name).read_bytes(), f"{argv[0]}: {name}"

"""Tests for two-step GLS fitting."""

import numpy as np
import pytest
import statsmodels.api as sm
from numpy.testing import assert_allclose, assert_array_equal

from data import gen_het_panel
from errors import DimensionMismatchError, InsufficientWindowsError, NumericalError, ValidationError
from gls import (
    GlsFitResult,
    ResidualCovariance,
    estimate_residual_covariance,
    fit_linear_gls,
    fit_two_step,
    residuals_frame,
    return_covariance,
    sample_weights,
    variances_frame,
    weighted_loss,
    wls_solve,
)
from nn_core import Architecture, TrainConfig, linear_network, objective, predict


class TestWeightedLoss:
    def test_unit_variances(self):
        assert weighted_loss([1, 2], [0, 0], [1, 1]) == 5.0

    def test_scaled_variances(self):
        assert weighted_loss([1, 2], [0, 0], [1, 4]) == 2.0

    def test_perfect_fit(self):
        assert weighted_loss([3, -1], [3, -1], [0.5, 2.0]) == 0.0

    def test_zero_variance_rejected(self):
        with pytest.raises(ValidationError):
            weighted_loss([1, 2], [0, 0], [1, 0])

    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            weighted_loss([1, 2], [0, 0], [1, 1, 1])

    def test_accepts_covariance_record(self):
        cov = ResidualCovariance([1.0, 4.0], window_length=3)
        assert weighted_loss([1, 2], [0, 0], cov) == 2.0


class TestResidualCovariance:
    def test_three_dates(self):
        cov = estimate_residual_covariance(np.array([[1.0, 2.0], [-1.0, -2.0], [1.0, 2.0]]))
        assert_array_equal(cov.variances, [1.5, 6.0])
        assert cov.window_length == 3

    def test_zero_residuals_floored(self):
        cov = estimate_residual_covariance(np.zeros((4, 3)), variance_floor=1e-8)
        assert_array_equal(cov.variances, np.full(3, 1e-8))

    def test_two_dates_with_floor(self):
        cov = estimate_residual_covariance(np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert_array_equal(cov.variances, [2.0, 1e-8])

    def test_centered(self):
        cov = estimate_residual_covariance(np.array([[1.0, 2.0], [3.0, 2.0]]), centered=True)
        assert_array_equal(cov.variances, [2.0, 1e-8])

    def test_one_date_is_insufficient(self):
        with pytest.raises(InsufficientWindowsError):
            estimate_residual_covariance(np.ones((1, 3)))

    def test_non_finite_residuals(self):
        with pytest.raises(NumericalError):
            estimate_residual_covariance(np.array([[1.0, np.inf], [0.0, 1.0]]))

    def test_permutation_and_scaling(self, rng):
        residuals = rng.standard_normal((12, 5))
        base = estimate_residual_covariance(residuals).variances
        shuffled = estimate_residual_covariance(residuals[rng.permutation(12)]).variances
        scaled = estimate_residual_covariance(3.0 * residuals).variances
        assert_allclose(shuffled, base, rtol=1e-12)
        assert_allclose(scaled, 9.0 * base, rtol=1e-12)

    def test_sample_weights_date_major(self):
        cov = ResidualCovariance([1.0, 4.0], window_length=2)
        assert_array_equal(sample_weights(cov, 2, normalize=False), [1.0, 0.25, 1.0, 0.25])
        assert_allclose(sample_weights(cov, 3).mean(), 1.0, rtol=1e-15)

    def test_normalized_weights_rescale_penalty(self, rng):
        cov = ResidualCovariance([1.0, 4.0], window_length=2)
        raw = sample_weights(cov, 2, normalize=False)
        normalized = sample_weights(cov, 2)
        scale = raw.mean()
        params = linear_network([0.5, -0.2], 0.1)
        X = rng.standard_normal((4, 2))
        y = rng.standard_normal(4)
        for l1, l2 in ((0.0, 0.3), (0.2, 0.0)):
            assert_allclose(
                scale * objective(params, X, y, normalized, l1_lambda=l1, l2_lambda=l2),
                objective(params, X, y, raw, l1_lambda=scale * l1, l2_lambda=scale * l2),
                rtol=1e-12,
            )


class TestFitTwoStep:
    config = TrainConfig(learning_rate=0.05, epochs=20, batch_size=16, seed=2)

    def test_identity_covariance_reproduces_first_pass(self):
        panel = gen_het_panel(T=6, N=10, K=2, seed=1)
        fit = fit_two_step(panel, Architecture(n_inputs=2, hidden=(3,)), self.config, force_identity_covariance=True)
        assert_array_equal(fit.params.to_vector(), fit.first_pass_params.to_vector())
        assert_array_equal(fit.residuals_refined, fit.residuals_unweighted)

    def test_artifacts(self, small_panel):
        fit = fit_two_step(small_panel, Architecture(n_inputs=3, hidden=(4,)), self.config)
        assert fit.residuals_unweighted.shape == (small_panel.T, small_panel.N)
        assert fit.covariance_refined.n_assets == small_panel.N
        assert fit.loss_weights.shape == (small_panel.T * small_panel.N,)
        assert_allclose(fit.loss_weights.mean(), 1.0, rtol=1e-12)
        assert set(fit.loss_traces) == {"first_pass", "refined"}
        assert fit.predict(small_panel.exposures[0]).shape == (small_panel.N,)

    def test_loud_asset_gets_smallest_weight(self):
        panel = gen_het_panel(T=24, N=15, K=2, noise_profile="one_loud", seed=5)
        config = TrainConfig(learning_rate=0.05, epochs=30, batch_size=64)
        fit = fit_two_step(panel, Architecture(n_inputs=2), config)
        assert np.argmax(fit.covariance_refined.variances) == 0
        assert np.argmin(fit.loss_weights[:panel.N]) == 0

    def test_one_date_window(self, small_panel):
        with pytest.raises(InsufficientWindowsError):
            fit_two_step(small_panel.window(0, 1), Architecture(n_inputs=3), self.config)

    def test_architecture_must_match_factors(self, small_panel):
        with pytest.raises(DimensionMismatchError):
            fit_two_step(small_panel, Architecture(n_inputs=2), self.config)

    def test_linear_network_converges_to_wls(self):
        panel = gen_het_panel(T=10, N=30, K=3, noise_profile="linear", seed=7)
        config = TrainConfig(learning_rate=0.1, epochs=3000, batch_size=300)
        fit = fit_two_step(panel, Architecture(n_inputs=3), config)
        X, y = panel.stack()
        intercept, coefs = wls_solve(X, y, fit.loss_weights)
        assert_allclose(fit.params.layers[0].weights[0], coefs, atol=1e-4)
        assert_allclose(fit.params.layers[0].bias[0], intercept, atol=1e-4)


class TestLinearGls:
    def test_wls_solve_matches_statsmodels(self, rng):
        X = rng.standard_normal((50, 2))
        y = X @ [1.0, -0.5] + 0.3 + 0.1 * rng.standard_normal(50)
        w = rng.uniform(0.5, 2.0, 50)
        intercept, coefs = wls_solve(X, y, w)
        ref = sm.WLS(y, sm.add_constant(X), weights=w).fit().params
        assert_allclose(intercept, ref[0], rtol=1e-10)
        assert_allclose(coefs, ref[1:], rtol=1e-10)

    def test_refined_fit_not_flagged(self):
        panel = gen_het_panel(T=24, N=40, K=3, noise_profile="linear", seed=9)
        fit = fit_linear_gls(panel)
        assert not fit.flagged
        assert fit.weighted_mse_refined <= fit.weighted_mse_first_pass * (1 + 1e-12)

    def test_homoscedastic_passes_agree(self):
        panel = gen_het_panel(T=24, N=40, K=3, noise_profile="constant", seed=4)
        fit = fit_linear_gls(panel)
        X, y = panel.stack()
        ols = sm.OLS(y, sm.add_constant(X)).fit()
        first = fit.first_pass_params.layers[0].weights[0]
        refined = fit.params.layers[0].weights[0]
        assert np.all(np.abs(refined - first) <= 2.0 * ols.bse[1:])

    def test_identity_hook(self):
        panel = gen_het_panel(T=12, N=20, K=2, seed=2)
        fit = fit_linear_gls(panel, force_identity_covariance=True)
        assert_allclose(fit.params.to_vector(), fit.first_pass_params.to_vector(), rtol=1e-10, atol=1e-14)


class TestReturnCovariance:
    def test_constant_model_gives_residual_diagonal(self, small_panel):
        variances = np.linspace(0.1, 1.2, small_panel.N)
        cov = ResidualCovariance(variances, small_panel.T)
        zeros = np.zeros((small_panel.T, small_panel.N))
        fit = GlsFitResult(
            params=linear_network(np.zeros(small_panel.K), 0.01),
            residuals_unweighted=zeros,
            residuals_refined=zeros,
            covariance_first_pass=cov,
            covariance_refined=cov,
        )
        assert_array_equal(return_covariance(fit, small_panel), np.diag(variances))

    def test_matches_brute_force(self):
        panel = gen_het_panel(T=16, N=10, K=3, seed=6)
        fit = fit_linear_gls(panel)
        X, _ = panel.stack()
        fitted = predict(fit.params, X).reshape(panel.T, panel.N)
        centered = fitted - fitted.mean(axis=0)
        expected = centered.T @ centered / (panel.T - 1) + np.diag(fit.covariance_refined.variances)
        result = return_covariance(fit, panel)
        assert_allclose(result, expected, rtol=1e-10, atol=1e-15)
        assert np.all(np.diag(result) >= fit.covariance_refined.variances)

    def test_asset_count_must_match(self, small_panel):
        fit = fit_linear_gls(small_panel)
        other = gen_het_panel(T=8, N=5, K=3, seed=1)
        with pytest.raises(DimensionMismatchError):
            return_covariance(fit, other)


class TestExport:
    def test_frames(self, small_panel):
        fit = fit_linear_gls(small_panel)
        res = residuals_frame(fit, small_panel)
        assert list(res.columns) == ["date", "asset", "residual_unweighted", "residual_refined"]
        assert len(res) == small_panel.T * small_panel.N
        var = variances_frame(fit, small_panel)
        assert len(var) == small_panel.N
        assert var["window_length"].iloc[0] == small_panel.T

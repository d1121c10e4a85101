"""Tests for ReLU Jacobian moments and Chernoff bounds."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bounds import (
    ReluJacobianSpec,
    bound_sweep,
    chernoff_lower,
    chernoff_upper,
    constrained_coefficients,
    delta_grid,
    general_variance_bound,
    mc_tail_frequency,
    relu_jacobian_mean,
    relu_jacobian_variance_mc,
    relu_jacobian_variance_paper,
    rescale_coefficients,
    spec_from_network,
    variance_bernoulli,
    variance_partition,
    variance_unsquared,
)
from errors import UnsupportedArchitectureError, ValidationError
from nn_core import LayerSpec, NetworkParams


def relu_net(w1, b1, w2):
    w1 = np.asarray(w1, dtype=float).reshape(-1, 1)
    return NetworkParams((
        LayerSpec(w1, b1, "relu"),
        LayerSpec(np.asarray(w2, dtype=float).reshape(1, -1), [0.0], "identity"),
    ))


class TestSpec:
    def test_probabilities_checked(self):
        with pytest.raises(ValidationError):
            ReluJacobianSpec([1.0], [1.2])
        with pytest.raises(ValidationError):
            ReluJacobianSpec([1.0, 2.0], [0.5])

    def test_partition_flag(self):
        assert ReluJacobianSpec([1.0, 1.0], [0.5, 0.5]).is_partition
        assert not ReluJacobianSpec([1.0, 1.0], [0.7, 0.5]).is_partition


class TestMoments:
    def test_mean(self):
        assert relu_jacobian_mean(ReluJacobianSpec([0.5, 0.5], [0.5, 0.5])) == 0.5
        assert relu_jacobian_mean(ReluJacobianSpec([0.2, 0.3], [1.0, 1.0])) == 0.5
        assert relu_jacobian_mean(ReluJacobianSpec([0.0, 0.0], [0.3, 0.9])) == 0.0

    def test_variance_single_term(self):
        assert variance_unsquared(ReluJacobianSpec([1.0], [0.5])) == 0.25

    def test_variance_operation_name(self):
        spec = ReluJacobianSpec([0.3, 0.6], [0.2, 0.7])
        assert relu_jacobian_variance_paper(spec) == variance_unsquared(spec)
        assert_allclose(relu_jacobian_variance_paper(spec), 0.3 * 0.16 + 0.6 * 0.21, rtol=1e-12)

    def test_degenerate_probabilities_have_no_variance(self):
        spec = ReluJacobianSpec([0.4, 0.9], [0.0, 1.0])
        assert variance_unsquared(spec) == 0.0
        assert variance_bernoulli(spec) == 0.0

    def test_constrained_coefficients(self):
        p = [0.1, 0.2, 0.3, 0.4]
        mu = 2.0
        spec = ReluJacobianSpec(constrained_coefficients(mu, p), p)
        assert_allclose(relu_jacobian_mean(spec), mu, rtol=1e-12)
        assert_allclose(variance_unsquared(spec), mu * 3 / 4, rtol=1e-12)

    def test_general_bound_holds(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 20))
            spec = ReluJacobianSpec(rng.uniform(1e-6, 1.0, n), rng.uniform(0.0, 1.0, n))
            assert variance_unsquared(spec) <= general_variance_bound(spec) + 1e-15

    def test_variants_agree_for_unit_coefficients(self, rng):
        spec = ReluJacobianSpec(np.ones(5), rng.uniform(0.0, 1.0, 5))
        assert_allclose(variance_bernoulli(spec), variance_unsquared(spec), rtol=1e-14)

    def test_partition_variance(self):
        spec = ReluJacobianSpec([0.0, 2.0], [0.5, 0.5])
        assert variance_partition(spec) == 1.0
        assert variance_unsquared(spec) == 0.5
        with pytest.raises(ValidationError):
            variance_partition(ReluJacobianSpec([1.0, 1.0], [0.7, 0.5]))

    def test_rescale(self):
        scaled, scale = rescale_coefficients([2.0, -4.0, 1.0])
        assert scale == 4.0
        assert_allclose(scaled, [0.5, -1.0, 0.25])
        with pytest.raises(ValidationError):
            rescale_coefficients([0.0, 0.0])


class TestChernoff:
    def test_unit_values(self):
        assert_allclose(chernoff_upper(1.0, 1.0).bound_value, np.e / 4, rtol=1e-12)
        assert_allclose(chernoff_upper(2.0, 1.0).bound_value, (np.e / 4) ** 2, rtol=1e-12)

    def test_small_deviation_is_vacuous(self):
        assert_allclose(chernoff_upper(1.0, 1e-8).bound_value, 1.0, atol=1e-6)

    def test_threshold(self):
        assert chernoff_upper(2.0, 0.5).threshold == 3.0
        assert chernoff_lower(2.0, 0.5).threshold == 1.0

    def test_lower_tail_uses_same_base(self):
        assert chernoff_lower(1.5, 0.5).bound_value == chernoff_upper(1.5, 0.5).bound_value

    def test_invalid_arguments(self):
        with pytest.raises(ValidationError):
            chernoff_upper(0.0, 1.0)
        with pytest.raises(ValidationError):
            chernoff_upper(1.0, 0.0)
        with pytest.raises(ValidationError):
            chernoff_lower(1.0, 1.5)

    def test_sweep(self):
        table = bound_sweep([0.5, 1.0, 2.0, 4.0], delta_grid(5.0, 10))
        assert list(table.columns) == ["mu", "delta", "bound"]
        assert len(table) == 40
        assert np.all((table["bound"] > 0) & (table["bound"] <= 1))
        by_mu = table.pivot(index="delta", columns="mu", values="bound").to_numpy()
        assert np.all(np.diff(by_mu, axis=1) < 0)
        assert np.all(np.diff(by_mu, axis=0) < 0)

    def test_single_point_sweep(self):
        table = bound_sweep([1.0], [1.0])
        assert len(table) == 1
        assert table["bound"].iloc[0] == chernoff_upper(1.0, 1.0).bound_value


class TestNetworkSpec:
    def test_one_unit(self):
        spec = spec_from_network(relu_net([1.0], [0.0], [1.0]))
        assert_allclose(spec.coefficients, [0.0, 1.0])
        assert_allclose(spec.probabilities, [0.5, 0.5])
        assert relu_jacobian_mean(spec) == 0.5
        assert variance_partition(spec) == 0.25

    def test_probabilities_sum_to_one(self, rng):
        net = relu_net(rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(6))
        spec = spec_from_network(net)
        assert spec.n_terms == 7
        assert_allclose(spec.probabilities.sum(), 1.0, rtol=1e-12)

    def test_requires_relu_hidden_layer(self):
        net = NetworkParams((
            LayerSpec([[1.0]], [0.0], "tanh"),
            LayerSpec([[1.0]], [0.0], "identity"),
        ))
        with pytest.raises(UnsupportedArchitectureError):
            spec_from_network(net)
        with pytest.raises(UnsupportedArchitectureError):
            relu_jacobian_variance_mc(net, n_samples=10)


class TestMonteCarlo:
    def test_one_unit_network(self):
        mc = relu_jacobian_variance_mc(relu_net([1.0], [0.0], [1.0]), n_samples=200_000, seed=0)
        assert mc.n_samples == 200_000
        assert abs(mc.mean - 0.5) <= 4 * np.sqrt(0.25 / 200_000)
        assert abs(mc.variance - 0.25) <= 0.005

    def test_inactive_network(self):
        mc = relu_jacobian_variance_mc(relu_net([1.0], [-100.0], [2.0]), n_samples=1000)
        assert mc.mean == 0.0
        assert mc.variance == 0.0

    def test_variance_follows_partition_model(self):
        net = relu_net([1.0], [0.0], [2.0])
        spec = spec_from_network(net)
        mc = relu_jacobian_variance_mc(net, n_samples=200_000, seed=1)
        assert abs(mc.variance - variance_partition(spec)) <= 0.02
        assert abs(mc.variance - variance_unsquared(spec)) > 0.4

    def test_matches_interval_spec(self, rng):
        net = relu_net(rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(5))
        spec = spec_from_network(net)
        mc = relu_jacobian_variance_mc(net, n_samples=200_000, seed=2)
        var = variance_partition(spec)
        assert abs(mc.mean - relu_jacobian_mean(spec)) <= 4 * np.sqrt(var / 200_000) + 1e-12
        assert_allclose(mc.variance, var, rtol=0.05, atol=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(ValidationError):
            relu_jacobian_variance_mc(relu_net([1.0], [0.0], [1.0]), n_samples=1)

    def test_tail_frequency_below_bound(self, rng):
        spec = ReluJacobianSpec(rng.uniform(0.05, 1.0, 20), rng.uniform(0.05, 0.95, 20))
        check = mc_tail_frequency(spec, delta=0.5, n_samples=200_000, seed=3)
        assert check.passed
        assert check.scale == spec.coefficients.max()
        assert 0.0 <= check.frequency <= 1.0

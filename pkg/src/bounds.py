"""
Probability bounds for the Jacobian of a one-hidden-layer ReLU network.

With ReLU hidden units the sensitivity dy/dx_j is a weighted sum of
indicator variables, J = sum_k a_k 1{unit k active}, with a_k the product
of the unit's input and output weights. This module gives its mean and
variance under the indicator models, Chernoff tail bounds on its
deviations, and Monte Carlo checks of all of them.

Three variance expressions are provided:
    variance_unsquared  sum a_k p_k (1 - p_k)       commonly quoted form
    variance_bernoulli  sum a_k^2 p_k (1 - p_k)     independent indicators
    variance_partition  sum a_k^2 p_k - mu^2        mutually exclusive events
They agree only when every a_k is 0 or 1 and the model matches.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from errors import UnsupportedArchitectureError, ValidationError
from nn_core import NetworkParams, derive_rng

logger = logging.getLogger(__name__)

MC_BLOCK_SIZE = 100_000
TAIL_SIGMAS = 3.0


@dataclass(eq=False)
class ReluJacobianSpec:
    """Coefficients a_k and event probabilities p_k of an indicator decomposition."""

    coefficients: np.ndarray
    probabilities: np.ndarray
    thresholds: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(-1)
        self.probabilities = np.asarray(self.probabilities, dtype=float).reshape(-1)
        if self.coefficients.shape != self.probabilities.shape:
            raise ValidationError(
                f"{self.coefficients.size} coefficients but {self.probabilities.size} probabilities"
            )
        if self.coefficients.size == 0:
            raise ValidationError("spec needs at least one term")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValidationError("coefficients must be finite")
        if not np.all((self.probabilities >= 0.0) & (self.probabilities <= 1.0)):
            raise ValidationError("probabilities must lie in [0, 1]")
        if self.thresholds is not None:
            self.thresholds = np.asarray(self.thresholds, dtype=float).reshape(-1)

    @property
    def n_terms(self) -> int:
        return self.coefficients.size

    @property
    def is_partition(self) -> bool:
        """Probabilities can describe mutually exclusive events."""
        return float(self.probabilities.sum()) <= 1.0 + 1e-12


@dataclass(frozen=True)
class TailBound:
    """Chernoff bound on Pr[J > (1+d)mu] (upper) or Pr[J < (1-d)mu] (lower)."""

    mu: float
    deviation: float
    bound_value: float
    tail: str = "upper"

    @property
    def threshold(self) -> float:
        sign = 1.0 if self.tail == "upper" else -1.0
        return (1.0 + sign * self.deviation) * self.mu


class MomentEstimate(NamedTuple):
    mean: float
    variance: float
    n_samples: int


@dataclass(frozen=True)
class TailCheck:
    """Empirical tail frequency against its Chernoff bound."""

    frequency: float
    bound: TailBound
    n_samples: int
    scale: float = 1.0

    @property
    def tolerance(self) -> float:
        b = self.bound.bound_value
        return TAIL_SIGMAS * np.sqrt(b * (1.0 - b) / self.n_samples)

    @property
    def passed(self) -> bool:
        return self.frequency <= self.bound.bound_value + self.tolerance


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------


def relu_jacobian_mean(spec: ReluJacobianSpec) -> float:
    return float(np.sum(spec.coefficients * spec.probabilities))


def variance_unsquared(spec: ReluJacobianSpec) -> float:
    """sum a_k p_k (1 - p_k), with the coefficient unsquared."""
    p = spec.probabilities
    return float(np.sum(spec.coefficients * p * (1.0 - p)))


relu_jacobian_variance_paper = variance_unsquared


def variance_bernoulli(spec: ReluJacobianSpec) -> float:
    """Exact variance for independent indicators."""
    p = spec.probabilities
    return float(np.sum(spec.coefficients ** 2 * p * (1.0 - p)))


def variance_partition(spec: ReluJacobianSpec) -> float:
    """Exact variance for mutually exclusive indicators (sum p_k <= 1)."""
    if not spec.is_partition:
        raise ValidationError(
            f"probabilities sum to {spec.probabilities.sum():.6g}; not a partition"
        )
    mu = relu_jacobian_mean(spec)
    return float(np.sum(spec.coefficients ** 2 * spec.probabilities) - mu * mu)


def general_variance_bound(spec: ReluJacobianSpec) -> float:
    """(1/4) sum a_k, which bounds variance_unsquared when every a_k is in (0, 1]."""
    return 0.25 * float(np.sum(spec.coefficients))


def constrained_coefficients(mu: float, probabilities: Sequence[float]) -> np.ndarray:
    """a_k = mu / (n p_k): every term contributes mu/n to the mean."""
    p = np.asarray(probabilities, dtype=float)
    if not np.all(p > 0):
        raise ValidationError("constrained coefficients need strictly positive probabilities")
    return mu / (p.size * p)


def rescale_coefficients(coefficients: Sequence[float]) -> tuple[np.ndarray, float]:
    """Divide by max |a_k| so the coefficients lie in [-1, 1]; returns (scaled, scale)."""
    a = np.asarray(coefficients, dtype=float)
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale == 0.0:
        raise ValidationError("cannot rescale all-zero coefficients")
    return a / scale, scale


# ---------------------------------------------------------------------------
# Chernoff bounds
# ---------------------------------------------------------------------------


def _chernoff(mu: float, d: float) -> float:
    # [e^d / (1+d)^(1+d)]^mu in log space
    return float(np.exp(mu * (d - (1.0 + d) * np.log1p(d))))


def chernoff_upper(mu: float, delta: float) -> TailBound:
    """Bound on Pr[J > (1+delta) mu]."""
    if not mu > 0:
        raise ValidationError(f"mu must be positive, got {mu}")
    if not delta > 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    return TailBound(float(mu), float(delta), _chernoff(mu, delta), "upper")


def chernoff_lower(mu: float, gamma: float) -> TailBound:
    """Bound on Pr[J < (1-gamma) mu], using the same bracketed base as the upper tail."""
    if not mu > 0:
        raise ValidationError(f"mu must be positive, got {mu}")
    if not 0 < gamma <= 1:
        raise ValidationError(f"gamma must lie in (0, 1], got {gamma}")
    return TailBound(float(mu), float(gamma), _chernoff(mu, gamma), "lower")


def delta_grid(delta_max: float, n_points: int = 50) -> np.ndarray:
    """Equally spaced deviations in (0, delta_max]."""
    if not delta_max > 0 or n_points < 1:
        raise ValidationError("delta_max must be positive and n_points at least 1")
    return np.linspace(delta_max / n_points, delta_max, n_points)


def bound_sweep(mu_values: Sequence[float], deltas: Sequence[float]) -> pd.DataFrame:
    """Upper-tail bound over a grid: one row per (mu, delta), mu-major."""
    mu_values = list(mu_values)
    deltas = list(deltas)
    if not mu_values or not deltas:
        raise ValidationError("mu and delta grids must be nonempty")
    rows = [
        {"mu": float(mu), "delta": float(d), "bound": chernoff_upper(mu, d).bound_value}
        for mu in mu_values
        for d in deltas
    ]
    return pd.DataFrame(rows, columns=["mu", "delta", "bound"])


# ---------------------------------------------------------------------------
# Networks and Monte Carlo
# ---------------------------------------------------------------------------


def _relu_layers(network: NetworkParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if network.n_hidden_layers != 1 or network.layers[0].activation != "relu":
        raise UnsupportedArchitectureError(
            f"need a single hidden ReLU layer, got {network.describe()}"
        )
    if network.layers[1].activation != "identity":
        raise UnsupportedArchitectureError("output layer must be identity")
    return network.layers[0].weights, network.layers[0].bias, network.layers[1].weights[0]


def spec_from_network(
    network: NetworkParams,
    distribution=None,
) -> ReluJacobianSpec:
    """
    Interval-partition spec of a scalar-input ReLU network.

    Unit k switches at x_k = -b_k / W1_k. Between consecutive sorted
    thresholds the active set is fixed, so J is a constant c_m on each
    interval, taken with probability F(x_{m+1}) - F(x_m) under the input
    distribution (a frozen scipy.stats distribution; standard normal by
    default). Tied thresholds give zero-probability intervals.
    """
    W1, b1, w2 = _relu_layers(network)
    if W1.shape[1] != 1:
        raise UnsupportedArchitectureError(
            f"interval partition needs a scalar input, network has {W1.shape[1]}"
        )
    distribution = stats.norm() if distribution is None else distribution
    w1 = W1[:, 0]
    slopes = w2 * w1

    switching = w1 != 0
    thresholds = np.sort(-b1[switching] / w1[switching])
    edges = np.concatenate(([-np.inf], thresholds, [np.inf]))

    coefficients = np.empty(edges.size - 1)
    for m in range(edges.size - 1):
        lo, hi = edges[m], edges[m + 1]
        # Any interior point decides the active set; constant units do not switch.
        if np.isinf(lo) and np.isinf(hi):
            x = 0.0
        elif np.isinf(lo):
            x = hi - 1.0
        elif np.isinf(hi):
            x = lo + 1.0
        else:
            x = 0.5 * (lo + hi)
        active = (w1 * x + b1) > 0
        coefficients[m] = float(np.sum(slopes[active]))

    cdf = distribution.cdf(edges)
    probabilities = np.clip(np.diff(cdf), 0.0, 1.0)
    return ReluJacobianSpec(coefficients, probabilities, thresholds)


def _merge(n_a: int, mean_a: float, m2_a: float, n_b: int, mean_b: float, m2_b: float):
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * n_b / n
    m2 = m2_a + m2_b + delta * delta * n_a * n_b / n
    return n, mean, m2


def relu_jacobian_variance_mc(
    network: NetworkParams,
    distribution=None,
    n_samples: int = 100_000,
    seed: int = 0,
    input_index: int = 0,
) -> MomentEstimate:
    """
    Sample mean and variance of dy/dx_j for inputs drawn iid from distribution.

    Samples are drawn in blocks, each from its own RNG stream, and the block
    moments are merged pairwise.
    """
    if n_samples < 2:
        raise ValidationError(f"n_samples must be at least 2, got {n_samples}")
    W1, b1, w2 = _relu_layers(network)
    K = W1.shape[1]
    if not 0 <= input_index < K:
        raise ValidationError(f"input_index {input_index} out of range 0..{K - 1}")
    distribution = stats.norm() if distribution is None else distribution
    a = w2 * W1[:, input_index]

    n, mean, m2 = 0, 0.0, 0.0
    for block, start in enumerate(range(0, n_samples, MC_BLOCK_SIZE)):
        size = min(MC_BLOCK_SIZE, n_samples - start)
        X = distribution.rvs(size=(size, K), random_state=derive_rng(seed, block))
        active = (X @ W1.T + b1) > 0
        J = active.astype(float) @ a
        n, mean, m2 = _merge(n, mean, m2, size, float(J.mean()), float(((J - J.mean()) ** 2).sum()))
    return MomentEstimate(mean, m2 / (n - 1), n)


def mc_tail_frequency(
    spec: ReluJacobianSpec,
    delta: float,
    n_samples: int = 1_000_000,
    seed: int = 0,
) -> TailCheck:
    """
    Empirical Pr[J > (1+delta) mu] under independent Bernoulli indicators.

    Coefficients are first rescaled into [-1, 1] by max |a_k|; the scale is
    reported on the result.
    """
    if n_samples < 1:
        raise ValidationError(f"n_samples must be positive, got {n_samples}")
    a, scale = rescale_coefficients(spec.coefficients)
    p = spec.probabilities
    mu = float(np.sum(a * p))
    bound = chernoff_upper(mu, delta)

    exceed = 0
    for block, start in enumerate(range(0, n_samples, MC_BLOCK_SIZE)):
        size = min(MC_BLOCK_SIZE, n_samples - start)
        rng = derive_rng(seed, block)
        indicators = rng.random((size, p.size)) < p
        J = indicators.astype(float) @ a
        exceed += int(np.sum(J > bound.threshold))
    frequency = exceed / n_samples
    logger.debug("tail frequency %.6g vs bound %.6g (mu=%.4g, delta=%.4g)", frequency, bound.bound_value, mu, delta)
    return TailCheck(frequency, bound, n_samples, scale)

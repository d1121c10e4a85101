"""
White-box interpretation of fitted factor networks.

Sensitivities are the analytic input Jacobian of the network output,

    dy/dx = W^(L) D^(L-1) W^(L-1) ... D^(1) W^(1),   D^(l) = diag(f'(Z^(l))),

and interaction effects are the entries of the input Hessian. Both are
propagated forward layer by layer, so any depth of tanh/identity network is
handled exactly. Garson, Olden and partial dependence are provided as
baselines.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from data import FactorPanel
from errors import (
    NonDifferentiableActivationError,
    UnsupportedArchitectureError,
    ValidationError,
)
from nn_core import (
    Architecture,
    NetworkParams,
    TrainConfig,
    derive_rng,
    forward_batch,
    get_activation,
    predict,
    train,
)

logger = logging.getLogger(__name__)

DEFAULT_PDP_POINTS = 50
DEFAULT_PDP_PERCENTILES = (0.01, 0.99)
CI_QUANTILES = (0.01, 0.99)
IMPORTANCE_AGGREGATES = ("mean", "median")
GARSON_VARIANTS = ("magnitude", "classic")

# Range of f' over the real line, for the sensitivity box.
DERIVATIVE_RANGES = {
    "identity": (1.0, 1.0),
    "tanh": (0.0, 1.0),
    "relu": (0.0, 1.0),
}


def _feature_names(names: Optional[Sequence[str]], K: int) -> list[str]:
    if names is None:
        return [f"x{j + 1}" for j in range(K)]
    names = list(names)
    if len(names) != K:
        raise ValidationError(f"{len(names)} feature names for {K} inputs")
    return names


def _stable_ranking(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def _require_smooth(params: NetworkParams, second_order: bool = False):
    for i, layer in enumerate(params.layers, 1):
        act = get_activation(layer.activation)
        if not act.smooth:
            raise NonDifferentiableActivationError(
                f"layer {i}: non-differentiable activation '{act.name}'; use bounds module"
            )
        if second_order and act.d2f is None:
            raise NonDifferentiableActivationError(
                f"layer {i}: activation '{act.name}' is not twice differentiable"
            )


# ---------------------------------------------------------------------------
# Derivatives
# ---------------------------------------------------------------------------


def jacobian_batch(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    """Input Jacobian at every row of X; returns an (n x K) matrix."""
    _require_smooth(params)
    _, state = forward_batch(params, X)
    n, K = state.inputs.shape
    A = np.broadcast_to(np.eye(K), (n, K, K))
    for layer, z in zip(params.layers, state.pre_activations):
        d = get_activation(layer.activation).df(z)
        A = d[:, :, None] * np.einsum("ij,njk->nik", layer.weights, A)
    return A[:, 0, :].copy()


def jacobian(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Input Jacobian of the scalar output at x, as a length-K vector."""
    x = np.asarray(x, dtype=float)
    return jacobian_batch(params, x.reshape(1, -1))[0]


def hessian_batch(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    """
    Input Hessian at every row of X; returns an (n x K x K) array.

    For a = f(z), z = W a_prev + b, with J and H the input Jacobian and
    Hessian of a_prev:

        dz = W J,    d2z = W H
        H_a[i] = f''(z_i) dz_i dz_i^T + f'(z_i) d2z_i

    which reduces to W2 diag(W1_i) f''(Z1) W1_j for one hidden layer.
    """
    _require_smooth(params, second_order=True)
    _, state = forward_batch(params, X)
    n, K = state.inputs.shape
    A = np.broadcast_to(np.eye(K), (n, K, K))
    H = np.zeros((n, K, K, K))
    for layer, z in zip(params.layers, state.pre_activations):
        act = get_activation(layer.activation)
        dz = np.einsum("ij,njk->nik", layer.weights, A)
        d2z = np.einsum("ij,njkl->nikl", layer.weights, H)
        d1 = act.df(z)
        d2 = act.d2f(z)
        H = (
            d2[:, :, None, None] * dz[:, :, :, None] * dz[:, :, None, :]
            + d1[:, :, None, None] * d2z
        )
        A = d1[:, :, None] * dz
    out = H[:, 0]
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def hessian(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Symmetric K x K input Hessian of the scalar output at x."""
    x = np.asarray(x, dtype=float)
    return hessian_batch(params, x.reshape(1, -1))[0]


# ---------------------------------------------------------------------------
# Sensitivity box
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SensitivityBounds:
    """
    Box containing every attainable input Jacobian of a network.

    ``lower``/``upper`` come from interval propagation through the layers,
    with each diagonal D^(l) ranging over the derivative range of its
    activation. ``composite`` is the weight product W^(L)...W^(1), and
    ``composite_lower``/``composite_upper`` the box min/max(composite, 0)
    around it. The composite box is exact for one hidden unit per layer but
    can be violated when paths of different signs cancel; the interval box
    always holds.
    """

    lower: np.ndarray
    upper: np.ndarray
    composite: np.ndarray

    @property
    def composite_lower(self) -> np.ndarray:
        return np.minimum(self.composite, 0.0)

    @property
    def composite_upper(self) -> np.ndarray:
        return np.maximum(self.composite, 0.0)

    def contains(self, jacobians: np.ndarray) -> np.ndarray:
        """Boolean mask of rows lying inside [lower, upper] elementwise."""
        J = np.atleast_2d(jacobians)
        return np.all((J >= self.lower) & (J <= self.upper), axis=1)


def sensitivity_bounds(params: NetworkParams) -> SensitivityBounds:
    """
    Elementwise bounds on dy/dx over all inputs.

    The bounds are widened outward by a rounding allowance proportional to
    the absolute path sum |W^(L)|...|W^(1)|, so floating-point Jacobians
    never fall outside them.
    """
    K = params.n_inputs
    lo = np.eye(K)
    hi = np.eye(K)
    magnitude = np.eye(K)
    n_ops = 0
    for i, layer in enumerate(params.layers, 1):
        try:
            d_lo, d_hi = DERIVATIVE_RANGES[layer.activation]
        except KeyError:
            raise UnsupportedArchitectureError(
                f"layer {i}: no derivative range known for '{layer.activation}'"
            ) from None
        W_pos = np.maximum(layer.weights, 0.0)
        W_neg = np.minimum(layer.weights, 0.0)
        m_lo = W_pos @ lo + W_neg @ hi
        m_hi = W_pos @ hi + W_neg @ lo
        lo = np.minimum(d_lo * m_lo, d_hi * m_lo)
        hi = np.maximum(d_lo * m_hi, d_hi * m_hi)
        magnitude = np.abs(layer.weights) @ magnitude
        n_ops += layer.in_dim + 2

    slack = 4.0 * n_ops * np.finfo(float).eps * magnitude[0]
    return SensitivityBounds(
        lower=lo[0] - slack,
        upper=hi[0] + slack,
        composite=params.composite_weights(),
    )


# ---------------------------------------------------------------------------
# Sensitivity reports
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SensitivityReport:
    """Empirical distribution of the input Jacobian over a set of points."""

    jacobians: np.ndarray
    feature_names: list[str]
    importance: str = "mean"
    dataset: str = "dataset"
    mean: np.ndarray = field(init=False)
    median: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)
    q01: np.ndarray = field(init=False)
    q99: np.ndarray = field(init=False)
    ranking: np.ndarray = field(init=False)

    def __post_init__(self):
        J = np.asarray(self.jacobians, dtype=float)
        self.jacobians = J
        self.mean = J.mean(axis=0)
        self.median = np.median(J, axis=0)
        self.std = J.std(axis=0, ddof=1)
        self.q01, self.q99 = np.quantile(J, CI_QUANTILES, axis=0)
        self.ranking = _stable_ranking(self.scores)

    @property
    def n_points(self) -> int:
        return self.jacobians.shape[0]

    @property
    def scores(self) -> np.ndarray:
        """Importance per input: |mean| or |median| of the sensitivity."""
        centre = self.median if self.importance == "median" else self.mean
        return np.abs(centre)

    @property
    def ranks(self) -> np.ndarray:
        """1-based rank of each input."""
        ranks = np.empty(len(self.ranking), dtype=int)
        ranks[self.ranking] = np.arange(1, len(self.ranking) + 1)
        return ranks

    def ranked_names(self) -> list[str]:
        return [self.feature_names[j] for j in self.ranking]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "dataset": self.dataset,
            "input": self.feature_names,
            "mean": self.mean,
            "median": self.median,
            "std": self.std,
            "q01": self.q01,
            "q99": self.q99,
            "rank": self.ranks,
        })


def sensitivity_distribution(
    params: NetworkParams,
    inputs: np.ndarray,
    feature_names: Optional[Sequence[str]] = None,
    importance: str = "mean",
    dataset: str = "dataset",
) -> SensitivityReport:
    """Jacobian at every input row, summarized per input with a 98% empirical interval."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] < 2:
        raise ValidationError(f"need at least 2 evaluation points, got shape {inputs.shape}")
    if importance not in IMPORTANCE_AGGREGATES:
        raise ValidationError(f"importance must be one of {IMPORTANCE_AGGREGATES}, got '{importance}'")
    names = _feature_names(feature_names, params.n_inputs)
    return SensitivityReport(jacobian_batch(params, inputs), names, importance, dataset)


def bootstrap_sensitivities(
    X: np.ndarray,
    y: np.ndarray,
    architecture: Architecture,
    config: TrainConfig,
    n_refits: int = 20,
    loss_weights: Optional[np.ndarray] = None,
    feature_names: Optional[Sequence[str]] = None,
) -> SensitivityReport:
    """
    Sensitivity distribution across refits on bootstrap resamples.

    Each refit draws its rows and initialization from its own RNG stream
    and contributes its mean Jacobian over the original inputs; the report
    summarizes those n_refits means.
    """
    if n_refits < 2:
        raise ValidationError(f"n_refits must be at least 2, got {n_refits}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    means = np.empty((n_refits, architecture.n_inputs))
    for b in range(n_refits):
        rows = derive_rng(config.seed, 1_000_000 + b).integers(0, n, size=n)
        weights = None if loss_weights is None else np.asarray(loss_weights, dtype=float)[rows]
        fit = train(X[rows], y[rows], architecture, config, loss_weights=weights, stream_id=b)
        means[b] = jacobian_batch(fit.params, X).mean(axis=0)
        logger.debug("bootstrap refit %d/%d done", b + 1, n_refits)
    names = _feature_names(feature_names, architecture.n_inputs)
    return SensitivityReport(means, names, dataset="bootstrap")


def sensitivity_series(params: NetworkParams, panel: FactorPanel) -> pd.DataFrame:
    """Cross-sectional mean Jacobian per date; one column per factor."""
    X, _ = panel.stack()
    J = jacobian_batch(params, X).reshape(panel.T, panel.N, panel.K).mean(axis=1)
    frame = pd.DataFrame(J, columns=panel.factor_names)
    frame.insert(0, "date", panel.dates)
    return frame


# ---------------------------------------------------------------------------
# Interactions
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class InteractionReport:
    """Mean absolute Hessian entries over a set of points."""

    pair_scores: np.ndarray
    own_curvature: np.ndarray
    feature_names: list[str]
    ranking: list[tuple[int, int]] = field(default_factory=list)

    @property
    def top_pair(self) -> tuple[int, int]:
        return self.ranking[0]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "i": self.feature_names[i],
                "j": self.feature_names[j],
                "score": self.pair_scores[i, j],
                "rank": r,
            }
            for r, (i, j) in enumerate(self.ranking, 1)
        ]
        return pd.DataFrame(rows, columns=["i", "j", "score", "rank"])


def rank_interactions(
    params: NetworkParams,
    inputs: np.ndarray,
    feature_names: Optional[Sequence[str]] = None,
) -> InteractionReport:
    """Rank input pairs by mean |d2y/dxi dxj| over the inputs."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValidationError(f"need at least 1 evaluation point, got shape {inputs.shape}")
    scores = np.abs(hessian_batch(params, inputs)).mean(axis=0)
    K = scores.shape[0]
    own = np.diag(scores).copy()
    pairs = scores.copy()
    np.fill_diagonal(pairs, 0.0)

    iu, ju = np.triu_indices(K, k=1)
    order = _stable_ranking(pairs[iu, ju])
    ranking = [(int(iu[o]), int(ju[o])) for o in order]
    return InteractionReport(pairs, own, _feature_names(feature_names, K), ranking)


# ---------------------------------------------------------------------------
# Importance baselines
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ImportanceTable:
    """Per-input importance scores from one method."""

    method: str
    feature_names: list[str]
    scores: np.ndarray
    signed: bool = True

    @property
    def ranking(self) -> np.ndarray:
        return _stable_ranking(np.abs(self.scores))

    def to_frame(self) -> pd.DataFrame:
        ranks = np.empty(len(self.scores), dtype=int)
        ranks[self.ranking] = np.arange(1, len(self.scores) + 1)
        return pd.DataFrame({
            "method": self.method,
            "input": self.feature_names,
            "score": self.scores,
            "rank": ranks,
        })


def _single_hidden_layer(params: NetworkParams, method: str) -> tuple[np.ndarray, np.ndarray]:
    if params.n_hidden_layers != 1:
        raise UnsupportedArchitectureError(
            f"{method} requires exactly one hidden layer, network has {params.n_hidden_layers}"
        )
    return params.layers[0].weights, params.layers[1].weights[0]


def garson(
    params: NetworkParams,
    feature_names: Optional[Sequence[str]] = None,
    variant: str = "magnitude",
) -> ImportanceTable:
    """
    Garson relative importance from absolute connection weights.

    ``magnitude``: score_j proportional to sum_k |W1_kj| |W2_k|.
    ``classic``: each hidden unit's |W1_kj||W2_k| is first split across inputs
    in proportion to its incoming weights, then summed over units. Both
    variants are nonnegative and sum to one.
    """
    if variant not in GARSON_VARIANTS:
        raise ValidationError(f"variant must be one of {GARSON_VARIANTS}, got '{variant}'")
    W1, w2 = _single_hidden_layer(params, "garson")
    contrib = np.abs(W1) * np.abs(w2)[:, None]
    if variant == "classic":
        row_sums = contrib.sum(axis=1, keepdims=True)
        contrib = np.divide(contrib, row_sums, out=np.zeros_like(contrib), where=row_sums > 0)
    per_input = contrib.sum(axis=0)
    total = per_input.sum()
    K = W1.shape[1]
    scores = per_input / total if total > 0 else np.full(K, 1.0 / K)
    return ImportanceTable("garson", _feature_names(feature_names, K), scores, signed=False)


def olden(params: NetworkParams, feature_names: Optional[Sequence[str]] = None) -> ImportanceTable:
    """Olden connection weights R_j = sum_k W2_k W1_kj (signed)."""
    W1, w2 = _single_hidden_layer(params, "olden")
    scores = w2 @ W1
    return ImportanceTable("olden", _feature_names(feature_names, W1.shape[1]), scores, signed=True)


def jacobian_importance(
    params: NetworkParams,
    inputs: np.ndarray,
    feature_names: Optional[Sequence[str]] = None,
) -> ImportanceTable:
    """Mean sensitivity per input as an importance table."""
    report = sensitivity_distribution(params, inputs, feature_names)
    return ImportanceTable("jacobian", report.feature_names, report.mean, signed=True)


# ---------------------------------------------------------------------------
# Partial dependence
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PartialDependenceResult:
    feature: int
    feature_name: str
    grid: np.ndarray
    averaged: np.ndarray

    def slopes(self) -> np.ndarray:
        """Finite-difference slope of the curve at each grid point."""
        if len(self.grid) < 2:
            return np.zeros_like(self.averaged)
        return np.gradient(self.averaged, self.grid)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "feature": self.feature_name,
            "value": self.grid,
            "partial_dependence": self.averaged,
        })


def default_grid(
    values: np.ndarray,
    n_points: int = DEFAULT_PDP_POINTS,
    percentiles: tuple[float, float] = DEFAULT_PDP_PERCENTILES,
) -> np.ndarray:
    """Equally spaced points between two empirical percentiles of a feature."""
    if not 0.0 <= percentiles[0] < percentiles[1] <= 1.0:
        raise ValidationError(f"percentiles must satisfy 0 <= low < high <= 1, got {percentiles}")
    low, high = np.quantile(np.asarray(values, dtype=float), percentiles)
    if np.isclose(low, high):
        raise ValidationError("percentiles are too close to each other to build a grid")
    return np.linspace(low, high, n_points)


def partial_dependence(
    params: NetworkParams,
    inputs: np.ndarray,
    target_feature: int,
    grid: Optional[Sequence[float]] = None,
    feature_names: Optional[Sequence[str]] = None,
) -> PartialDependenceResult:
    """Average prediction over all rows with the target feature set to each grid value."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValidationError("inputs must be a nonempty matrix")
    K = inputs.shape[1]
    if not 0 <= target_feature < K:
        raise ValidationError(f"feature index {target_feature} out of range 0..{K - 1}")
    grid = default_grid(inputs[:, target_feature]) if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValidationError("grid must be nonempty")

    averaged = np.empty(grid.size)
    X = inputs.copy()
    for g, value in enumerate(grid):
        X[:, target_feature] = value
        averaged[g] = predict(params, X).mean()
    names = _feature_names(feature_names, K)
    return PartialDependenceResult(target_feature, names[target_feature], grid, averaged)


def pdp_importance(
    params: NetworkParams,
    inputs: np.ndarray,
    feature_names: Optional[Sequence[str]] = None,
) -> ImportanceTable:
    """Least-squares slope of each feature's partial dependence curve."""
    inputs = np.asarray(inputs, dtype=float)
    scores = np.empty(inputs.shape[1])
    for j in range(inputs.shape[1]):
        curve = partial_dependence(params, inputs, j)
        scores[j] = np.polyfit(curve.grid, curve.averaged, 1)[0]
    return ImportanceTable("pdp", _feature_names(feature_names, inputs.shape[1]), scores, signed=True)


IMPORTANCE_METHODS = ("jacobian", "garson", "olden", "pdp")


def importance(
    params: NetworkParams,
    method: str,
    inputs: Optional[np.ndarray] = None,
    feature_names: Optional[Sequence[str]] = None,
) -> ImportanceTable:
    """Dispatch to one of the importance methods by name."""
    if method == "garson":
        return garson(params, feature_names)
    if method == "olden":
        return olden(params, feature_names)
    if method not in IMPORTANCE_METHODS:
        raise ValidationError(f"Unknown method '{method}'. Available: {', '.join(IMPORTANCE_METHODS)}")
    if inputs is None:
        raise ValidationError(f"method '{method}' needs evaluation inputs")
    if method == "jacobian":
        return jacobian_importance(params, inputs, feature_names)
    return pdp_importance(params, inputs, feature_names)

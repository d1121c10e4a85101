"""
Heteroscedastic (GLS) estimation for factor networks.

The two-step procedure:
  1. fit with unit loss weights and collect the residuals of every date
  2. estimate the diagonal residual covariance D from those residuals
  3. refit with per-asset loss weights 1/sigma_i^2
  4. recompute residuals and the refined covariance

The loss weights are rescaled to mean one before step 3; the unpenalized
minimizer is unchanged by the rescaling.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm

from data import FactorPanel
from errors import DimensionMismatchError, InsufficientWindowsError, NumericalError, ValidationError
from nn_core import (
    Architecture,
    NetworkParams,
    TrainConfig,
    linear_network,
    predict,
    train,
)

logger = logging.getLogger(__name__)

DEFAULT_VARIANCE_FLOOR = 1e-8


@dataclass(eq=False)
class ResidualCovariance:
    """Diagonal residual covariance: one variance per asset."""

    variances: np.ndarray
    window_length: int

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=float).reshape(-1)

    @property
    def n_assets(self) -> int:
        return self.variances.shape[0]

    @property
    def precisions(self) -> np.ndarray:
        return 1.0 / self.variances

    def matrix(self) -> np.ndarray:
        return np.diag(self.variances)

    @classmethod
    def identity(cls, n_assets: int, window_length: int = 0) -> "ResidualCovariance":
        return cls(np.ones(n_assets), window_length)


@dataclass(eq=False)
class GlsFitResult:
    """Artifacts of a two-step fit on one window."""

    params: NetworkParams
    residuals_unweighted: np.ndarray
    residuals_refined: np.ndarray
    covariance_first_pass: ResidualCovariance
    covariance_refined: ResidualCovariance
    first_pass_params: Optional[NetworkParams] = None
    loss_weights: Optional[np.ndarray] = None
    weighted_mse_first_pass: float = float("nan")
    weighted_mse_refined: float = float("nan")
    flagged: bool = False
    loss_traces: dict[str, np.ndarray] = field(default_factory=dict)

    def predict(self, exposures: np.ndarray) -> np.ndarray:
        """Refined-model predictions for one cross-section (N x K)."""
        return predict(self.params, exposures)


def _as_variances(cov: ResidualCovariance | Sequence[float]) -> np.ndarray:
    if isinstance(cov, ResidualCovariance):
        return cov.variances
    return np.asarray(cov, dtype=float).reshape(-1)


def weighted_loss(
    y: np.ndarray,
    y_hat: np.ndarray,
    cov: ResidualCovariance | Sequence[float],
) -> float:
    """Squared Mahalanobis length sum_i (y_i - yhat_i)^2 / sigma_i^2."""
    y = np.asarray(y, dtype=float).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=float).reshape(-1)
    variances = _as_variances(cov)
    if not (y.shape == y_hat.shape == variances.shape):
        raise DimensionMismatchError(
            f"lengths differ: y {y.shape[0]}, y_hat {y_hat.shape[0]}, variances {variances.shape[0]}"
        )
    if not np.all(variances > 0):
        raise ValidationError("residual variances must be strictly positive")
    resid = y - y_hat
    return float(np.sum(resid * resid / variances))


def estimate_residual_covariance(
    residuals: np.ndarray,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    centered: bool = False,
) -> ResidualCovariance:
    """
    Diagonal of (1/(T-1)) sum_t eps_t eps_t^T, floored at variance_floor.

    With ``centered`` the per-asset mean residual is removed first.
    """
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim == 1:
        residuals = residuals.reshape(-1, 1)
    T = residuals.shape[0]
    if T < 2:
        raise InsufficientWindowsError(f"insufficient windows: need at least 2 dates, got {T}")
    if not np.all(np.isfinite(residuals)):
        raise NumericalError("non-finite residuals")
    if not variance_floor > 0:
        raise ValidationError(f"variance_floor must be positive, got {variance_floor}")

    if centered:
        residuals = residuals - residuals.mean(axis=0)
    variances = np.sum(residuals * residuals, axis=0) / (T - 1)
    n_floored = int(np.sum(variances < variance_floor))
    if n_floored:
        logger.debug("%d residual variances floored at %g", n_floored, variance_floor)
    return ResidualCovariance(np.maximum(variances, variance_floor), T)


def sample_weights(cov: ResidualCovariance, n_dates: int, normalize: bool = True) -> np.ndarray:
    """Per-sample loss weights 1/sigma_i^2 in the date-major order of FactorPanel.stack()."""
    weights = np.tile(cov.precisions, n_dates)
    if normalize:
        weights = weights / weights.mean()
    return weights


def _residual_matrix(params: NetworkParams, panel: FactorPanel) -> np.ndarray:
    X, y = panel.stack()
    return (y - predict(params, X)).reshape(panel.T, panel.N)


def _weighted_mse(residuals: np.ndarray, cov: ResidualCovariance) -> float:
    return float(np.mean(residuals * residuals * cov.precisions))


def fit_two_step(
    panel: FactorPanel,
    architecture: Architecture,
    config: TrainConfig = TrainConfig(),
    warm_start: bool = False,
    force_identity_covariance: bool = False,
    centered: bool = False,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    stream_id: int = 0,
) -> GlsFitResult:
    """
    Two-step GLS fit of a network on a panel window.

    Both passes draw their initialization from the same (seed, stream_id),
    so a refit under identity covariance reproduces the first pass exactly.
    ``warm_start`` starts the refit from the first-pass weights instead.
    ``force_identity_covariance`` replaces the estimated D with the identity
    in step 3 (the estimated covariances are still reported).

    The step-3 loss weights are normalized to mean one, so with
    ``config.l1_lambda`` or ``config.l2_lambda`` above zero the penalty
    strength relative to the data term differs from an unnormalized
    1/sigma_i^2 weighting by the factor mean(1/sigma_i^2).

    Raises:
        InsufficientWindowsError: fewer than 2 dates
        TrainingDivergedError: either pass diverged
    """
    if panel.T < 2:
        raise InsufficientWindowsError(f"insufficient windows: need at least 2 dates, got {panel.T}")
    if architecture.n_inputs != panel.K:
        raise DimensionMismatchError(
            f"architecture expects {architecture.n_inputs} inputs, panel has {panel.K} factors", layer=1
        )
    X, y = panel.stack()

    first = train(X, y, architecture, config, stream_id=stream_id)
    residuals_first = _residual_matrix(first.params, panel)
    cov_first = estimate_residual_covariance(residuals_first, variance_floor, centered)

    step3_cov = ResidualCovariance.identity(panel.N, panel.T) if force_identity_covariance else cov_first
    weights = sample_weights(step3_cov, panel.T)
    refined = train(
        X, y, architecture, config,
        loss_weights=weights,
        initial_params=first.params if warm_start else None,
        stream_id=stream_id,
    )
    residuals_refined = _residual_matrix(refined.params, panel)
    cov_refined = estimate_residual_covariance(residuals_refined, variance_floor, centered)

    mse_first = _weighted_mse(residuals_first, cov_first)
    mse_refined = _weighted_mse(residuals_refined, cov_first)
    flagged = mse_refined > mse_first
    if flagged:
        logger.warning(
            "Refined weighted MSE %.6g exceeds first-pass %.6g on window ending %s",
            mse_refined, mse_first, panel.dates[-1],
        )

    return GlsFitResult(
        params=refined.params,
        residuals_unweighted=residuals_first,
        residuals_refined=residuals_refined,
        covariance_first_pass=cov_first,
        covariance_refined=cov_refined,
        first_pass_params=first.params,
        loss_weights=weights,
        weighted_mse_first_pass=mse_first,
        weighted_mse_refined=mse_refined,
        flagged=flagged,
        loss_traces={"first_pass": first.loss_trace, "refined": refined.loss_trace},
    )


def return_covariance(fit: GlsFitResult, panel: FactorPanel) -> np.ndarray:
    """
    V(r) = V[F(B)] + D'.

    V[F(B)] is the sample covariance over the window's dates of the refined
    model's cross-sectional predictions; D' is the refined residual diagonal.
    """
    if panel.N != fit.covariance_refined.n_assets:
        raise DimensionMismatchError(
            f"panel has {panel.N} assets, fit has {fit.covariance_refined.n_assets}"
        )
    if panel.T < 2:
        raise InsufficientWindowsError(f"insufficient windows: need at least 2 dates, got {panel.T}")
    X, _ = panel.stack()
    fitted = predict(fit.params, X).reshape(panel.T, panel.N)
    model_cov = np.atleast_2d(np.cov(fitted, rowvar=False, ddof=1))
    return model_cov + np.diag(fit.covariance_refined.variances)


# ---------------------------------------------------------------------------
# Closed-form linear GLS
# ---------------------------------------------------------------------------


def wls_solve(
    X: np.ndarray,
    y: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Weighted least squares with an intercept; returns (intercept, coefficients)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if weights is None:
        weights = np.ones_like(y)
    design = sm.add_constant(X, has_constant="add")
    result = sm.WLS(y, design, weights=np.asarray(weights, dtype=float)).fit()
    params = np.asarray(result.params, dtype=float)
    return float(params[0]), params[1:]


def fit_linear_gls(
    panel: FactorPanel,
    centered: bool = False,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    force_identity_covariance: bool = False,
) -> GlsFitResult:
    """Two-step GLS for the linear factor model by direct OLS then WLS solves."""
    if panel.T < 2:
        raise InsufficientWindowsError(f"insufficient windows: need at least 2 dates, got {panel.T}")
    X, y = panel.stack()

    intercept, coefs = wls_solve(X, y)
    first = linear_network(coefs, intercept)
    residuals_first = _residual_matrix(first, panel)
    cov_first = estimate_residual_covariance(residuals_first, variance_floor, centered)

    step3_cov = ResidualCovariance.identity(panel.N, panel.T) if force_identity_covariance else cov_first
    weights = sample_weights(step3_cov, panel.T)
    intercept, coefs = wls_solve(X, y, weights)
    refined = linear_network(coefs, intercept)
    residuals_refined = _residual_matrix(refined, panel)
    cov_refined = estimate_residual_covariance(residuals_refined, variance_floor, centered)

    mse_first = _weighted_mse(residuals_first, cov_first)
    mse_refined = _weighted_mse(residuals_refined, cov_first)
    return GlsFitResult(
        params=refined,
        residuals_unweighted=residuals_first,
        residuals_refined=residuals_refined,
        covariance_first_pass=cov_first,
        covariance_refined=cov_refined,
        first_pass_params=first,
        loss_weights=weights,
        weighted_mse_first_pass=mse_first,
        weighted_mse_refined=mse_refined,
        flagged=mse_refined > mse_first * (1.0 + 1e-12),
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def residuals_frame(fit: GlsFitResult, panel: FactorPanel) -> pd.DataFrame:
    """Long-form residuals: date, asset, residual_unweighted, residual_refined."""
    return pd.DataFrame({
        "date": np.repeat(panel.dates, panel.N),
        "asset": np.tile(panel.assets, panel.T),
        "residual_unweighted": fit.residuals_unweighted.reshape(-1),
        "residual_refined": fit.residuals_refined.reshape(-1),
    })


def variances_frame(fit: GlsFitResult, panel: FactorPanel) -> pd.DataFrame:
    """Per-asset variances of both passes with the window they were estimated on."""
    return pd.DataFrame({
        "asset": panel.assets,
        "variance_first_pass": fit.covariance_first_pass.variances,
        "variance_refined": fit.covariance_refined.variances,
        "window_start": panel.dates[0],
        "window_end": panel.dates[-1],
        "window_length": fit.covariance_refined.window_length,
    })

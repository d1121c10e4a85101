"""
Model selection by K-fold cross-validation.

Folds come from a seeded shuffle; every fold trains on its own RNG stream.
The grid search picks the lowest mean out-of-fold weighted MSE, with ties
going to the model with fewer parameters.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from errors import ValidationError
from nn_core import Architecture, TrainConfig, derive_rng, predict, train

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 5
FOLD_STREAM = 7_000_000


@dataclass(eq=False)
class CrossValidationResult:
    fold_mse: np.ndarray
    oof_predictions: np.ndarray
    r2: float

    @property
    def mean_mse(self) -> float:
        return float(self.fold_mse.mean())


def fold_indices(n: int, n_folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of 0..n-1 split into n_folds nearly equal parts."""
    if not 2 <= n_folds <= n:
        raise ValidationError(f"n_folds must lie in 2..{n}, got {n_folds}")
    order = derive_rng(seed, FOLD_STREAM).permutation(n)
    return [np.sort(part) for part in np.array_split(order, n_folds)]


def cross_validate(
    X: np.ndarray,
    y: np.ndarray,
    architecture: Architecture,
    config: TrainConfig = TrainConfig(),
    n_folds: int = DEFAULT_FOLDS,
    loss_weights: Optional[np.ndarray] = None,
) -> CrossValidationResult:
    """Out-of-fold weighted MSE per fold and the pooled out-of-fold R^2."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    w = np.ones_like(y) if loss_weights is None else np.asarray(loss_weights, dtype=float).reshape(-1)
    folds = fold_indices(y.size, n_folds, config.seed)

    oof = np.empty_like(y)
    fold_mse = np.empty(n_folds)
    for k, held_out in enumerate(folds):
        train_rows = np.setdiff1d(np.arange(y.size), held_out, assume_unique=True)
        fit = train(X[train_rows], y[train_rows], architecture, config, loss_weights=w[train_rows], stream_id=k)
        oof[held_out] = predict(fit.params, X[held_out])
        fold_mse[k] = float(np.mean(w[held_out] * (y[held_out] - oof[held_out]) ** 2))
        logger.debug("fold %d/%d: mse %.6g", k + 1, n_folds, fold_mse[k])

    ss_res = float(np.sum((y - oof) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return CrossValidationResult(fold_mse, oof, r2)


@dataclass(eq=False)
class TuneResult:
    table: pd.DataFrame
    best_architecture: Architecture
    best_config: TrainConfig


def tune(
    X: np.ndarray,
    y: np.ndarray,
    hidden_grid: Sequence[tuple[int, ...]],
    l1_grid: Sequence[float] = (0.0,),
    l2_grid: Sequence[float] = (0.0,),
    config: TrainConfig = TrainConfig(),
    n_folds: int = DEFAULT_FOLDS,
    activation: str = "tanh",
    loss_weights: Optional[np.ndarray] = None,
) -> TuneResult:
    """Grid search over hidden widths and penalty strengths."""
    X = np.asarray(X, dtype=float)
    if not hidden_grid or not l1_grid or not l2_grid:
        raise ValidationError("every grid must be nonempty")

    rows = []
    candidates = []
    for hidden in hidden_grid:
        architecture = Architecture(n_inputs=X.shape[1], hidden=tuple(hidden), activation=activation)
        for l1 in l1_grid:
            for l2 in l2_grid:
                candidate = replace(config, l1_lambda=float(l1), l2_lambda=float(l2))
                cv = cross_validate(X, y, architecture, candidate, n_folds, loss_weights)
                rows.append({
                    "hidden": architecture.describe(),
                    "l1": float(l1),
                    "l2": float(l2),
                    "n_parameters": architecture.n_parameters,
                    "cv_mse": cv.mean_mse,
                    "cv_r2": cv.r2,
                })
                candidates.append((architecture, candidate))
                logger.info("%s l1=%g l2=%g: cv mse %.6g, R2 %.4f", architecture.describe(), l1, l2, cv.mean_mse, cv.r2)

    table = pd.DataFrame(rows)
    best = min(range(len(rows)), key=lambda i: (rows[i]["cv_mse"], rows[i]["n_parameters"], i))
    table["selected"] = [i == best for i in range(len(rows))]
    return TuneResult(table, *candidates[best])

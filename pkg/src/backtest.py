"""
Rolling-window factor backtest.

For every date t with a full window behind it, a model is fitted by
two-step GLS on the m dates ending at t, asset returns at t+1 are predicted
from the exposures at t+1, and the n assets with the highest predictions
form an equal-weighted portfolio. Portfolio returns are measured against a
benchmark and summarized as annualized information ratios.

Modes:
    model   network with hidden layers
    linear  zero-hidden-layer network under the same GLS procedure
    random  n assets drawn uniformly per date, repeated over trials
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from data import FactorPanel
from errors import (
    DimensionMismatchError,
    NonDifferentiableActivationError,
    NumericalError,
    ValidationError,
)
from gls import GlsFitResult, fit_linear_gls, fit_two_step
from interpret import jacobian_batch
from nn_core import Architecture, TrainConfig, derive_rng

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 24
DEFAULT_PORTFOLIO_SIZES = (25, 50, 100)
DEFAULT_HIDDEN = (50, 10)
DEFAULT_RANDOM_TRIALS = 100
PERIODS_PER_YEAR = 12
# Backtests fit two networks per window; fewer, larger SGD steps than the library default.
DEFAULT_BACKTEST_TRAIN = TrainConfig(learning_rate=0.01, epochs=50, batch_size=128)
RANDOM_STREAM_OFFSET = 1_000_000


class BacktestMode(str, Enum):
    MODEL = "model"
    LINEAR = "linear"
    RANDOM = "random"


LINEAR_SOLVERS = ("sgd", "wls")


@dataclass
class BacktestConfig:
    """Settings of one backtest run."""

    window: int = DEFAULT_WINDOW
    portfolio_sizes: tuple[int, ...] = DEFAULT_PORTFOLIO_SIZES
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    activation: str = "tanh"
    train_config: TrainConfig = DEFAULT_BACKTEST_TRAIN
    benchmark: Optional[np.ndarray] = None
    mode: BacktestMode = BacktestMode.MODEL
    n_random_trials: int = DEFAULT_RANDOM_TRIALS
    seed: int = 0
    threads: int = 1
    linear_solver: str = "sgd"
    centered: bool = False
    perfect_foresight: bool = False

    def __post_init__(self):
        try:
            self.mode = BacktestMode(self.mode)
        except ValueError:
            raise ValidationError(
                f"Unknown mode '{self.mode}'. Available: {', '.join(m.value for m in BacktestMode)}"
            ) from None
        self.portfolio_sizes = tuple(int(n) for n in self.portfolio_sizes)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.window < 2:
            raise ValidationError(f"window must be at least 2, got {self.window}")
        if not self.portfolio_sizes or any(n < 1 for n in self.portfolio_sizes):
            raise ValidationError(f"portfolio sizes must be positive, got {self.portfolio_sizes}")
        if self.n_random_trials < 1:
            raise ValidationError(f"n_random_trials must be positive, got {self.n_random_trials}")
        if self.threads < 1:
            raise ValidationError(f"threads must be positive, got {self.threads}")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ValidationError(f"linear_solver must be one of {LINEAR_SOLVERS}, got '{self.linear_solver}'")

    def architecture(self, n_inputs: int) -> Architecture:
        hidden = () if self.mode is BacktestMode.LINEAR else self.hidden
        return Architecture(n_inputs=n_inputs, hidden=hidden, activation=self.activation)


@dataclass(frozen=True)
class InformationRatio:
    """Annualized IR; ``unbounded`` marks zero tracking error with a nonzero mean."""

    value: float
    unbounded: bool = False
    n_periods: int = 0

    def __float__(self) -> float:
        return self.value


@dataclass
class WindowResult:
    """Outcome of one fitting window and its one-step-ahead prediction."""

    index: int
    fit_start: str
    fit_end: str
    predict_date: str
    success: bool = True
    predictions: Optional[np.ndarray] = None
    sensitivities: Optional[np.ndarray] = None
    in_sample_mse: float = float("nan")
    out_of_sample_mse: float = float("nan")
    flagged: bool = False
    error: Optional[str] = None
    error_type: Optional[str] = None


@dataclass(eq=False)
class BacktestResult:
    """Per-date predictions, portfolio series and information ratios."""

    config: BacktestConfig
    assets: list[str]
    factor_names: list[str]
    windows: list[WindowResult]
    realized: np.ndarray
    benchmark: np.ndarray
    active_returns: dict[int, np.ndarray] = field(default_factory=dict)
    information_ratios: dict[int, InformationRatio] = field(default_factory=dict)
    random_ir: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def dates(self) -> list[str]:
        return [w.predict_date for w in self.windows]

    @property
    def successful(self) -> list[WindowResult]:
        return [w for w in self.windows if w.success]

    @property
    def portfolio_dates(self) -> list[str]:
        return [w.predict_date for w in self.successful]

    @property
    def predictions(self) -> np.ndarray:
        """T' x N, NaN rows for skipped windows."""
        out = np.full((len(self.windows), len(self.assets)), np.nan)
        for i, w in enumerate(self.windows):
            if w.success and w.predictions is not None:
                out[i] = w.predictions
        return out

    @property
    def in_sample_mse(self) -> np.ndarray:
        return np.array([w.in_sample_mse for w in self.windows])

    @property
    def out_of_sample_mse(self) -> np.ndarray:
        return np.array([w.out_of_sample_mse for w in self.windows])

    def predictions_frame(self) -> pd.DataFrame:
        N = len(self.assets)
        return pd.DataFrame({
            "date": np.repeat(self.dates, N),
            "asset": np.tile(self.assets, len(self.windows)),
            "y_hat": self.predictions.reshape(-1),
            "y_real": self.realized.reshape(-1),
        })

    def portfolio_frame(self) -> pd.DataFrame:
        frames = [
            pd.DataFrame({"date": self.portfolio_dates, "n": n, "active_return": series})
            for n, series in self.active_returns.items()
        ]
        if not frames:
            return pd.DataFrame(columns=["date", "n", "active_return"])
        return pd.concat(frames, ignore_index=True)

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for n, ir in self.information_ratios.items():
            row = {
                "n": n,
                "IR": ir.value,
                "mode": self.config.mode.value,
                "unbounded": ir.unbounded,
                "n_periods": ir.n_periods,
            }
            if n in self.random_ir:
                row["IR_q05"], row["IR_q95"] = np.quantile(self.random_ir[n], [0.05, 0.95])
            rows.append(row)
        return pd.DataFrame(rows)

    def windows_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "predict_date": w.predict_date,
                "fit_start": w.fit_start,
                "fit_end": w.fit_end,
                "success": w.success,
                "flagged": w.flagged,
                "in_sample_mse": w.in_sample_mse,
                "out_of_sample_mse": w.out_of_sample_mse,
                "error_type": w.error_type or "",
                "error": w.error or "",
            }
            for w in self.windows
        ])

    def sensitivity_frame(self) -> pd.DataFrame:
        """Cross-sectional mean Jacobian of each window's model at its prediction date."""
        rows = [w for w in self.successful if w.sensitivities is not None]
        frame = pd.DataFrame(
            np.array([w.sensitivities for w in rows]).reshape(len(rows), len(self.factor_names)),
            columns=self.factor_names,
        )
        frame.insert(0, "date", [w.predict_date for w in rows])
        return frame


# ---------------------------------------------------------------------------
# Metrics and selection
# ---------------------------------------------------------------------------


def information_ratio(
    portfolio_returns: Sequence[float],
    benchmark_returns: Sequence[float],
    periods_per_year: int = PERIODS_PER_YEAR,
) -> InformationRatio:
    """
    Annualized mean active return over annualized tracking error.

    All-zero active returns give 0. Zero tracking error with a nonzero mean
    gives an unbounded (+/-inf) result.
    """
    p = np.asarray(portfolio_returns, dtype=float).reshape(-1)
    b = np.asarray(benchmark_returns, dtype=float).reshape(-1)
    if p.shape != b.shape:
        raise DimensionMismatchError(f"{p.size} portfolio returns but {b.size} benchmark returns")
    if p.size < 2:
        raise ValidationError(f"need at least 2 periods, got {p.size}")
    active = p - b
    if not np.any(active):
        return InformationRatio(0.0, False, p.size)
    mean = float(active.mean())
    std = float(active.std(ddof=1))
    if std <= 1e-12 * abs(mean):
        return InformationRatio(float(np.copysign(np.inf, mean)), True, p.size)
    value = mean * periods_per_year / (std * np.sqrt(periods_per_year))
    return InformationRatio(float(value), False, p.size)


def select_top_n(predictions: Sequence[float], n: int) -> np.ndarray:
    """Indices of the n largest predictions, ties to the lower index, ascending."""
    pred = np.asarray(predictions, dtype=float).reshape(-1)
    if not 1 <= n <= pred.size:
        raise ValidationError(f"n must lie in 1..{pred.size}, got {n}")
    return np.sort(np.argsort(-pred, kind="stable")[:n])


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


def _fit_window(panel: FactorPanel, config: BacktestConfig, architecture: Architecture, index: int) -> GlsFitResult:
    if config.mode is BacktestMode.LINEAR and config.linear_solver == "wls":
        return fit_linear_gls(panel, centered=config.centered)
    return fit_two_step(
        panel, architecture, config.train_config, centered=config.centered, stream_id=index
    )


def _run_window(panel: FactorPanel, config: BacktestConfig, architecture: Architecture, index: int) -> WindowResult:
    start, end = index, index + config.window
    target = end
    result = WindowResult(
        index=index,
        fit_start=panel.dates[start],
        fit_end=panel.dates[end - 1],
        predict_date=panel.dates[target],
    )
    realized = panel.returns[target]

    if config.perfect_foresight:
        result.predictions = realized.copy()
        result.in_sample_mse = result.out_of_sample_mse = 0.0
        return result
    if config.mode is BacktestMode.RANDOM:
        return result

    # Only dates [start, end) reach the fit; exposures at the target date are known ex ante.
    window = panel.window(start, end)
    try:
        fit = _fit_window(window, config, architecture, index)
    except NumericalError as e:
        logger.warning("Window ending %s skipped: %s", result.fit_end, e)
        result.success = False
        result.error = str(e)
        result.error_type = e.error_type
        return result

    exposures = panel.exposures[target]
    result.predictions = fit.predict(exposures)
    try:
        result.sensitivities = jacobian_batch(fit.params, exposures).mean(axis=0)
    except NonDifferentiableActivationError:
        result.sensitivities = None
    precisions = fit.covariance_refined.precisions
    result.in_sample_mse = float(np.mean(fit.residuals_refined ** 2 * precisions))
    result.out_of_sample_mse = float(np.mean((realized - result.predictions) ** 2 * precisions))
    result.flagged = fit.flagged
    logger.debug(
        "window %d (%s..%s): in-sample %.4g, out-of-sample %.4g",
        index, result.fit_start, result.fit_end, result.in_sample_mse, result.out_of_sample_mse,
    )
    return result


def _safe_ir(active: np.ndarray) -> InformationRatio:
    if active.size < 2:
        return InformationRatio(float("nan"), False, int(active.size))
    return information_ratio(active, np.zeros_like(active))


def _random_information_ratios(
    panel: FactorPanel,
    config: BacktestConfig,
    targets: list[int],
    benchmark: np.ndarray,
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """IR of each random trial per size, plus the active series of trial 0."""
    irs = {n: np.empty(config.n_random_trials) for n in config.portfolio_sizes}
    first_series: dict[int, np.ndarray] = {}
    for trial in range(config.n_random_trials):
        rng = derive_rng(config.seed, RANDOM_STREAM_OFFSET + trial)
        for n in config.portfolio_sizes:
            active = np.array([
                panel.returns[t, rng.choice(panel.N, size=n, replace=False)].mean() - benchmark[t]
                for t in targets
            ])
            irs[n][trial] = _safe_ir(active).value
            if trial == 0:
                first_series[n] = active
    return irs, first_series


def run_backtest(panel: FactorPanel, config: BacktestConfig = BacktestConfig()) -> BacktestResult:
    """
    Walk forward over the panel, one window per prediction date.

    Windows run concurrently when ``config.threads`` > 1; each draws from its
    own RNG stream, so results do not depend on the thread count. Windows
    whose training diverges are skipped and excluded from the portfolios.

    Raises:
        ValidationError: panel not longer than the window, portfolio size
            above the asset count, or misaligned benchmark
    """
    m = config.window
    if panel.T <= m:
        raise ValidationError(f"panel has {panel.T} dates; need more than the window of {m}")
    too_big = [n for n in config.portfolio_sizes if n > panel.N]
    if too_big:
        raise ValidationError(f"portfolio sizes {too_big} exceed the {panel.N} assets")
    if config.benchmark is None:
        benchmark = panel.equal_weighted_benchmark()
    else:
        benchmark = np.asarray(config.benchmark, dtype=float).reshape(-1)
        if benchmark.size != panel.T:
            raise DimensionMismatchError(f"benchmark has {benchmark.size} dates, panel has {panel.T}")

    architecture = config.architecture(panel.K)
    indices = list(range(panel.T - m))
    logger.info(
        "Backtest: %s mode, %d windows of %d dates, %d assets, %d factors",
        config.mode.value, len(indices), m, panel.N, panel.K,
    )

    if config.threads > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            windows = list(pool.map(lambda i: _run_window(panel, config, architecture, i), indices))
    else:
        windows = [_run_window(panel, config, architecture, i) for i in indices]

    targets = [w.index + m for w in windows]
    result = BacktestResult(
        config=config,
        assets=list(panel.assets),
        factor_names=list(panel.factor_names),
        windows=windows,
        realized=panel.returns[m:].copy(),
        benchmark=benchmark[m:].copy(),
    )

    if config.mode is BacktestMode.RANDOM and not config.perfect_foresight:
        irs, first_series = _random_information_ratios(panel, config, targets, benchmark)
        result.random_ir = irs
        result.active_returns = first_series
        for n, values in irs.items():
            result.information_ratios[n] = InformationRatio(float(np.median(values)), False, len(targets))
    else:
        good = [w for w in windows if w.success]
        for n in config.portfolio_sizes:
            active = np.array([
                panel.returns[w.index + m, select_top_n(w.predictions, n)].mean() - benchmark[w.index + m]
                for w in good
            ])
            result.active_returns[n] = active
            result.information_ratios[n] = _safe_ir(active)

    skipped = len(windows) - len(result.successful)
    if skipped:
        logger.warning("%d of %d windows skipped", skipped, len(windows))
    for n, ir in result.information_ratios.items():
        logger.info("IR(n=%d) = %.4g%s", n, ir.value, " (unbounded)" if ir.unbounded else "")
    return result

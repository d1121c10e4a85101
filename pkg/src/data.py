"""
Datasets and factor panels.

Synthetic generators for the simulated experiments (two-factor linear
model, stepped coefficients, Friedman benchmark, additive baseline, and a
heteroscedastic nonlinear factor panel), CSV ingestion and export of real
factor panels, and cross-sectional standardization.

Panel CSV schema:
    date,asset,ret,<factor_1>,...,<factor_K>
    dates YYYY-MM-DD, missing values as empty fields, one row per (date, asset)
"""

import io
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from errors import PanelFormatError, ValidationError
from output import write_csv

logger = logging.getLogger(__name__)

DEFAULT_MIN_COVERAGE = 0.9
DEFAULT_STEP_NOISE_HALF_WIDTH = 0.5
DEFAULT_SIGNAL_SCALE = 0.01
DEFAULT_PANEL_START = "2008-11-01"
PANEL_KEY_COLUMNS = ("date", "asset", "ret")
GENERATOR_KINDS = ("linear2", "step10", "friedman", "additive", "het_panel")
NOISE_PROFILES = ("constant", "linear", "one_loud")


class DegenerateFactorWarning(UserWarning):
    """A factor has zero cross-sectional variance on some date."""


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class GeneratorSpec:
    """Parameters of a synthetic experiment. The seed fully determines the draw."""

    kind: str
    n_samples: Optional[int] = None
    T: Optional[int] = None
    N: Optional[int] = None
    K: Optional[int] = None
    noise_sigma: Optional[float] = None
    seed: int = 0
    true_params: Optional[tuple[float, ...]] = None
    noise_profile: str | tuple[float, ...] = "linear"
    interaction: float = 1.0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValidationError(f"Unknown generator '{self.kind}'. Available: {', '.join(GENERATOR_KINDS)}")


@dataclass(eq=False)
class Dataset:
    """Cross-sectional regression sample: inputs X (n x K) and targets y."""

    X: np.ndarray
    y: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValidationError(f"X of shape {self.X.shape} does not match y of length {self.y.shape[0]}")
        if not self.feature_names:
            self.feature_names = [f"x{j + 1}" for j in range(self.X.shape[1])]

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.X, columns=self.feature_names)
        frame["y"] = self.y
        return frame


@dataclass(eq=False)
class FactorPanel:
    """
    Per-date cross-sections of asset returns and factor exposures.

    returns is T x N, exposures is T x N x K.
    """

    dates: list[str]
    assets: list[str]
    returns: np.ndarray
    exposures: np.ndarray
    factor_names: list[str]
    dropped_assets: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.dates = [str(d) for d in self.dates]
        self.assets = [str(a) for a in self.assets]
        self.returns = np.asarray(self.returns, dtype=float)
        self.exposures = np.asarray(self.exposures, dtype=float)
        T, N = len(self.dates), len(self.assets)
        if self.returns.shape != (T, N):
            raise ValidationError(f"returns shape {self.returns.shape} does not match ({T}, {N})")
        if self.exposures.ndim != 3 or self.exposures.shape[:2] != (T, N):
            raise ValidationError(f"exposures shape {self.exposures.shape} does not match ({T}, {N}, K)")
        if self.exposures.shape[2] != len(self.factor_names):
            raise ValidationError("factor_names length does not match exposures")

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def N(self) -> int:
        return len(self.assets)

    @property
    def K(self) -> int:
        return len(self.factor_names)

    def window(self, start: int, stop: int) -> "FactorPanel":
        """Dates [start, stop) as a new panel."""
        if not 0 <= start < stop <= self.T:
            raise ValidationError(f"window [{start}, {stop}) outside 0..{self.T}")
        return FactorPanel(
            dates=self.dates[start:stop],
            assets=list(self.assets),
            returns=self.returns[start:stop].copy(),
            exposures=self.exposures[start:stop].copy(),
            factor_names=list(self.factor_names),
        )

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        """All (date, asset) samples: X of shape (T*N, K), y of length T*N, date-major."""
        return self.exposures.reshape(-1, self.K), self.returns.reshape(-1)

    def equal_weighted_benchmark(self) -> np.ndarray:
        """Equal-weighted universe return per date."""
        return self.returns.mean(axis=1)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "date": np.repeat(self.dates, self.N),
            "asset": np.tile(self.assets, self.T),
            "ret": self.returns.reshape(-1),
        })
        for k, name in enumerate(self.factor_names):
            frame[name] = self.exposures[:, :, k].reshape(-1)
        return frame


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _check_n(n: int):
    if n is None or int(n) < 1:
        raise ValidationError(f"n must be at least 1, got {n}")


def gen_linear2(
    n: int,
    seed: int,
    noise_sigma: float = 1.0,
    beta: Sequence[float] = (1.0, 1.0),
) -> Dataset:
    """Y = b1 X1 + b2 X2 + eps with X1, X2, eps standard normal."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    eps = rng.standard_normal(n)
    y = X @ np.asarray(beta, dtype=float)
    if noise_sigma:
        y = y + noise_sigma * eps
    return Dataset(X, y)


def gen_step10(
    n: int,
    seed: int,
    noise_half_width: float = DEFAULT_STEP_NOISE_HALF_WIDTH,
) -> Dataset:
    """Y = sum_i i X_i + u with X_i ~ U(0,1) and u ~ U(-h, h)."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, 10))
    noise = rng.uniform(-1.0, 1.0, size=n)
    y = X @ np.arange(1.0, 11.0)
    if noise_half_width:
        y = y + noise_half_width * noise
    return Dataset(X, y)


def friedman_response(X: np.ndarray) -> np.ndarray:
    """Noise-free Friedman function; only the first five inputs matter."""
    X = np.asarray(X, dtype=float)
    return (
        10.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
        + 20.0 * (X[:, 2] - 0.5) ** 2
        + 10.0 * X[:, 3]
        + 5.0 * X[:, 4]
    )


def gen_friedman(n: int, sigma: float = 1.0, seed: int = 0) -> Dataset:
    """Ten U(0,1) inputs, Friedman response plus N(0, sigma^2) noise."""
    _check_n(n)
    if sigma < 0:
        raise ValidationError(f"sigma must be nonnegative, got {sigma}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, 10))
    noise = rng.standard_normal(n)
    y = friedman_response(X)
    if sigma:
        y = y + sigma * noise
    return Dataset(X, y)


def gen_additive(n: int, seed: int, noise_sigma: float = 0.1) -> Dataset:
    """Y = sin(2 pi x1) + 4 (x2 - 0.5)^2 + eps: curvature without interaction."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, 2))
    noise = rng.standard_normal(n)
    y = np.sin(2.0 * np.pi * X[:, 0]) + 4.0 * (X[:, 1] - 0.5) ** 2
    if noise_sigma:
        y = y + noise_sigma * noise
    return Dataset(X, y)


def het_panel_signal(B: np.ndarray, interaction: float = 1.0) -> np.ndarray:
    """
    Ground-truth expected-return shape of the synthetic panel, in units of the
    signal scale. Uses up to four factors; factors beyond the fourth are noise.
    """
    B = np.asarray(B, dtype=float)
    K = B.shape[-1]
    b1 = B[..., 0]
    signal = 0.5 * np.tanh(2.0 * b1)
    if K >= 2:
        b2 = B[..., 1]
        signal = signal + interaction * b1 * b2
    if K >= 3:
        signal = signal - 0.3 * (B[..., 2] ** 2 - 1.0)
    if K >= 4:
        signal = signal + 0.2 * B[..., 3]
    return signal


def noise_scales(profile: str | Sequence[float], N: int, base: float = 0.02) -> np.ndarray:
    """Per-asset residual volatilities for a named profile or an explicit list."""
    if not isinstance(profile, str):
        scales = np.asarray(profile, dtype=float)
        if scales.shape != (N,) or not np.all(scales > 0):
            raise ValidationError(f"explicit noise profile must be {N} positive values")
        return scales
    if profile == "constant":
        return np.full(N, base)
    if profile == "linear":
        return np.linspace(0.5 * base, 2.5 * base, N)
    if profile == "one_loud":
        scales = np.full(N, base)
        scales[0] *= 10.0
        return scales
    raise ValidationError(f"Unknown noise profile '{profile}'. Available: {', '.join(NOISE_PROFILES)}")


def gen_het_panel(
    T: int,
    N: int,
    K: int,
    noise_profile: str | Sequence[float] = "linear",
    seed: int = 0,
    interaction: float = 1.0,
    signal_scale: float = DEFAULT_SIGNAL_SCALE,
    persistence: float = 0.9,
) -> FactorPanel:
    """
    Monthly panel with a known nonlinear return function.

    Exposures follow a persistent AR(1) per asset and are standardized per
    date. Returns are a common market draw plus signal_scale times
    het_panel_signal(exposures) plus per-asset Gaussian noise whose
    volatility follows noise_profile.
    """
    for name, value in (("T", T), ("N", N), ("K", K)):
        if value is None or int(value) < 1:
            raise ValidationError(f"{name} must be positive, got {value}")
    rng = np.random.default_rng(seed)
    scales = noise_scales(noise_profile, N)

    raw = np.empty((T, N, K))
    raw[0] = rng.standard_normal((N, K))
    innovation = np.sqrt(1.0 - persistence ** 2)
    for t in range(1, T):
        raw[t] = persistence * raw[t - 1] + innovation * rng.standard_normal((N, K))

    mean = raw.mean(axis=1, keepdims=True)
    std = raw.std(axis=1, keepdims=True)
    exposures = (raw - mean) / std

    market = rng.normal(0.005, 0.04, size=(T, 1))
    noise = rng.standard_normal((T, N)) * scales
    returns = market + signal_scale * het_panel_signal(exposures, interaction) + noise

    dates = pd.date_range(DEFAULT_PANEL_START, periods=T, freq="MS").strftime("%Y-%m-%d").tolist()
    assets = [f"A{i + 1:04d}" for i in range(N)]
    factor_names = [f"f{k + 1}" for k in range(K)]
    return FactorPanel(dates, assets, returns, exposures, factor_names)


def generate(spec: GeneratorSpec) -> Dataset | FactorPanel:
    """Dispatch a GeneratorSpec to its generator."""
    if spec.kind == "linear2":
        beta = spec.true_params or (1.0, 1.0)
        sigma = 1.0 if spec.noise_sigma is None else spec.noise_sigma
        return gen_linear2(spec.n_samples, spec.seed, noise_sigma=sigma, beta=beta)
    if spec.kind == "step10":
        half = DEFAULT_STEP_NOISE_HALF_WIDTH if spec.noise_sigma is None else spec.noise_sigma
        return gen_step10(spec.n_samples, spec.seed, noise_half_width=half)
    if spec.kind == "friedman":
        sigma = 1.0 if spec.noise_sigma is None else spec.noise_sigma
        return gen_friedman(spec.n_samples, sigma, spec.seed)
    if spec.kind == "additive":
        sigma = 0.1 if spec.noise_sigma is None else spec.noise_sigma
        return gen_additive(spec.n_samples, spec.seed, noise_sigma=sigma)
    return gen_het_panel(
        spec.T, spec.N, spec.K,
        noise_profile=spec.noise_profile,
        seed=spec.seed,
        interaction=spec.interaction,
    )


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def standardize(panel: FactorPanel, ddof: int = 0) -> FactorPanel:
    """
    Cross-sectional z-scores per date and factor.

    A factor with zero variance on a date becomes all zeros for that date
    and a DegenerateFactorWarning is issued.
    """
    E = panel.exposures
    mean = E.mean(axis=1, keepdims=True)
    std = E.std(axis=1, ddof=ddof, keepdims=True) if panel.N > ddof else np.zeros_like(mean)
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))

    safe_std = np.where(degenerate, 1.0, std)
    Z = np.where(degenerate, 0.0, (E - mean) / safe_std)

    if degenerate.any():
        where = np.argwhere(degenerate[:, 0, :])
        pairs = ", ".join(f"{panel.dates[t]}/{panel.factor_names[k]}" for t, k in where[:5])
        more = f" and {len(where) - 5} more" if len(where) > 5 else ""
        message = f"zero cross-sectional variance, set to 0: {pairs}{more}"
        logger.warning(message)
        warnings.warn(message, DegenerateFactorWarning, stacklevel=2)

    return FactorPanel(
        dates=list(panel.dates),
        assets=list(panel.assets),
        returns=panel.returns.copy(),
        exposures=Z,
        factor_names=list(panel.factor_names),
        dropped_assets=list(panel.dropped_assets),
    )


# ---------------------------------------------------------------------------
# CSV ingestion and export
# ---------------------------------------------------------------------------


def _parse_float(value: str, line: int, column: str) -> float:
    if value == "":
        return np.nan
    try:
        number = float(value)
    except ValueError:
        raise PanelFormatError(f"column '{column}': not a number: {value!r}", line=line) from None
    if not np.isfinite(number):
        raise PanelFormatError(f"column '{column}': non-finite value {value!r}", line=line)
    return number


def read_csv_checked(path: Path, **kwargs) -> pd.DataFrame:
    """
    pd.read_csv on a UTF-8 file, with decode and parse failures raised as
    PanelFormatError carrying the offending line.
    """
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        line = raw[:e.start].count(b"\n") + 1
        raise PanelFormatError(f"invalid UTF-8 at byte {e.start}", line=line) from None
    try:
        return pd.read_csv(io.StringIO(text), **kwargs)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise PanelFormatError(str(e).strip(), line=int(match.group(1)) if match else None) from None
    except pd.errors.EmptyDataError:
        raise PanelFormatError("file is empty", line=1) from None


def _read_panel_frame(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise ValidationError(f"Panel file not found: {path}")
    frame = read_csv_checked(path, dtype=str, keep_default_na=False)
    # Empty fields read as ""; only rows with too few fields produce NaN here.
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        i = int(np.argmax(short))
        n_fields = int(frame.iloc[i].notna().sum())
        raise PanelFormatError(
            f"expected {frame.shape[1]} fields, saw {n_fields}", line=i + 2
        )
    return frame


def load_panel_csv(path: str | Path, min_coverage: float = DEFAULT_MIN_COVERAGE) -> FactorPanel:
    """
    Load a factor panel.

    Assets whose non-missing fraction (over all dates and all of ret and the
    factors) is below min_coverage are dropped and listed in
    ``dropped_assets``. Remaining gaps are forward-filled per asset, then
    filled with the cross-sectional median of the date.

    Raises:
        PanelFormatError: malformed rows, bad dates or duplicate (date, asset)
        ValidationError: missing file or no asset meeting min_coverage
    """
    path = Path(path)
    if not 0.0 <= min_coverage <= 1.0:
        raise ValidationError(f"min_coverage must be in [0, 1], got {min_coverage}")
    frame = _read_panel_frame(path)

    columns = list(frame.columns)
    if tuple(columns[:3]) != PANEL_KEY_COLUMNS or len(columns) < 4:
        raise PanelFormatError(
            f"header must be date,asset,ret,<factor_1>,...; got {','.join(columns)}", line=1
        )
    factor_names = columns[3:]
    if frame.empty:
        raise ValidationError(f"Panel file has no rows: {path}")

    # Row i of the frame is line i + 2 of the file.
    parsed_dates = pd.to_datetime(frame["date"], format="%Y-%m-%d", errors="coerce")
    bad_dates = parsed_dates.isna().to_numpy()
    if bad_dates.any():
        i = int(np.argmax(bad_dates))
        raise PanelFormatError(f"invalid date {frame['date'].iloc[i]!r}", line=i + 2)
    frame["date"] = parsed_dates.dt.strftime("%Y-%m-%d")

    blank_assets = (frame["asset"].str.strip() == "").to_numpy()
    if blank_assets.any():
        raise PanelFormatError("empty asset identifier", line=int(np.argmax(blank_assets)) + 2)

    duplicated = frame.duplicated(["date", "asset"]).to_numpy()
    if duplicated.any():
        i = int(np.argmax(duplicated))
        raise PanelFormatError(
            f"duplicate row for date {frame['date'].iloc[i]} asset {frame['asset'].iloc[i]}",
            line=i + 2,
        )

    value_columns = ["ret", *factor_names]
    values = np.empty((len(frame), len(value_columns)))
    for c, column in enumerate(value_columns):
        raw = frame[column].tolist()
        values[:, c] = [_parse_float(v.strip(), i + 2, column) for i, v in enumerate(raw)]

    dates = sorted(frame["date"].unique())
    assets = list(pd.unique(frame["asset"]))
    date_idx = pd.Index(dates).get_indexer(frame["date"])
    asset_idx = pd.Index(assets).get_indexer(frame["asset"])

    grid = np.full((len(dates), len(assets), len(value_columns)), np.nan)
    grid[date_idx, asset_idx] = values

    coverage = np.isfinite(grid).sum(axis=(0, 2)) / (len(dates) * len(value_columns))
    keep = coverage >= min_coverage
    dropped = [a for a, k in zip(assets, keep) if not k]
    if dropped:
        logger.warning("Dropped %d assets below coverage %.2f: %s", len(dropped), min_coverage, ", ".join(dropped))
    if not keep.any():
        raise ValidationError(f"No asset in {path} meets min_coverage={min_coverage}")
    assets = [a for a, k in zip(assets, keep) if k]
    grid = grid[:, keep]

    filled = _fill_gaps(grid)
    return FactorPanel(
        dates=dates,
        assets=assets,
        returns=filled[:, :, 0],
        exposures=filled[:, :, 1:],
        factor_names=factor_names,
        dropped_assets=dropped,
    )


def _fill_gaps(grid: np.ndarray) -> np.ndarray:
    grid = grid.copy()
    missing = int(np.isnan(grid).sum())
    if not missing:
        return grid

    for t in range(1, grid.shape[0]):
        gaps = np.isnan(grid[t])
        grid[t][gaps] = grid[t - 1][gaps]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        medians = np.nanmedian(grid, axis=1, keepdims=True)
    grid = np.where(np.isnan(grid), medians, grid)

    leftover = int(np.isnan(grid).sum())
    if leftover:
        logger.warning("%d entries missing for a whole cross-section; set to 0", leftover)
        grid = np.nan_to_num(grid, nan=0.0)
    logger.info("Filled %d missing panel entries", missing)
    return grid


def save_panel_csv(panel: FactorPanel, path: str | Path) -> Path:
    """Write a panel in the CSV schema read by load_panel_csv."""
    return write_csv(panel.to_frame(), path)


def save_dataset_csv(dataset: Dataset, path: str | Path) -> Path:
    return write_csv(dataset.to_frame(), path)


def load_dataset_csv(path: str | Path, target: str = "y") -> Dataset:
    """Read a dataset with feature columns and one target column."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Dataset file not found: {path}")
    frame = read_csv_checked(path, float_precision="round_trip")
    if target not in frame.columns:
        raise ValidationError(f"Dataset {path} has no target column '{target}'")
    features = [c for c in frame.columns if c != target]
    X = frame[features].to_numpy(dtype=float)
    y = frame[target].to_numpy(dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError(f"Dataset {path} contains missing or non-finite values")
    return Dataset(X, y, features)

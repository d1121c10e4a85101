"""
Deep factor model CLI - generate data, fit, interpret, backtest and bound.

Usage:
    python src/cli.py gen --kind friedman --n 500 --sigma 1 --seed 7 --out runs/friedman
    python src/cli.py gen --kind het_panel --T 120 --N 218 --K 6 --out runs/panel
    python src/cli.py train --data runs/friedman/dataset.csv --arch 8 --l2 0.01 --out runs/fit
    python src/cli.py train --panel runs/panel/panel.csv --arch 50,10 --gls --out runs/gls
    python src/cli.py tune --data runs/friedman/dataset.csv --arch-grid "2;8;50,10" --l2-grid 0,0.01
    python src/cli.py interpret --model runs/fit/model.net --data d.csv --method jacobian
    python src/cli.py backtest --panel p.csv --window 24 --arch 50,10 --l1 0.1 --sizes 25,50,100
    python src/cli.py bounds --sweep --mu 0.5,1,2,4 --delta-max 5

    # Replay a run; flags given here override the file
    python src/cli.py train --config runs/fit/manifest.json --out runs/fit-replay

Exit codes: 0 success, 1 numerical failure, 2 invalid input.
Logs and the run summary go to stderr; results go to files in --out.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from scipy import stats

from backtest import BacktestConfig, BacktestMode, DEFAULT_BACKTEST_TRAIN, LINEAR_SOLVERS, run_backtest
from bounds import (
    bound_sweep,
    delta_grid,
    relu_jacobian_mean,
    relu_jacobian_variance_mc,
    spec_from_network,
    variance_bernoulli,
    variance_partition,
    variance_unsquared,
)
from config import load_config_file
from data import (
    DEFAULT_MIN_COVERAGE,
    GENERATOR_KINDS,
    NOISE_PROFILES,
    FactorPanel,
    GeneratorSpec,
    generate,
    load_dataset_csv,
    load_panel_csv,
    read_csv_checked,
    save_dataset_csv,
    save_panel_csv,
    standardize,
)
from errors import NumericalError, ValidationError
from gls import fit_two_step, residuals_frame, variances_frame
from interpret import (
    IMPORTANCE_AGGREGATES,
    bootstrap_sensitivities,
    garson,
    olden,
    partial_dependence,
    rank_interactions,
    sensitivity_bounds,
    sensitivity_distribution,
    sensitivity_series,
)
from nn_core import (
    ACTIVATIONS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_INIT_RULE,
    DEFAULT_LEARNING_RATE,
    INIT_RULES,
    Architecture,
    TrainConfig,
    load_network,
    predict,
    to_text,
    train,
)
from output import OutputManager, RunManifest
from tuning import DEFAULT_FOLDS, tune

logger = logging.getLogger(__name__)

# Default configuration
DEFAULT_OUTPUT_DIR = "runs"
DEFAULT_LOG_LEVEL = "INFO"
INTERPRET_METHODS = ("jacobian", "hessian", "garson", "olden", "pdp", "all")
DISTRIBUTIONS = {
    "normal": lambda: stats.norm(),
    "uniform": lambda: stats.uniform(loc=-1.0, scale=2.0),
}
EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_VALIDATION = 2


def _parse_floats(text: str, name: str) -> list[float]:
    try:
        values = [float(part) for part in str(text).split(",") if part.strip()]
    except ValueError:
        raise ValidationError(f"--{name}: expected comma-separated numbers, got '{text}'") from None
    if not values:
        raise ValidationError(f"--{name}: empty list")
    return values


def _parse_ints(text: str, name: str) -> list[int]:
    try:
        values = [int(part) for part in str(text).split(",") if part.strip()]
    except ValueError:
        raise ValidationError(f"--{name}: expected comma-separated integers, got '{text}'") from None
    if not values:
        raise ValidationError(f"--{name}: empty list")
    return values


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        l1_lambda=args.l1,
        l2_lambda=args.l2,
        seed=args.seed,
        init_scale_rule=args.init,
        penalize_bias=args.penalize_bias,
    )


class CLI:
    """Command-line interface for deep factor models."""

    def __init__(self, output_dir: str | Path = DEFAULT_OUTPUT_DIR, threads: int = 1):
        self.output_dir = Path(output_dir)
        self.threads = threads
        self.output_manager = OutputManager(base_dir=output_dir)

    # -- inputs ---------------------------------------------------------------

    def _load_panel(self, args) -> FactorPanel:
        panel = load_panel_csv(args.panel, min_coverage=args.min_coverage)
        if panel.dropped_assets:
            print(f"Dropped {len(panel.dropped_assets)} assets below coverage {args.min_coverage}", file=sys.stderr)
        return panel if args.no_standardize else standardize(panel)

    def _load_samples(self, args) -> tuple[np.ndarray, np.ndarray, list[str], Optional[FactorPanel]]:
        if getattr(args, "panel", None):
            panel = self._load_panel(args)
            X, y = panel.stack()
            return X, y, list(panel.factor_names), panel
        if getattr(args, "data", None):
            dataset = load_dataset_csv(args.data)
            return dataset.X, dataset.y, dataset.feature_names, None
        raise ValidationError(f"{args.command} needs --data or --panel")

    def _load_benchmark(self, path: str, panel: FactorPanel) -> np.ndarray:
        if not Path(path).exists():
            raise ValidationError(f"Benchmark file not found: {path}")
        frame = read_csv_checked(Path(path), dtype={"date": str})
        if "date" not in frame.columns or frame.shape[1] < 2:
            raise ValidationError(f"Benchmark file {path} needs a date column and a return column")
        series = frame.set_index("date").iloc[:, 0]
        missing = [d for d in panel.dates if d not in series.index]
        if missing:
            raise ValidationError(f"Benchmark file {path} has no value for {missing[0]}")
        return series.loc[panel.dates].to_numpy(dtype=float)

    # -- commands -------------------------------------------------------------

    def cmd_gen(self, args, manifest: RunManifest) -> dict[str, Any]:
        """Generate a synthetic dataset or panel."""
        spec = GeneratorSpec(
            kind=args.kind,
            n_samples=args.n,
            T=args.T,
            N=args.N,
            K=args.K,
            noise_sigma=args.sigma,
            seed=args.seed,
            noise_profile=args.noise_profile,
            interaction=args.interaction,
        )
        result = generate(spec)
        if isinstance(result, FactorPanel):
            path = save_panel_csv(result, self.output_manager.path_for("panel.csv"))
            shape = f"T={result.T} N={result.N} K={result.K}"
        else:
            path = save_dataset_csv(result, self.output_manager.path_for("dataset.csv"))
            shape = f"n={result.n_samples} K={result.n_features}"
        manifest.add_output(path)
        return {"Kind": args.kind, "Shape": shape, "Seed": args.seed}

    def cmd_train(self, args, manifest: RunManifest) -> dict[str, Any]:
        """Fit a network, optionally by two-step GLS on a panel."""
        X, y, names, panel = self._load_samples(args)
        architecture = Architecture.parse(args.arch, X.shape[1], args.activation)
        config = _train_config(args)

        summary: dict[str, Any] = {"Architecture": architecture.describe()}
        if args.gls:
            if panel is None:
                raise ValidationError("--gls needs --panel")
            fit = fit_two_step(panel, architecture, config, warm_start=args.warm_start, centered=args.centered)
            params = fit.params
            trace = fit.loss_traces["refined"]
            self.output_manager.save_frame(residuals_frame(fit, panel), "residuals.csv", manifest)
            self.output_manager.save_frame(variances_frame(fit, panel), "variances.csv", manifest)
            summary["Weighted MSE (first pass)"] = f"{fit.weighted_mse_first_pass:.6g}"
            summary["Weighted MSE (refined)"] = f"{fit.weighted_mse_refined:.6g}"
            if fit.flagged:
                summary["Flagged"] = "refined fit did not improve the weighted MSE"
        else:
            result = train(X, y, architecture, config)
            params = result.params
            trace = result.loss_trace

        self.output_manager.save_text(to_text(params), "model.net", manifest)
        loss = pd.DataFrame({"epoch": np.arange(1, trace.size + 1), "loss": trace})
        self.output_manager.save_frame(loss, "loss.csv", manifest)

        summary["Parameters"] = params.n_parameters
        summary["Final loss"] = f"{trace[-1]:.6g}"
        summary["In-sample MSE"] = f"{np.mean((y - predict(params, X)) ** 2):.6g}"
        return summary

    def cmd_tune(self, args, manifest: RunManifest) -> dict[str, Any]:
        """Cross-validated grid search over hidden widths and penalties."""
        X, y, _, _ = self._load_samples(args)
        hidden_grid = [
            Architecture.parse(part, X.shape[1], args.activation).hidden
            for part in str(args.arch_grid).split(";")
        ]
        result = tune(
            X, y,
            hidden_grid=hidden_grid,
            l1_grid=_parse_floats(args.l1_grid, "l1-grid"),
            l2_grid=_parse_floats(args.l2_grid, "l2-grid"),
            config=_train_config(args),
            n_folds=args.folds,
            activation=args.activation,
        )
        self.output_manager.save_frame(result.table, "tune.csv", manifest)
        best = result.table[result.table["selected"]].iloc[0]
        return {
            "Candidates": len(result.table),
            "Selected": f"{best['hidden']} l1={best['l1']:g} l2={best['l2']:g}",
            "CV MSE": f"{best['cv_mse']:.6g}",
            "CV R2": f"{best['cv_r2']:.4f}",
        }

    def cmd_interpret(self, args, manifest: RunManifest) -> dict[str, Any]:
        """Sensitivities, interactions and importance baselines for a fitted network."""
        if not args.model:
            raise ValidationError("interpret needs --model")
        params = load_network(args.model)
        X, y, names, panel = self._load_samples(args)
        methods = INTERPRET_METHODS[:-1] if args.method == "all" else (args.method,)
        om = self.output_manager
        summary: dict[str, Any] = {"Model": params.describe(), "Points": X.shape[0]}

        if "jacobian" in methods:
            label = Path(args.panel or args.data).stem
            report = sensitivity_distribution(params, X, names, importance=args.importance, dataset=label)
            om.save_frame(report.to_frame(), "sensitivities.csv", manifest)
            box = sensitivity_bounds(params)
            om.save_frame(pd.DataFrame({
                "input": names,
                "lower": box.lower,
                "upper": box.upper,
                "composite": box.composite,
                "composite_lower": box.composite_lower,
                "composite_upper": box.composite_upper,
            }), "sensitivity_bounds.csv", manifest)
            if panel is not None:
                om.save_frame(sensitivity_series(params, panel), "sensitivity_series.csv", manifest)
            if args.bootstrap:
                hidden_act = params.activations[0] if params.n_hidden_layers else "tanh"
                architecture = Architecture(params.n_inputs, params.hidden_sizes, hidden_act)
                boot = bootstrap_sensitivities(X, y, architecture, _train_config(args), args.bootstrap, feature_names=names)
                om.save_frame(boot.to_frame(), "bootstrap_sensitivities.csv", manifest)
            summary["Ranking"] = " > ".join(report.ranked_names())

        if "hessian" in methods:
            interactions = rank_interactions(params, X, names)
            om.save_frame(interactions.to_frame(), "interactions.csv", manifest)
            if interactions.ranking:
                i, j = interactions.top_pair
                summary["Top interaction"] = f"({names[i]}, {names[j]})"

        for method, fn in (("garson", garson), ("olden", olden)):
            if method in methods:
                om.save_frame(fn(params, names).to_frame(), f"importance_{method}.csv", manifest)

        if "pdp" in methods:
            features = range(X.shape[1]) if args.feature is None else [args.feature]
            curves = []
            for j in features:
                grid = None
                if args.grid_points:
                    lo, hi = np.quantile(X[:, j], [0.01, 0.99])
                    grid = np.linspace(lo, hi, args.grid_points)
                curves.append(partial_dependence(params, X, j, grid, names).to_frame())
            om.save_frame(pd.concat(curves, ignore_index=True), "pdp.csv", manifest)

        return summary

    def cmd_backtest(self, args, manifest: RunManifest) -> dict[str, Any]:
        """Rolling-window GLS backtest with top-n portfolios."""
        if not args.panel:
            raise ValidationError("backtest needs --panel")
        panel = self._load_panel(args)
        benchmark = self._load_benchmark(args.benchmark, panel) if args.benchmark else None
        config = BacktestConfig(
            window=args.window,
            portfolio_sizes=tuple(_parse_ints(args.sizes, "sizes")),
            hidden=Architecture.parse(args.arch, panel.K, args.activation).hidden,
            activation=args.activation,
            train_config=_train_config(args),
            benchmark=benchmark,
            mode=args.mode,
            n_random_trials=args.trials,
            seed=args.seed,
            threads=self.threads,
            linear_solver=args.linear_solver,
            centered=args.centered,
        )
        result = run_backtest(panel, config)

        om = self.output_manager
        om.save_frame(result.predictions_frame(), "predictions.csv", manifest)
        om.save_frame(result.portfolio_frame(), "portfolios.csv", manifest)
        om.save_frame(result.summary_frame(), "summary.csv", manifest)
        om.save_frame(result.windows_frame(), "windows.csv", manifest)
        if config.mode is BacktestMode.RANDOM:
            rows = [
                {"trial": t, "n": n, "IR": value}
                for n, values in result.random_ir.items()
                for t, value in enumerate(values)
            ]
            om.save_frame(pd.DataFrame(rows), "random_ir.csv", manifest)
        else:
            om.save_frame(result.sensitivity_frame(), "sensitivities.csv", manifest)

        summary: dict[str, Any] = {
            "Mode": config.mode.value,
            "Windows": f"{len(result.successful)}/{len(result.windows)} fitted",
        }
        for n, ir in result.information_ratios.items():
            summary[f"IR (n={n})"] = "unbounded" if ir.unbounded else f"{ir.value:.4f}"
        return summary

    def cmd_bounds(self, args, manifest: RunManifest) -> dict[str, Any]:
        """Chernoff bound sweeps and ReLU Jacobian moment checks."""
        if not args.sweep and not args.model:
            raise ValidationError("bounds needs --sweep or --model")
        summary: dict[str, Any] = {}
        om = self.output_manager

        if args.sweep:
            table = bound_sweep(_parse_floats(args.mu, "mu"), delta_grid(args.delta_max, args.delta_points))
            om.save_frame(table, "bound_sweep.csv", manifest)
            summary["Sweep rows"] = len(table)

        if args.model:
            network = load_network(args.model)
            distribution = DISTRIBUTIONS[args.distribution]()
            mc = relu_jacobian_variance_mc(network, distribution, args.mc_samples, args.seed, args.input_index)
            rows = [("mc_mean", mc.mean), ("mc_variance", mc.variance), ("mc_samples", float(mc.n_samples))]
            if network.n_inputs == 1:
                spec = spec_from_network(network, distribution)
                rows += [
                    ("mean", relu_jacobian_mean(spec)),
                    ("variance_unsquared", variance_unsquared(spec)),
                    ("variance_bernoulli", variance_bernoulli(spec)),
                    ("variance_partition", variance_partition(spec)),
                ]
                edges = np.concatenate(([-np.inf], spec.thresholds, [np.inf]))
                om.save_frame(pd.DataFrame({
                    "left": edges[:-1],
                    "right": edges[1:],
                    "coefficient": spec.coefficients,
                    "probability": spec.probabilities,
                }), "relu_spec.csv", manifest)
            moments = pd.DataFrame(rows, columns=["quantity", "value"])
            om.save_frame(moments, "relu_moments.csv", manifest)
            summary["MC mean"] = f"{mc.mean:.6g}"
            summary["MC variance"] = f"{mc.variance:.6g}"
        return summary

    # -- reporting ------------------------------------------------------------

    def print_summary(self, command: str, summary: dict[str, Any], manifest: RunManifest):
        """Print the run summary to stderr."""
        out = sys.stderr
        print(file=out)
        print("=" * 60, file=out)
        print(f"{command.upper()} SUMMARY", file=out)
        print("=" * 60, file=out)
        for key, value in summary.items():
            print(f"{key}: {value}", file=out)
        print(file=out)
        print(f"Output: {self.output_dir}", file=out)
        for name in manifest.outputs:
            print(f"  {name}", file=out)
        print(file=out)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    parser.add_argument(
        "--out", "-o", type=str, default=DEFAULT_OUTPUT_DIR,
        help=f"Output directory (default: {DEFAULT_OUTPUT_DIR})",
    )
    parser.add_argument("--config", "-c", type=str, help="Flat JSON config or run manifest; flags override it")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads for independent fits (default: 1)")
    parser.add_argument(
        "--log-level", type=str.upper, default=DEFAULT_LOG_LEVEL,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help=f"Log level on stderr (default: {DEFAULT_LOG_LEVEL})",
    )


def _add_inputs(parser: argparse.ArgumentParser):
    parser.add_argument("--data", type=str, help="Dataset CSV with columns x1..xK,y")
    parser.add_argument("--panel", type=str, help="Panel CSV: date,asset,ret,<factors>")
    parser.add_argument(
        "--min-coverage", type=float, default=DEFAULT_MIN_COVERAGE,
        help=f"Drop panel assets with less non-missing data (default: {DEFAULT_MIN_COVERAGE})",
    )
    parser.add_argument("--no-standardize", action="store_true", help="Use panel exposures as given")


def _add_training(
    parser: argparse.ArgumentParser,
    arch: str = "10",
    epochs: int = DEFAULT_EPOCHS,
    batch_size: int = DEFAULT_BATCH_SIZE,
):
    parser.add_argument("--arch", type=str, default=arch, help=f"Hidden widths, e.g. 50,10 or linear (default: {arch})")
    parser.add_argument("--activation", type=str, default="tanh", choices=list(ACTIVATIONS))
    parser.add_argument("--lr", type=float, default=DEFAULT_LEARNING_RATE, help=f"SGD learning rate (default: {DEFAULT_LEARNING_RATE})")
    parser.add_argument("--epochs", type=int, default=epochs, help=f"Training epochs (default: {epochs})")
    parser.add_argument("--batch-size", type=int, default=batch_size, help=f"Minibatch size (default: {batch_size})")
    parser.add_argument("--l1", type=float, default=0.0, help="L1 penalty strength")
    parser.add_argument("--l2", type=float, default=0.0, help="L2 penalty strength")
    parser.add_argument("--init", type=str, default=DEFAULT_INIT_RULE, choices=list(INIT_RULES))
    parser.add_argument("--penalize-bias", action="store_true", help="Include biases in the penalty")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common)

    parser = argparse.ArgumentParser(
        description="Deep fundamental factor models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    sub = parser.add_subparsers(dest="command")
    commands: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("gen", parents=[common], help="Generate a synthetic dataset or panel")
    p.add_argument("--kind", type=str, default="linear2", choices=list(GENERATOR_KINDS))
    p.add_argument("--n", type=int, help="Sample count for dataset generators")
    p.add_argument("--sigma", type=float, help="Noise level (sd, or half-width for step10)")
    p.add_argument("--T", type=int, default=120, help="Panel dates (default: 120)")
    p.add_argument("--N", type=int, default=218, help="Panel assets (default: 218)")
    p.add_argument("--K", type=int, default=6, help="Panel factors (default: 6)")
    p.add_argument("--noise-profile", type=str, default="linear", choices=list(NOISE_PROFILES))
    p.add_argument("--interaction", type=float, default=1.0, help="Interaction strength in het_panel")
    commands["gen"] = p

    p = sub.add_parser("train", parents=[common], help="Fit a network")
    _add_inputs(p)
    _add_training(p)
    p.add_argument("--gls", action="store_true", help="Two-step GLS fit (panel input)")
    p.add_argument("--centered", action="store_true", help="Center residuals before estimating variances")
    p.add_argument("--warm-start", action="store_true", help="Start the GLS refit from the first-pass weights")
    commands["train"] = p

    p = sub.add_parser("tune", parents=[common], help="Cross-validated architecture and penalty search")
    _add_inputs(p)
    _add_training(p)
    p.add_argument("--arch-grid", type=str, default="2;10;50", help="Semicolon-separated architectures")
    p.add_argument("--l1-grid", type=str, default="0", help="Comma-separated L1 strengths")
    p.add_argument("--l2-grid", type=str, default="0", help="Comma-separated L2 strengths")
    p.add_argument("--folds", type=int, default=DEFAULT_FOLDS, help=f"Cross-validation folds (default: {DEFAULT_FOLDS})")
    commands["tune"] = p

    p = sub.add_parser("interpret", parents=[common], help="Interpret a fitted network")
    _add_inputs(p)
    _add_training(p)
    p.add_argument("--model", type=str, help="Network document written by train")
    p.add_argument("--method", type=str, default="jacobian", choices=list(INTERPRET_METHODS))
    p.add_argument("--importance", type=str, default="mean", choices=list(IMPORTANCE_AGGREGATES))
    p.add_argument("--feature", type=int, help="Feature index for pdp (default: all)")
    p.add_argument("--grid-points", type=int, default=0, help="PDP grid size (default: 50)")
    p.add_argument("--bootstrap", type=int, default=0, help="Refits for bootstrap sensitivities (default: off)")
    commands["interpret"] = p

    p = sub.add_parser("backtest", parents=[common], help="Rolling-window portfolio backtest")
    _add_inputs(p)
    _add_training(
        p, arch="50,10",
        epochs=DEFAULT_BACKTEST_TRAIN.epochs,
        batch_size=DEFAULT_BACKTEST_TRAIN.batch_size,
    )
    p.add_argument("--window", type=int, default=24, help="Fitting window in dates (default: 24)")
    p.add_argument("--sizes", type=str, default="25,50,100", help="Portfolio sizes (default: 25,50,100)")
    p.add_argument("--mode", type=str, default="model", choices=[m.value for m in BacktestMode])
    p.add_argument("--trials", type=int, default=100, help="Random-mode trials (default: 100)")
    p.add_argument("--linear-solver", type=str, default="sgd", choices=list(LINEAR_SOLVERS))
    p.add_argument("--benchmark", type=str, help="CSV with date and benchmark return (default: equal-weighted universe)")
    p.add_argument("--centered", action="store_true", help="Center residuals before estimating variances")
    commands["backtest"] = p

    p = sub.add_parser("bounds", parents=[common], help="Chernoff bounds and ReLU Jacobian moments")
    p.add_argument("--sweep", action="store_true", help="Tabulate the upper-tail bound over mu and delta")
    p.add_argument("--mu", type=str, default="0.5,1,2,4", help="Comma-separated mu values")
    p.add_argument("--delta-max", type=float, default=5.0, help="Largest delta (default: 5)")
    p.add_argument("--delta-points", type=int, default=50, help="Delta grid size (default: 50)")
    p.add_argument("--model", type=str, help="One-hidden-layer ReLU network document")
    p.add_argument("--distribution", type=str, default="normal", choices=list(DISTRIBUTIONS))
    p.add_argument("--mc-samples", type=int, default=100_000, help="Monte Carlo samples (default: 100000)")
    p.add_argument("--input-index", type=int, default=0, help="Input whose sensitivity is sampled")
    commands["bounds"] = p

    return parser, commands


def setup_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    logging.captureWarnings(True)


def _resolve_args(argv: Optional[list[str]]):
    """Parse flags, then re-parse with config-file values as defaults."""
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if args.command is None or not args.config:
        return parser, args

    file_command, params = load_config_file(args.config)
    if file_command and file_command != args.command:
        raise ValidationError(f"Config {args.config} is for '{file_command}', not '{args.command}'")
    subparser = commands[args.command]
    known = set(vars(subparser.parse_args([])))
    unknown = sorted(set(params) - known)
    if unknown:
        print(f"Ignoring unknown config keys: {', '.join(unknown)}", file=sys.stderr)
    subparser.set_defaults(**{k: v for k, v in params.items() if k in known})
    return parser, parser.parse_args(argv)


def main(argv: Optional[list[str]] = None) -> int:
    """CLI entry point; returns the process exit code."""
    try:
        parser, args = _resolve_args(argv)
    except ValidationError as e:
        print(f"[FAIL] {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_VALIDATION

    setup_logging(args.log_level)
    parameters = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    manifest = RunManifest(command=args.command, parameters=parameters)
    cli = CLI(output_dir=args.out, threads=args.threads)

    code = EXIT_OK
    try:
        summary = getattr(cli, f"cmd_{args.command}")(args, manifest)
    except ValidationError as e:
        logger.error("%s: %s", e.error_type, e)
        code, failure = EXIT_VALIDATION, f"{e.error_type}: {e}"
    except NumericalError as e:
        logger.error("%s: %s", e.error_type, e)
        code, failure = EXIT_NUMERICAL, f"{e.error_type}: {e}"
    except OSError as e:
        logger.error("Cannot write output: %s", e)
        return EXIT_VALIDATION

    if code != EXIT_OK:
        manifest.status = "error"
        manifest.error = failure
    try:
        cli.output_manager.save_manifest(manifest)
    except OSError as e:
        logger.error("Cannot write manifest: %s", e)
        return EXIT_VALIDATION
    if code == EXIT_OK:
        cli.print_summary(args.command, summary, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())

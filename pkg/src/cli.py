"""Command-line entry point: ``python -m src.cli <command> ...``."""

import dataclasses
import hashlib
import json
import sys
import time
from argparse import ArgumentParser
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from loguru import logger

from src import __version__
from src.cone import StabilityConvention, enumerate_stable
from src.cone_cache import cone_digest, load_cone, save_cone
from src.config import RunConfig, load_config
from src.data_processor import PanelSchema, load_panel, rank_period_combinations, write_panel_csv
from src.exceptions import ConfigError, DataError, EmptyPool, NumericalError, PrefStabError
from src.inference import BootstrapConfig, classify_households, run_stability_test
from src.models import BartenTechnology, HouseholdKind
from src.simulate import (
    DEFAULT_PRICES,
    PowerCurveConfig,
    ThetaSets,
    WorstCaseSpec,
    power_curve,
    synthetic_panel,
    worst_case_size,
)
from src.solver import SolverConfig, WeightMatrix
from src.subsample import (
    control_function_ranks,
    control_function_windows,
    filter_subsample,
    parse_condition,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

SUMMARY_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)
SIMULATION_BOOTSTRAP = 100


@dataclasses.dataclass
class RunManifest:
    command: str
    arguments: Dict
    version: str = __version__
    inputs: Dict[str, str] = dataclasses.field(default_factory=dict)
    outputs: List[str] = dataclasses.field(default_factory=list)
    config: Dict = dataclasses.field(default_factory=dict)
    cone: Dict = dataclasses.field(default_factory=dict)

    def add_input(self, path) -> None:
        path = Path(path)
        if path.exists():
            self.inputs[str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()

    def add_cone(self, cone) -> None:
        self.cone = {
            "T": cone.T,
            "convention": cone.convention.value,
            "cols": cone.cols,
            "sha256": cone_digest(cone),
        }

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, default=str))
        return path


def _add_panel_arguments(parser: ArgumentParser) -> None:
    parser.add_argument("households", type=Path, help="household expenditure CSV")
    parser.add_argument("prices", type=Path, help="period price CSV")
    parser.add_argument("--periods", nargs="+", help="period labels, in order")
    parser.add_argument("--goods", nargs="+", type=int, help="1-based good indices")
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--barten", nargs="+", help="per-good Barten scales, or 'identity'")


def _add_test_arguments(parser: ArgumentParser) -> None:
    parser.add_argument("--convention", choices=[c.value for c in StabilityConvention])
    parser.add_argument("--omega", help="'identity' or a CSV with a 'weight' column")
    parser.add_argument("--bootstrap", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--cone", type=Path, help="cone cache file (built and saved if missing)")
    parser.add_argument("--strict", action="store_true", help="fail on a mismatched cone cache or a failed simulation sample")
    parser.add_argument("--allow-nonconverged", action="store_true")


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--threads", type=int)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--verbose", action="store_true")

    parser = ArgumentParser(prog="prefstab", description="Preference stability testing")
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    classify = commands.add_parser("classify", parents=[common], help="classify every household's type")
    _add_panel_arguments(classify)

    build = commands.add_parser("build-cone", parents=[common], help="enumerate stable configurations")
    build.add_argument("--T", dest="T", type=int, default=3)
    build.add_argument("--convention", choices=[c.value for c in StabilityConvention])
    build.add_argument("--size-cap", type=int)
    build.add_argument(
        "--check-reference", action="store_true", help="fail unless the T=3 counts match the published ones"
    )

    test = commands.add_parser("test", parents=[common], help="run the bootstrap stability test")
    _add_panel_arguments(test)
    _add_test_arguments(test)
    test.add_argument("--drop-irrational", action="store_true", default=None)
    test.add_argument("--condition", help="e.g. college=1,age=2 or expenditure=0")
    test.add_argument("--control-function", action="store_true")
    test.add_argument("--grid", nargs="+", type=float, help="control-function grid points")
    test.add_argument("--bandwidth", type=float)

    simulate = commands.add_parser("simulate", parents=[common], help="power curves and worst-case size")
    _add_test_arguments(simulate)
    simulate.set_defaults(bootstrap=SIMULATION_BOOTSTRAP)
    simulate.add_argument("--grid", nargs="+", type=float, help="stability shares p")
    simulate.add_argument("--pool-sizes", nargs="+", type=int, default=[500, 1000, 2000])
    simulate.add_argument("--samples", type=int, default=100)
    simulate.add_argument("--levels", nargs="+", type=float, help="test levels alpha")
    simulate.add_argument("--worst-case", type=int, metavar="N_SIMILAR")
    simulate.add_argument(
        "--synthetic", nargs=2, metavar=("P", "N"), help="write a synthetic panel instead"
    )
    return parser


def setup_logging(verbose: bool, out_dir: Optional[Path] = None) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.add(out_dir / "run.log", level="DEBUG")


def resolve_config(args) -> RunConfig:
    overrides = {
        "periods": getattr(args, "periods", None),
        "goods": getattr(args, "goods", None),
        "epsilon": getattr(args, "epsilon", None),
        "barten": getattr(args, "barten", None),
        "convention": getattr(args, "convention", None),
        "omega": None if getattr(args, "omega", None) is None else str(args.omega),
        "bootstrap": getattr(args, "bootstrap", None),
        "alpha": getattr(args, "alpha", None),
        "seed": getattr(args, "seed", None),
        "tau": getattr(args, "tau", None),
        "drop_irrational": getattr(args, "drop_irrational", None),
        "bandwidth": getattr(args, "bandwidth", None),
        "threads": args.threads,
    }
    if args.command == "test":
        overrides["grid"] = args.grid
    return load_config(args.config, **overrides)


def _schema(config: RunConfig) -> PanelSchema:
    return PanelSchema(
        periods=config.periods,
        goods=config.goods,
        barten=BartenTechnology(config.barten) if config.barten else None,
    )


def _weights(config: RunConfig, rows: int) -> WeightMatrix:
    if config.omega == "identity":
        return WeightMatrix.identity()
    path = Path(config.omega)
    if not path.exists():
        raise ConfigError(f"omega must be 'identity' or a weights CSV, got {config.omega!r}")
    weights = pd.read_csv(path)["weight"].to_numpy(float)
    matrix = WeightMatrix.diagonal(weights)
    matrix.for_rows(rows)
    return matrix


def _bootstrap_config(config: RunConfig, weights: WeightMatrix, allow_nonconverged: bool) -> BootstrapConfig:
    return BootstrapConfig(
        bootstrap_reps=config.bootstrap,
        alpha=config.alpha,
        seed=config.seed,
        tau_override=config.tau,
        weights=weights,
        solver=SolverConfig(
            tol=config.solver_tol,
            max_iter=config.solver_max_iter,
            step=config.solver_step,
            sweep=config.solver_sweep,
        ),
        n_jobs=config.threads,
        allow_nonconverged=allow_nonconverged,
    )


def _cone(args, config: RunConfig, T: int, manifest: RunManifest):
    convention = StabilityConvention.parse(config.convention)
    path = args.cone
    if path is not None and path.exists():
        manifest.add_input(path)
        try:
            return load_cone(path, expected_T=T, expected_convention=convention)
        except DataError as e:
            if args.strict:
                raise
            logger.warning(f"Ignoring cone cache {path}: {e}; rebuilding")
    cone = enumerate_stable(T, convention, config.size_cap, config.threads)
    if path is not None:
        save_cone(cone, path)
        manifest.outputs.append(str(path))
    return cone


def cmd_classify(args, config: RunConfig, manifest: RunManifest) -> int:
    dataset = load_panel(args.households, args.prices, _schema(config))
    types = classify_households(dataset, config.epsilon)
    path = args.out / "types.csv"
    types.to_csv(path, index=False)
    manifest.outputs.append(str(path))
    ranking = rank_period_combinations(args.households, args.prices, dataset.periods)
    ranking_path = args.out / "period_ranking.csv"
    ranking.to_csv(ranking_path, index=False)
    manifest.outputs.append(str(ranking_path))
    best = ranking.iloc[0]
    logger.info(f"Best {dataset.periods}-period window: {best['periods']} (smallest pool {best['n_min']})")
    summary = types.groupby("kind")["rational"].agg(["count", "sum"])
    for kind, row in summary.iterrows():
        print(f"{kind}: {int(row['count'])} households, {int(row['sum'])} rational")
    return EXIT_OK


def cmd_build_cone(args, config: RunConfig, manifest: RunManifest) -> int:
    if args.T < 3:
        logger.error(f"Collective testing requires T >= 3, got T={args.T}")
        print(f"collective testing requires T >= 3 (got T={args.T})", file=sys.stderr)
        return EXIT_USAGE
    convention = StabilityConvention.parse(config.convention)
    size_cap = args.size_cap or config.size_cap
    cone = enumerate_stable(args.T, convention, size_cap, config.threads, args.check_reference)
    path = save_cone(cone, args.out / f"cone_T{args.T}_{convention.value}.bin")
    manifest.add_cone(cone)
    manifest.outputs.append(str(path))
    for key, value in cone.counts.as_dict().items():
        print(f"{key}: {value}")
    return EXIT_OK


def _control_function(args, config, dataset, cone, bootstrap) -> int:
    ranks = control_function_ranks(dataset, config.bandwidth)
    windows = control_function_windows(ranks, config.grid, config.window)
    records = []
    for v0, ids in windows.items():
        wanted = set(ids)
        subset = dataset.with_households([h for h in dataset.households if h.household_id in wanted])
        try:
            result = run_stability_test(subset, cone, bootstrap, config.epsilon, config.drop_irrational)
        except EmptyPool as e:
            logger.warning(f"Skipping grid point {v0}: {e}")
            continue
        row = result.table_row(" ".join(subset.period_labels))
        records.append({"v0": v0, **row, "j_observed": result.j_observed, "tau_n": result.tau})
    table = pd.DataFrame.from_records(records)
    path = args.out / "control_function.csv"
    table.to_csv(path, index=False)
    if table.empty:
        logger.error("No control-function window had households in every pool")
        raise EmptyPool("No control-function window had households in every pool")
    summary = {
        "quantiles": {str(q): float(np.quantile(table["p_value"], q)) for q in SUMMARY_QUANTILES},
        "share_rejecting": float((table["p_value"] < config.alpha).mean()),
        "windows": int(table.shape[0]),
    }
    (args.out / "control_function_summary.json").write_text(json.dumps(summary, indent=2))
    for q, value in summary["quantiles"].items():
        print(f"p-value q{q}: {value:.4f}")
    print(f"share rejecting at {config.alpha}: {summary['share_rejecting']:.3f}")
    return EXIT_OK


def cmd_test(args, config: RunConfig, manifest: RunManifest) -> int:
    manifest.add_input(args.households)
    manifest.add_input(args.prices)
    dataset = load_panel(args.households, args.prices, _schema(config))
    if args.condition:
        dataset = filter_subsample(dataset, parse_condition(args.condition))
    cone = _cone(args, config, dataset.periods, manifest)
    manifest.add_cone(cone)
    bootstrap = _bootstrap_config(config, _weights(config, cone.rows), args.allow_nonconverged)

    if args.control_function:
        return _control_function(args, config, dataset, cone, bootstrap)

    result = run_stability_test(dataset, cone, bootstrap, config.epsilon, config.drop_irrational)
    manifest.outputs.append(str(result.write_json(args.out / "result.json")))
    row = result.table_row(" ".join(dataset.period_labels))
    table = args.out / "table.csv"
    pd.DataFrame([row]).to_csv(table, index=False)
    manifest.outputs.append(str(table))
    print(f"J = {result.j_observed:.6g}  p-value = {result.p_value:.4f}  tau = {result.tau:.4e}")
    print(", ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_simulate(args, config: RunConfig, manifest: RunManifest) -> int:
    convention = StabilityConvention.parse(config.convention)
    theta = ThetaSets.build(3, convention, config.size_cap, config.threads)
    manifest.add_cone(theta.cone)

    if args.synthetic:
        share, size = float(args.synthetic[0]), int(args.synthetic[1])
        dataset = synthetic_panel(theta, share, size, seed=config.seed)
        households, prices = args.out / "households.csv", args.out / "prices.csv"
        write_panel_csv(dataset, DEFAULT_PRICES, households, prices)
        manifest.outputs += [str(households), str(prices)]
        print(f"synthetic panel: {dataset.counts()[HouseholdKind.COUPLE]} configurations, p={share}")
        return EXIT_OK

    bootstrap = _bootstrap_config(config, _weights(config, theta.cone.rows), args.allow_nonconverged)
    power = PowerCurveConfig(
        pool_sizes=tuple(args.pool_sizes),
        p_grid=tuple(args.grid) if args.grid else PowerCurveConfig().p_grid,
        alpha_grid=tuple(args.levels) if args.levels else PowerCurveConfig().alpha_grid,
        samples=args.samples,
        seed=config.seed,
        n_jobs=config.threads,
        strict=args.strict,
    )
    if args.worst_case:
        spec = WorstCaseSpec(n_similar=args.worst_case, tau=config.tau)
        table = worst_case_size(spec, power, theta, bootstrap)
        path = args.out / "worst_case_size.csv"
    else:
        table = power_curve(power, theta, bootstrap)
        path = args.out / "power_curve.csv"
    table.to_csv(path, index=False)
    manifest.outputs.append(str(path))
    print(table.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "classify": cmd_classify,
    "build-cone": cmd_build_cone,
    "test": cmd_test,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    setup_logging(args.verbose, args.out)
    started = time.perf_counter()
    manifest = RunManifest(command=args.command, arguments={k: str(v) for k, v in vars(args).items()})
    try:
        config = resolve_config(args)
        if args.config is not None:
            manifest.add_input(args.config)
        manifest.config = {k: v for k, v in dataclasses.asdict(config).items()}
        logger.info(f"Running {args.command} (version {__version__})")
        code = COMMANDS[args.command](args, config, manifest)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f"Numerical error: {e}")
        return EXIT_NUMERICAL
    except PrefStabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
    manifest.write(args.out)
    logger.info(f"{args.command} finished in {time.perf_counter() - started:.2f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())

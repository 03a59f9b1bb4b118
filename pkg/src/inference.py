"""Frequency estimation and the bootstrap test of preference stability."""

import dataclasses
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed, effective_n_jobs
from loguru import logger

from src.carp import is_carp_consistent
from src.config import DEFAULT_EPSILON
from src.cone import ConeMatrix
from src.exceptions import ConfigError, DimensionMismatch, EmptyPool, NotConverged
from src.models import POOL_ORDER, HouseholdKind, PanelDataset
from src.relations import (
    classify_collective,
    classify_individual,
    is_garp_rational,
    n_double_sums,
    n_pairs,
)
from src.solver import ConeProjector, SolverConfig, WeightMatrix, j_statistic


def block_sizes_for(T: int) -> Tuple[int, int, int]:
    """Row-block sizes (couples, single women, single men) for ``T`` periods."""
    singles = 1 << n_pairs(T)
    return (1 << (n_pairs(T) + n_double_sums(T)), singles, singles)


@dataclasses.dataclass(frozen=True, eq=False)
class FrequencyVector:
    """Stacked per-pool type frequencies, with the integer counts behind them.

    Blocks follow ``POOL_ORDER`` (couples, single women, single men) and each
    block sums to one. ``total_counts`` are the pool sizes before irrational
    households were dropped, ``rational_counts`` the rational share of them.
    """

    values: np.ndarray
    type_counts: np.ndarray
    block_sizes: Tuple[int, int, int]
    rational_counts: Tuple[int, int, int] = (0, 0, 0)
    total_counts: Tuple[int, int, int] = (0, 0, 0)

    @classmethod
    def from_counts(
        cls, type_counts, block_sizes, rational_counts=None, total_counts=None
    ) -> "FrequencyVector":
        type_counts = np.asarray(type_counts, dtype=np.int64)
        block_sizes = tuple(int(b) for b in block_sizes)
        if type_counts.shape != (sum(block_sizes),):
            raise DimensionMismatch(f"{type_counts.shape[0]} counts for blocks {block_sizes}")
        values = np.zeros(type_counts.shape[0])
        offsets = np.cumsum((0,) + block_sizes)
        for kind, lo, hi in zip(POOL_ORDER, offsets[:-1], offsets[1:]):
            total = type_counts[lo:hi].sum()
            if total == 0:
                logger.error(f"No {kind.value} households to estimate frequencies from")
                raise EmptyPool(f"No {kind.value} households to estimate frequencies from")
            values[lo:hi] = type_counts[lo:hi] / total
        pool_sizes = tuple(int(type_counts[lo:hi].sum()) for lo, hi in zip(offsets[:-1], offsets[1:]))
        return cls(
            values=values,
            type_counts=type_counts,
            block_sizes=block_sizes,
            rational_counts=tuple(rational_counts) if rational_counts is not None else pool_sizes,
            total_counts=tuple(total_counts) if total_counts is not None else pool_sizes,
        )

    @property
    def offsets(self) -> np.ndarray:
        return np.cumsum((0,) + self.block_sizes)

    @property
    def pool_sizes(self) -> Tuple[int, int, int]:
        offsets = self.offsets
        return tuple(int(self.type_counts[lo:hi].sum()) for lo, hi in zip(offsets[:-1], offsets[1:]))

    @property
    def n(self) -> int:
        return sum(self.pool_sizes)

    @property
    def n_min(self) -> int:
        return min(self.pool_sizes)

    def blocks(self) -> List[np.ndarray]:
        offsets = self.offsets
        return [self.values[lo:hi] for lo, hi in zip(offsets[:-1], offsets[1:])]


def classify_households(dataset: PanelDataset, epsilon: float = DEFAULT_EPSILON) -> pd.DataFrame:
    """One row per household: its type code, cone row and rationality."""
    n_couple, n_single, _ = block_sizes_for(dataset.periods)
    offsets = {
        HouseholdKind.COUPLE: 0,
        HouseholdKind.SINGLE_FEMALE: n_couple,
        HouseholdKind.SINGLE_MALE: n_couple + n_single,
    }
    records = []
    for household in dataset.households:
        if household.kind == HouseholdKind.COUPLE:
            xc = classify_collective(household, epsilon)
            code, rational = xc.index, is_carp_consistent(xc)
        else:
            xi = classify_individual(household, epsilon)
            code, rational = xi.code, is_garp_rational(xi)
        records.append(
            {
                "household_id": household.household_id,
                "kind": household.kind.value,
                "type_code": code,
                "row": offsets[household.kind] + code,
                "rational": rational,
            }
        )
    return pd.DataFrame.from_records(
        records, columns=["household_id", "kind", "type_code", "row", "rational"]
    )


def estimate_frequencies(
    dataset: PanelDataset, epsilon: float = DEFAULT_EPSILON, drop_irrational: bool = False
) -> FrequencyVector:
    block_sizes = block_sizes_for(dataset.periods)
    types = classify_households(dataset, epsilon)
    rational_counts = tuple(
        int(types.loc[types["kind"] == kind.value, "rational"].sum()) for kind in POOL_ORDER
    )
    total_counts = tuple(int((types["kind"] == kind.value).sum()) for kind in POOL_ORDER)
    logger.info(
        "Rational households per pool: "
        + ", ".join(f"{k.value}={c}" for k, c in zip(POOL_ORDER, rational_counts))
    )
    if drop_irrational:
        dropped = int((~types["rational"]).sum())
        if dropped:
            logger.warning(f"Dropping {dropped} households that fail rationality or consistency")
        types = types[types["rational"]]
    counts = np.bincount(types["row"].to_numpy(dtype=np.int64), minlength=sum(block_sizes))
    return FrequencyVector.from_counts(counts, block_sizes, rational_counts, total_counts)


@dataclasses.dataclass(frozen=True)
class BootstrapConfig:
    bootstrap_reps: int = 500
    alpha: float = 0.05
    seed: int = 0
    tau_override: Optional[float] = None
    weights: WeightMatrix = WeightMatrix.identity()
    solver: SolverConfig = SolverConfig()
    n_jobs: int = 1
    allow_nonconverged: bool = False

    def __post_init__(self):
        if self.bootstrap_reps < 1:
            raise ConfigError(f"bootstrap_reps must be at least 1, got {self.bootstrap_reps}")
        if not 0 < self.alpha < 0.5:
            raise ConfigError(f"alpha must lie in (0, 0.5), got {self.alpha}")


@dataclasses.dataclass(frozen=True, eq=False)
class StabilityTestResult:
    j_observed: float
    tau: float
    p_value: float
    bootstrap_stats: np.ndarray
    pool_sizes: Tuple[int, int, int]
    rational_counts: Tuple[int, int, int]
    total_counts: Tuple[int, int, int]
    alpha: float
    bootstrap_reps: int
    seed: int
    weights: str
    convention: str
    cone_cols: int
    converged_fraction: float
    kkt_residual: float
    iterations: int

    def critical_value(self, alpha: Optional[float] = None) -> float:
        alpha = self.alpha if alpha is None else alpha
        return float(np.quantile(self.bootstrap_stats, 1 - alpha, method="inverted_cdf"))

    def rejects(self, alpha: Optional[float] = None) -> bool:
        return self.j_observed > self.critical_value(alpha)

    def to_record(self) -> Dict:
        n_c, n_f, n_m = self.total_counts
        u_c, u_f, u_m = self.pool_sizes
        r_c, r_f, r_m = self.rational_counts
        return {
            "j_observed": self.j_observed,
            "tau_n": self.tau,
            "p_value": self.p_value,
            "critical_value": self.critical_value(),
            "rejects": self.rejects(),
            "B": self.bootstrap_reps,
            "alpha": self.alpha,
            "seed": self.seed,
            "omega": self.weights,
            "convention": self.convention,
            "cone_cols": self.cone_cols,
            "n_c": n_c,
            "n_m": n_m,
            "n_f": n_f,
            "rational_counts": {"n_c": r_c, "n_m": r_m, "n_f": r_f},
            "estimation_counts": {"n_c": u_c, "n_m": u_m, "n_f": u_f},
            "converged_fraction": self.converged_fraction,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
        }

    def table_row(self, years: str) -> Dict:
        """One line in the layout of a results table: pool totals, rational
        counts and the p-value."""
        n_c, n_f, n_m = self.total_counts
        r_c, r_f, r_m = self.rational_counts
        return {
            "years": years,
            "n_couples": n_c,
            "n_couples_rational": r_c,
            "n_singles": n_f + n_m,
            "n_singles_rational": r_f + r_m,
            "p_value": self.p_value,
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        record = self.to_record()
        record["bootstrap_stats"] = self.bootstrap_stats.tolist()
        path.write_text(json.dumps(record, indent=2))
        logger.info(f"Result written to {path}")
        return path


def tightening(cone_cols: int, n_min: int, tau_override: Optional[float] = None) -> float:
    """Lower bound on every configuration weight: ``sqrt(ln n / n) / cols``."""
    if tau_override is not None:
        if tau_override < 0 or tau_override * cone_cols >= 1:
            raise ConfigError(f"tau={tau_override} leaves no mass for {cone_cols} columns")
        return float(tau_override)
    if cone_cols < 1 or n_min < 2:
        raise ConfigError(f"Need at least one column and two households, got {cone_cols}, {n_min}")
    return math.sqrt(math.log(n_min) / n_min) / cone_cols


def bootstrap_p_value(j_observed: float, bootstrap_stats) -> float:
    stats = np.asarray(bootstrap_stats, dtype=float)
    return float(np.count_nonzero(stats >= j_observed)) / stats.shape[0]


def resample_frequencies(frequencies: FrequencyVector, rng: np.random.Generator) -> np.ndarray:
    """One bootstrap draw: a multinomial resample within each pool."""
    resampled = np.zeros_like(frequencies.values)
    offsets = frequencies.offsets
    for lo, hi, size in zip(offsets[:-1], offsets[1:], frequencies.pool_sizes):
        support = np.flatnonzero(frequencies.type_counts[lo:hi])
        probabilities = frequencies.type_counts[lo:hi][support] / size
        draws = rng.multinomial(size, probabilities)
        resampled[lo + support] = draws / size
    return resampled


def _replicates(projector, frequencies, gamma_hat, lower, warm_start, seeds, allow_nonconverged):
    n = frequencies.n
    results = []
    for seed in seeds:
        rng = np.random.Generator(np.random.Philox(seed))
        centred = resample_frequencies(frequencies, rng) - frequencies.values + gamma_hat
        projection = projector.project(centred, lower, warm_start=warm_start)
        if not projection.converged and not allow_nonconverged:
            raise NotConverged(
                f"Bootstrap projection did not converge (kkt {projection.kkt_residual:.2e})",
                projection=projection,
            )
        results.append((n * projection.objective, projection.converged))
    return results


def bootstrap_test(
    cone: ConeMatrix,
    frequencies: FrequencyVector,
    config: BootstrapConfig = BootstrapConfig(),
    projector: Optional[ConeProjector] = None,
) -> StabilityTestResult:
    if cone.block_sizes != frequencies.block_sizes:
        raise DimensionMismatch(
            f"Cone blocks {cone.block_sizes} do not match frequencies {frequencies.block_sizes}"
        )
    projector = projector or ConeProjector(cone, config.weights, config.solver)
    tau = tightening(cone.cols, frequencies.n_min, config.tau_override)
    lower = np.full(cone.cols, tau)
    n = frequencies.n

    logger.info(f"Projecting observed frequencies (n={n}, tau={tau:.4e}, {cone.cols} columns)")
    observed = projector.project(frequencies.values, lower)
    if not observed.converged and not config.allow_nonconverged:
        logger.error(f"Observed projection did not converge (kkt {observed.kkt_residual:.2e})")
        raise NotConverged("Observed projection did not converge", projection=observed)
    j_observed = j_statistic(n, observed)

    seeds = np.random.SeedSequence(config.seed).spawn(config.bootstrap_reps)
    n_chunks = 1 if config.n_jobs == 1 else effective_n_jobs(config.n_jobs) * 4
    chunk = -(-len(seeds) // n_chunks)
    logger.info(f"Running {config.bootstrap_reps} bootstrap replications")
    parts = Parallel(n_jobs=config.n_jobs)(
        delayed(_replicates)(
            projector,
            frequencies,
            observed.gamma,
            lower,
            observed.slack,
            seeds[i : i + chunk],
            config.allow_nonconverged,
        )
        for i in range(0, len(seeds), chunk)
    )
    replicates = [r for part in parts for r in part]
    stats = np.array([j for j, _ in replicates])
    converged = float(np.mean([ok for _, ok in replicates]))
    if converged < 1.0:
        logger.warning(f"Only {converged:.1%} of bootstrap projections converged")

    result = StabilityTestResult(
        j_observed=j_observed,
        tau=tau,
        p_value=bootstrap_p_value(j_observed, stats),
        bootstrap_stats=stats,
        pool_sizes=frequencies.pool_sizes,
        rational_counts=frequencies.rational_counts,
        total_counts=frequencies.total_counts,
        alpha=config.alpha,
        bootstrap_reps=config.bootstrap_reps,
        seed=config.seed,
        weights=config.weights.label,
        convention=cone.convention.value,
        cone_cols=cone.cols,
        converged_fraction=converged,
        kkt_residual=observed.kkt_residual,
        iterations=observed.iterations,
    )
    logger.info(f"J = {j_observed:.6g}, p-value = {result.p_value:.4f}")
    return result


def run_stability_test(
    dataset: PanelDataset,
    cone: ConeMatrix,
    config: BootstrapConfig = BootstrapConfig(),
    epsilon: float = DEFAULT_EPSILON,
    drop_irrational: bool = False,
    projector: Optional[ConeProjector] = None,
) -> StabilityTestResult:
    if dataset.periods != cone.T:
        raise DimensionMismatch(f"Panel has T={dataset.periods}, cone has T={cone.T}")
    dataset.require_pools()
    frequencies = estimate_frequencies(dataset, epsilon, drop_irrational)
    return bootstrap_test(cone, frequencies, config, projector)

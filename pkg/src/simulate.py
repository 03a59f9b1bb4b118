"""Monte-Carlo power curves, worst-case size and synthetic panels."""

import dataclasses
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger
from scipy.optimize import linprog

from src.budget import normalize
from src.cone import ConeMatrix, ConfigurationSplit, StabilityConvention, enumerate_configurations
from src.config import DEFAULT_SIZE_CAP
from src.exceptions import ConfigError, EmptyThetaSet, NoSimilarPairFound, NumericalError
from src.inference import BootstrapConfig, FrequencyVector, bootstrap_test, tightening
from src.models import ChoicePath, HouseholdKind, PanelDataset
from src.relations import CollectiveType, double_sum_order, pair_order
from src.solver import ConeProjector

# Three goods, each cheap in exactly one period.
DEFAULT_PRICES = np.array([[1.0, 4.0, 4.0], [4.0, 1.0, 4.0], [4.0, 4.0, 1.0]])


@dataclasses.dataclass(frozen=True, eq=False)
class ThetaSets:
    """Stable configurations (the cone columns) and the consistent but
    unstable ones, both as ``(couple_index, male_code, female_code)`` keys."""

    cone: ConeMatrix
    unstable: np.ndarray

    @classmethod
    def from_split(cls, split: ConfigurationSplit) -> "ThetaSets":
        return cls(cone=split.stable, unstable=np.asarray(split.unstable, dtype=np.int64).reshape(-1, 3))

    @classmethod
    def build(
        cls,
        T: int = 3,
        convention: StabilityConvention = StabilityConvention.FIXED_CLOSURE,
        size_cap: int = DEFAULT_SIZE_CAP,
        n_jobs: int = 1,
    ) -> "ThetaSets":
        return cls.from_split(enumerate_configurations(T, convention, size_cap, n_jobs))

    @property
    def stable(self) -> np.ndarray:
        return self.cone.keys()

    def unstable_keys(self) -> set:
        return {tuple(int(v) for v in row) for row in self.unstable}

    def restricted(self, stable_mask, unstable_mask) -> "ThetaSets":
        return ThetaSets(
            cone=self.cone.take(np.flatnonzero(stable_mask)),
            unstable=self.unstable[np.asarray(unstable_mask, dtype=bool)],
        )


@dataclasses.dataclass(frozen=True)
class PowerCurveConfig:
    pool_sizes: Tuple[int, ...] = (500, 1000, 2000)
    p_grid: Tuple[float, ...] = (0.75, 0.85, 0.9, 0.95, 0.975, 0.99, 1.0)
    alpha_grid: Tuple[float, ...] = (0.01, 0.05, 0.10)
    samples: int = 100
    seed: int = 0
    n_jobs: int = 1
    strict: bool = False

    def __post_init__(self):
        if self.samples < 1 or any(n < 2 for n in self.pool_sizes):
            raise ConfigError("Need at least one sample and pools of two or more households")
        if any(not 0 <= p <= 1 for p in self.p_grid):
            raise ConfigError(f"Stability shares must lie in [0, 1], got {self.p_grid}")
        if not self.alpha_grid or any(not 0 < a < 0.5 for a in self.alpha_grid):
            raise ConfigError(f"Levels must lie in (0, 0.5), got {self.alpha_grid}")


@dataclasses.dataclass(frozen=True)
class WorstCaseSpec:
    n_similar: int = 2
    tau: Optional[float] = None
    weights: Optional[Tuple[float, ...]] = None
    max_attempts: int = 50

    def __post_init__(self):
        if self.n_similar < 2:
            raise ConfigError(f"Need at least two similar columns, got {self.n_similar}")
        if self.weights is not None and len(self.weights) != self.n_similar:
            raise ConfigError(f"{len(self.weights)} weights for {self.n_similar} similar columns")


def _counts_from_keys(cone: ConeMatrix, keys: np.ndarray) -> np.ndarray:
    """Stacked per-row counts of the couples, women and men in ``keys``."""
    female_offset = cone.n_couple_rows
    male_offset = cone.n_couple_rows + cone.n_single_rows
    rows = np.concatenate([keys[:, 0], female_offset + keys[:, 2], male_offset + keys[:, 1]])
    return np.bincount(rows, minlength=cone.rows)


def sample_configurations(p: float, n_under: int, theta: ThetaSets, rng: np.random.Generator) -> np.ndarray:
    """``floor(n p)`` keys drawn uniformly from the stable set, the rest from
    the unstable set."""
    n_stable = math.floor(n_under * p)
    n_unstable = n_under - n_stable
    parts = []
    if n_stable:
        if theta.cone.cols == 0:
            raise EmptyThetaSet("No stable configurations to sample from")
        parts.append(theta.stable[rng.integers(0, theta.cone.cols, n_stable)])
    if n_unstable:
        if theta.unstable.shape[0] == 0:
            raise EmptyThetaSet("No unstable configurations to sample from")
        parts.append(theta.unstable[rng.integers(0, theta.unstable.shape[0], n_unstable)])
    return np.concatenate(parts) if parts else np.zeros((0, 3), dtype=np.int64)


def sample_population(p: float, n_under: int, theta: ThetaSets, rng: np.random.Generator) -> FrequencyVector:
    keys = sample_configurations(p, n_under, theta, rng)
    return FrequencyVector.from_counts(_counts_from_keys(theta.cone, keys), theta.cone.block_sizes)


def _child_seed(sequence: np.random.SeedSequence) -> int:
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _replication(
    theta, projector, bootstrap, draw, sequence, alpha_grid, strict
) -> Optional[Tuple[bool, ...]]:
    """Rejection at each level for one simulated sample; ``None`` when the
    projection failed and ``strict`` is off."""
    rng = np.random.Generator(np.random.Philox(sequence))
    frequencies = draw(rng)
    config = dataclasses.replace(bootstrap, seed=_child_seed(sequence), n_jobs=1)
    try:
        result = bootstrap_test(theta.cone, frequencies, config, projector)
    except NumericalError as e:
        if strict:
            raise
        logger.warning(f"Replication failed: {e}")
        return None
    return tuple(result.rejects(alpha) for alpha in alpha_grid)


def _rejection_counts(theta, projector, bootstrap, draw, sequences, config) -> Tuple[np.ndarray, int]:
    outcomes = Parallel(n_jobs=config.n_jobs)(
        delayed(_replication)(theta, projector, bootstrap, draw, sequence, config.alpha_grid, config.strict)
        for sequence in sequences
    )
    done = [o for o in outcomes if o is not None]
    counts = np.sum(np.array(done, dtype=int).reshape(-1, len(config.alpha_grid)), axis=0)
    return counts, len(outcomes) - len(done)


def _records(config: PowerCurveConfig, counts: np.ndarray, failed: int, **cell) -> List[Dict]:
    completed = config.samples - failed
    records = []
    for alpha, rejections in zip(config.alpha_grid, counts):
        rate = rejections / completed if completed else float("nan")
        records.append(
            {
                **cell,
                "alpha": alpha,
                "rejections": int(rejections),
                "S": completed,
                "failed": failed,
                "rate": rate,
                "mc_se": math.sqrt(rate * (1 - rate) / completed) if completed else float("nan"),
            }
        )
    return records


class _PopulationDraw:
    def __init__(self, p, n_under, theta):
        self.p, self.n_under, self.theta = p, n_under, theta

    def __call__(self, rng):
        return sample_population(self.p, self.n_under, self.theta, rng)


def power_curve(
    config: PowerCurveConfig,
    theta: ThetaSets,
    bootstrap: BootstrapConfig = BootstrapConfig(bootstrap_reps=100),
) -> pd.DataFrame:
    """Rejection frequency over pool sizes, stability shares and levels.

    Columns: n_under, p, alpha, rejections, S, failed, rate, mc_se.
    """
    projector = ConeProjector(theta.cone, bootstrap.weights, bootstrap.solver)
    cells = [(n, p) for n in config.pool_sizes for p in config.p_grid]
    roots = np.random.SeedSequence(config.seed).spawn(len(cells))
    records = []
    for (n_under, p), root in zip(cells, roots):
        logger.info(f"Power cell n={n_under}, p={p}: {config.samples} samples")
        draw = _PopulationDraw(p, n_under, theta)
        counts, failed = _rejection_counts(
            theta, projector, bootstrap, draw, root.spawn(config.samples), config
        )
        if failed:
            logger.warning(f"Cell n={n_under}, p={p}: {failed} of {config.samples} samples failed")
        records += _records(config, counts, failed, n_under=n_under, p=p)
    return pd.DataFrame.from_records(records)


def similar(theta_unstable: set, a: Sequence[int], b: Sequence[int]) -> bool:
    """Two configurations are similar when mixing their components can
    produce an unstable configuration."""
    for couple in {a[0], b[0]}:
        for male in {a[1], b[1]}:
            for female in {a[2], b[2]}:
                if (int(couple), int(male), int(female)) in theta_unstable:
                    return True
    return False


def find_similar_columns(theta: ThetaSets, n_similar: int, rng: np.random.Generator, max_attempts: int = 50) -> np.ndarray:
    """Greedy search for ``n_similar`` mutually similar cone columns."""
    if n_similar < 1:
        raise ConfigError("Need at least one column")
    unstable = theta.unstable_keys()
    keys = theta.stable
    order = rng.permutation(theta.cone.cols)
    for start in order[:max_attempts]:
        chosen = [int(start)]
        for candidate in order:
            if len(chosen) == n_similar:
                break
            if candidate in chosen:
                continue
            if all(similar(unstable, keys[candidate], keys[c]) for c in chosen):
                chosen.append(int(candidate))
        if len(chosen) == n_similar:
            logger.info(f"Found {n_similar} mutually similar columns: {sorted(chosen)}")
            return np.array(sorted(chosen))
    logger.error(f"No set of {n_similar} mutually similar columns in {max_attempts} attempts")
    raise NoSimilarPairFound(f"No set of {n_similar} mutually similar columns in {max_attempts} attempts")


def worst_case_weights(cone_cols: int, columns: np.ndarray, tau: float, weights=None) -> np.ndarray:
    """Configuration distribution at the edge of the tightened cone."""
    if tau * cone_cols >= 1:
        raise ConfigError(f"tau={tau} leaves no mass for {cone_cols} columns")
    mix = np.full(len(columns), 1 / len(columns)) if weights is None else np.asarray(weights, dtype=float)
    if mix.shape != (len(columns),) or np.any(mix < 0) or not np.isclose(mix.sum(), 1):
        raise ConfigError("Worst-case weights must be a probability vector over the similar columns")
    nu = np.full(cone_cols, tau)
    nu[columns] += (1 - cone_cols * tau) * mix
    return nu


class _WorstCaseDraw:
    def __init__(self, nu, n_under, theta):
        self.nu, self.n_under, self.theta = nu, n_under, theta

    def __call__(self, rng):
        picks = rng.choice(self.nu.shape[0], size=self.n_under, p=self.nu)
        keys = self.theta.stable[picks]
        return FrequencyVector.from_counts(_counts_from_keys(self.theta.cone, keys), self.theta.cone.block_sizes)


def worst_case_size(
    spec: WorstCaseSpec,
    config: PowerCurveConfig,
    theta: ThetaSets,
    bootstrap: BootstrapConfig = BootstrapConfig(bootstrap_reps=100),
) -> pd.DataFrame:
    """False-positive frequency when data come from the least favourable
    point of the null, tested with the same tightening used to build it.

    Columns: n_under, tau, n0, alpha, false_positives, S, failed, rate, mc_se.
    """
    root = np.random.SeedSequence(config.seed)
    search, *cells = root.spawn(1 + len(config.pool_sizes))
    columns = find_similar_columns(
        theta, spec.n_similar, np.random.Generator(np.random.Philox(search)), spec.max_attempts
    )
    records = []
    for n_under, cell in zip(config.pool_sizes, cells):
        tau = spec.tau if spec.tau is not None else tightening(theta.cone.cols, n_under)
        nu = worst_case_weights(theta.cone.cols, columns, tau, spec.weights)
        tightened = dataclasses.replace(bootstrap, tau_override=tau)
        projector = ConeProjector(theta.cone, tightened.weights, tightened.solver)
        logger.info(f"Worst-case size n={n_under}, tau={tau:.4e}: {config.samples} samples")
        counts, failed = _rejection_counts(
            theta, projector, tightened, _WorstCaseDraw(nu, n_under, theta),
            cell.spawn(config.samples), config,
        )
        records += _records(config, counts, failed, n_under=n_under, tau=tau, n0=spec.n_similar)
    table = pd.DataFrame.from_records(records)
    return table.rename(columns={"rejections": "false_positives"})


def _solve_bundles(prices, rows, senses, rng, margin, draws=3) -> Optional[np.ndarray]:
    """Non-negative bundles on each period's unit budget meeting the sign
    pattern ``rows . x <= 1 - margin`` (sense +1) or ``>= 1 + margin``
    (sense -1). Returns the average of a few random vertices."""
    T, L = prices.shape
    A_eq = np.zeros((T, T * L))
    for t in range(T):
        A_eq[t, t * L : (t + 1) * L] = prices[t]
    A_ub = np.array([sense * row for row, sense in zip(rows, senses)])
    b_ub = np.array([sense * (1 - sense * margin) for sense in senses])
    solutions = []
    for _ in range(draws):
        result = linprog(
            rng.uniform(-1, 1, T * L), A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.ones(T),
            bounds=(0, None), method="highs",
        )
        if result.status != 0:
            return None
        solutions.append(result.x)
    return np.mean(solutions, axis=0).reshape(T, L)


def _pair_row(prices, s, t):
    T, L = prices.shape
    row = np.zeros(T * L)
    row[t * L : (t + 1) * L] = prices[s]
    return row


def realize_individual(code: int, prices, rng, margin: float = 0.05) -> Optional[np.ndarray]:
    prices = np.asarray(prices, dtype=float)
    T = prices.shape[0]
    rows, senses = [], []
    for k, (s, t) in enumerate(pair_order(T)):
        rows.append(_pair_row(prices, s, t))
        senses.append(1 if code >> k & 1 else -1)
    return _solve_bundles(prices, rows, senses, rng, margin)


def realize_collective(index: int, prices, rng, margin: float = 0.05) -> Optional[np.ndarray]:
    prices = np.asarray(prices, dtype=float)
    T = prices.shape[0]
    couple = CollectiveType.from_index(T, index)
    rows, senses = [], []
    for k, (s, t) in enumerate(pair_order(T)):
        rows.append(_pair_row(prices, s, t))
        senses.append(1 if couple.pair_code >> k & 1 else -1)
    for k, (s, t1, t2) in enumerate(double_sum_order(T)):
        rows.append(_pair_row(prices, s, t1) + _pair_row(prices, s, t2))
        senses.append(1 if couple.sum_code >> k & 1 else -1)
    return _solve_bundles(prices, rows, senses, rng, margin)


def _path(household_id, kind, bundles, prices, scale, income) -> ChoicePath:
    quantities = bundles * scale
    return ChoicePath(
        household_id=household_id,
        kind=kind,
        observations=tuple(normalize(prices[t], quantities[t], period=t + 1) for t in range(prices.shape[0])),
        income=income,
        raw_expenditure=tuple(float(prices[t] @ quantities[t]) for t in range(prices.shape[0])),
    )


def synthetic_panel(
    theta: ThetaSets,
    p: float,
    n_under: int,
    seed: int = 0,
    prices=DEFAULT_PRICES,
    margin: float = 0.05,
) -> PanelDataset:
    """Continuous choice data whose classified types follow a known mixture.

    Only configurations whose three components can be realised as
    non-negative bundles at ``prices`` are drawn.
    """
    prices = np.asarray(prices, dtype=float)
    if prices.shape[0] != theta.cone.T:
        raise ConfigError(f"{prices.shape[0]} price periods for T={theta.cone.T}")
    rng = np.random.Generator(np.random.Philox(seed))
    singles = {code: realize_individual(code, prices, rng, margin) is not None for code in range(theta.cone.n_single_rows)}
    couples = {
        int(i): realize_collective(int(i), prices, rng, margin) is not None
        for i in np.unique(np.concatenate([theta.stable[:, 0], theta.unstable[:, 0]]))
    }

    def realizable(keys):
        return np.array([couples[int(c)] and singles[int(m)] and singles[int(f)] for c, m, f in keys], dtype=bool)

    usable = theta.restricted(realizable(theta.stable), realizable(theta.unstable))
    logger.info(f"Realizable configurations: {usable.cone.cols} stable, {usable.unstable.shape[0]} unstable")
    keys = sample_configurations(p, n_under, usable, rng)

    households = []
    for number, (couple, male, female) in enumerate(keys):
        income = float(rng.lognormal(3.0, 0.5))
        for kind, tag, bundles in (
            (HouseholdKind.COUPLE, "c", realize_collective(int(couple), prices, rng, margin)),
            (HouseholdKind.SINGLE_MALE, "m", realize_individual(int(male), prices, rng, margin)),
            (HouseholdKind.SINGLE_FEMALE, "f", realize_individual(int(female), prices, rng, margin)),
        ):
            scale = float(rng.lognormal(0.0, 0.3))
            households.append(_path(f"{tag}{number:05d}", kind, bundles, prices, scale, income * scale))
    households.sort(key=lambda h: h.household_id)
    return PanelDataset(
        households=tuple(households),
        periods=prices.shape[0],
        goods=prices.shape[1],
        period_labels=tuple(str(t + 1) for t in range(prices.shape[0])),
        good_labels=tuple(f"good_{g + 1}" for g in range(prices.shape[1])),
    )
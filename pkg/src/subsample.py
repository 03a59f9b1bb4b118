"""Demographic sub-samples and the expenditure control function."""

import dataclasses
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger

from src.exceptions import ConfigError, EmptyPool, MissingIncome
from src.models import ChoicePath, HouseholdKind, PanelDataset


@dataclasses.dataclass(frozen=True)
class Condition:
    """Assortative demographic condition.

    A single qualifies when their own attribute matches; a couple only when
    both spouses match. ``expenditure`` is the tercile (0, 1, 2) of mean
    expenditure per adult.
    """

    college: Optional[int] = None
    age_class: Optional[int] = None
    expenditure: Optional[int] = None

    def describe(self) -> str:
        parts = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self) if getattr(self, f.name) is not None]
        return ",".join(parts) or "all"


_CONDITION_KEYS = {"college": "college", "age": "age_class", "age_class": "age_class", "expenditure": "expenditure"}


def parse_condition(text: str) -> Condition:
    """Parse ``college=1,age=2`` style filters."""
    values = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        key, _, value = item.partition("=")
        field = _CONDITION_KEYS.get(key.strip())
        if field is None or not value.strip().isdigit():
            raise ConfigError(f"Cannot parse condition {item!r}")
        values[field] = int(value)
    condition = Condition(**values)
    if condition.college not in (None, 0, 1):
        raise ConfigError(f"college must be 0 or 1, got {condition.college}")
    for name in ("age_class", "expenditure"):
        if getattr(condition, name) not in (None, 0, 1, 2):
            raise ConfigError(f"{name} must be 0, 1 or 2, got {getattr(condition, name)}")
    return condition


def _attribute(household: ChoicePath, name: str, member: str):
    demographics = household.demographics
    if demographics is None:
        return None
    field = {"college": "college", "age_class": "age"}[name]
    value = getattr(demographics, f"{field}_{member}")
    return None if value is None else int(value)


def _members(household: ChoicePath):
    if household.kind == HouseholdKind.COUPLE:
        return ("m", "f")
    return ("m",) if household.kind == HouseholdKind.SINGLE_MALE else ("f",)


def expenditure_classes(dataset: PanelDataset) -> Dict[str, int]:
    """Tercile of mean expenditure per adult, pooled over all households."""
    ids = [h.household_id for h in dataset.households]
    per_adult = [h.mean_expenditure() / (2 if h.kind == HouseholdKind.COUPLE else 1) for h in dataset.households]
    classes = pd.qcut(pd.Series(per_adult, index=ids), 3, labels=False, duplicates="drop")
    return {household_id: int(c) for household_id, c in classes.items()}


def matches(household: ChoicePath, condition: Condition, classes: Optional[Dict[str, int]] = None) -> bool:
    for name in ("college", "age_class"):
        wanted = getattr(condition, name)
        if wanted is None:
            continue
        if any(_attribute(household, name, member) != wanted for member in _members(household)):
            return False
    if condition.expenditure is not None:
        return classes is not None and classes.get(household.household_id) == condition.expenditure
    return True


def filter_subsample(
    dataset: PanelDataset, predicate: Union[Condition, Callable[[ChoicePath], bool]]
) -> PanelDataset:
    if isinstance(predicate, Condition):
        condition = predicate
        classes = expenditure_classes(dataset) if condition.expenditure is not None else None
        predicate = lambda household: matches(household, condition, classes)  # noqa: E731
        label = condition.describe()
    else:
        label = getattr(predicate, "__name__", "predicate")
    kept = [h for h in dataset.households if predicate(h)]
    subset = dataset.with_households(kept)
    logger.info(f"Sub-sample {label}: {len(kept)} of {len(dataset.households)} households, {subset.counts()}")
    empty = [k.value for k, c in subset.counts().items() if c == 0]
    if empty:
        logger.error(f"Sub-sample {label} leaves empty pools: {empty}")
        raise EmptyPool(f"Sub-sample {label} leaves empty pools: {empty}")
    return subset


def silverman_bandwidth(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    spread = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    if spread == 0.0:
        return 1.0
    return 1.06 * spread * values.size ** (-1 / 5)


def kernel_ranks(expenditure: Sequence[float], income: Sequence[float], bandwidth: Optional[float] = None) -> np.ndarray:
    """Conditional rank of expenditure given income.

    ``v_i = sum_j K((y_i - y_j)/h) 1{w_j <= w_i} / sum_j K((y_i - y_j)/h)``
    with a Gaussian kernel ``K``.
    """
    w = np.asarray(expenditure, dtype=float)
    y = np.asarray(income, dtype=float)
    h = silverman_bandwidth(y) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ConfigError(f"Bandwidth must be positive, got {h}")
    kernel = np.exp(-0.5 * ((y[:, None] - y[None, :]) / h) ** 2)
    below = w[None, :] <= w[:, None]
    return (kernel * below).sum(axis=1) / kernel.sum(axis=1)


def control_function_ranks(dataset: PanelDataset, bandwidth: Optional[float] = None) -> pd.Series:
    """Rank of each household's mean expenditure conditional on its income,
    computed separately within each household kind."""
    missing = [h.household_id for h in dataset.households if h.income is None]
    if missing:
        logger.error(f"{len(missing)} households lack income, e.g. {missing[:3]}")
        raise MissingIncome(f"{len(missing)} households lack income, e.g. {missing[:3]}")
    ranks = {}
    for kind in HouseholdKind:
        pool = dataset.pool(kind)
        if not pool:
            continue
        values = kernel_ranks(
            [h.mean_expenditure() for h in pool], [h.income for h in pool], bandwidth
        )
        ranks.update({h.household_id: float(v) for h, v in zip(pool, values)})
    return pd.Series(ranks, name="rank").sort_index()


def control_function_windows(ranks: pd.Series, grid: Sequence[float], window: float) -> Dict[float, list]:
    """Household ids whose rank lies within ``window`` of each grid point."""
    return {
        float(v0): ranks.index[(ranks - v0).abs() <= window].tolist()
        for v0 in grid
    }

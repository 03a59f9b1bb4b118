import dataclasses
import enum
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger

from src.exceptions import DimensionMismatch, EmptyPool, NonPositiveScale

BUDGET_TOLERANCE = 1e-9


class HouseholdKind(str, enum.Enum):
    COUPLE = "couple"
    SINGLE_MALE = "single_m"
    SINGLE_FEMALE = "single_f"


# Row blocks of the cone matrix are stacked in this order.
POOL_ORDER = (HouseholdKind.COUPLE, HouseholdKind.SINGLE_FEMALE, HouseholdKind.SINGLE_MALE)


class AgeClass(enum.IntEnum):
    UNDER_40 = 0
    FROM_40_TO_60 = 1
    OVER_60 = 2

    @classmethod
    def from_age(cls, age: float) -> "AgeClass":
        if age < 40:
            return cls.UNDER_40
        if age <= 60:
            return cls.FROM_40_TO_60
        return cls.OVER_60


@dataclasses.dataclass(frozen=True)
class Demographics:
    college_m: Optional[int] = None
    college_f: Optional[int] = None
    age_m: Optional[AgeClass] = None
    age_f: Optional[AgeClass] = None


def _frozen_array(values) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True, eq=False)
class PricedChoice:
    """One observation: a price vector and the bundle chosen at those prices.

    Arrays are stored read-only. After normalisation ``prices @ quantities``
    equals 1 within ``BUDGET_TOLERANCE``.
    """

    period: int
    prices: np.ndarray
    quantities: np.ndarray

    def __post_init__(self):
        prices = _frozen_array(self.prices)
        quantities = _frozen_array(self.quantities)
        if prices.ndim != 1 or prices.shape != quantities.shape:
            logger.error(
                f"Prices {prices.shape} and quantities {quantities.shape} differ in shape"
            )
            raise DimensionMismatch(
                f"Prices {prices.shape} and quantities {quantities.shape} differ in shape"
            )
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "quantities", quantities)

    @property
    def goods(self) -> int:
        return self.prices.shape[0]

    def expenditure(self) -> float:
        return float(self.prices @ self.quantities)


@dataclasses.dataclass(frozen=True, eq=False)
class ChoicePath:
    household_id: str
    kind: HouseholdKind
    observations: Tuple[PricedChoice, ...]
    demographics: Optional[Demographics] = None
    income: Optional[float] = None
    raw_expenditure: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "raw_expenditure", tuple(self.raw_expenditure))
        if not self.observations:
            raise DimensionMismatch(f"Household {self.household_id} has no observations")
        goods = {choice.goods for choice in self.observations}
        if len(goods) != 1:
            logger.error(f"Household {self.household_id} mixes goods counts {goods}")
            raise DimensionMismatch(
                f"Household {self.household_id} mixes goods counts {goods}"
            )

    @property
    def periods(self) -> int:
        return len(self.observations)

    @property
    def goods(self) -> int:
        return self.observations[0].goods

    def prices_matrix(self) -> np.ndarray:
        return np.vstack([choice.prices for choice in self.observations])

    def quantities_matrix(self) -> np.ndarray:
        return np.vstack([choice.quantities for choice in self.observations])

    def cross_expenditures(self) -> np.ndarray:
        """``M[s, t] = p_s . x_t`` for every pair of observations."""
        return self.prices_matrix() @ self.quantities_matrix().T

    def mean_expenditure(self) -> float:
        if self.raw_expenditure:
            return float(np.mean(self.raw_expenditure))
        return float(np.mean([choice.expenditure() for choice in self.observations]))


@dataclasses.dataclass(frozen=True, eq=False)
class BartenTechnology:
    """Per-good scale factors for goods consumed jointly by a couple."""

    scales: np.ndarray

    def __post_init__(self):
        scales = _frozen_array(self.scales)
        if scales.ndim != 1 or scales.size == 0:
            raise DimensionMismatch("Barten scales must be a non-empty vector")
        if np.any(scales <= 0):
            logger.error(f"Barten scales must be positive, got {scales.tolist()}")
            raise NonPositiveScale(f"Barten scales must be positive, got {scales.tolist()}")
        if np.any(scales > 1) or np.any(scales <= 0.5):
            logger.warning(
                f"Barten scales {scales.tolist()} outside the usual (0.5, 1] range"
            )
        object.__setattr__(self, "scales", scales)

    @classmethod
    def identity(cls, goods: int) -> "BartenTechnology":
        return cls(np.ones(goods))

    def is_identity(self) -> bool:
        return bool(np.all(self.scales == 1.0))


@dataclasses.dataclass(frozen=True, eq=False)
class PanelDataset:
    households: Tuple[ChoicePath, ...]
    periods: int
    goods: int
    period_labels: Tuple[str, ...] = ()
    good_labels: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "households", tuple(self.households))
        for household in self.households:
            if household.periods != self.periods or household.goods != self.goods:
                logger.error(
                    f"Household {household.household_id} is {household.periods}x"
                    f"{household.goods}, panel is {self.periods}x{self.goods}"
                )
                raise DimensionMismatch(
                    f"Household {household.household_id} does not match panel dimensions"
                )

    def pool(self, kind: HouseholdKind) -> Tuple[ChoicePath, ...]:
        return tuple(h for h in self.households if h.kind == kind)

    def counts(self) -> Dict[HouseholdKind, int]:
        return {kind: len(self.pool(kind)) for kind in POOL_ORDER}

    def require_pools(self) -> None:
        empty = [kind.value for kind, count in self.counts().items() if count == 0]
        if empty:
            logger.error(f"Empty pools: {empty}")
            raise EmptyPool(f"Empty pools: {empty}")

    def with_households(self, households) -> "PanelDataset":
        return dataclasses.replace(self, households=tuple(households))

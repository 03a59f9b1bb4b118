"""Enumeration of preference-stable configurations and the cone matrix they span.

A configuration is a couple type together with the types of one single man
and one single woman. Each stable configuration becomes one 0/1 column with
exactly three ones: the couple's row, the woman's row and the man's row.
Rows are stacked as couple types, then single-woman types, then single-man
types, each block in ascending type index.
"""

import dataclasses
import enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed, effective_n_jobs
from loguru import logger
from scipy import sparse

from src.carp import find_hypothesized_relations, is_carp_consistent, satisfies_carp
from src.config import DEFAULT_SIZE_CAP
from src.exceptions import ConfigError, DimensionMismatch, ReferenceCountMismatch, SizeLimit
from src.relations import (
    CollectiveType,
    IndividualType,
    enumerate_collective_types,
    enumerate_individual_types,
    is_garp_rational,
    mask_from_code,
    transitive_closure,
)

# Counts published for the three-period, Hm/Hf-per-household reading.
REFERENCE_COUNTS = {
    3: {
        "consistent_collective_types": 116,
        "consistent_configurations": 475_136,
        "stable_configurations": 2996,
    }
}


class StabilityConvention(str, enum.Enum):
    """How a single's revealed preference constrains the hypothesised relation.

    ``FIXED_CLOSURE``: the member relation *is* the transitive closure of the
    matching single's revealed preference. ``AUGMENTABLE``: the member
    relation only has to contain the single's revealed preference.
    """

    FIXED_CLOSURE = "fixed_closure"
    AUGMENTABLE = "augmentable"

    @property
    def code(self) -> int:
        return list(StabilityConvention).index(self)

    @classmethod
    def from_code(cls, code: int) -> "StabilityConvention":
        return list(cls)[code]

    @classmethod
    def parse(cls, value) -> "StabilityConvention":
        try:
            return value if isinstance(value, cls) else cls(str(value))
        except ValueError as e:
            raise ConfigError(
                f"Unknown convention {value!r}; use one of {[c.value for c in cls]}"
            ) from e


DEFAULT_CONVENTION = StabilityConvention.FIXED_CLOSURE


@dataclasses.dataclass(frozen=True)
class ConfigurationType:
    couple: CollectiveType
    male: IndividualType
    female: IndividualType


def _stable_components(
    couple: CollectiveType, male_mask: int, female_mask: int, convention
) -> bool:
    T = couple.T
    if convention == StabilityConvention.FIXED_CLOSURE:
        return satisfies_carp(
            couple, transitive_closure(T, male_mask), transitive_closure(T, female_mask)
        )
    return find_hypothesized_relations(couple, male_mask, female_mask) is not None


def is_preference_stable(
    theta: ConfigurationType, convention: StabilityConvention = DEFAULT_CONVENTION
) -> bool:
    if not (theta.couple.T == theta.male.T == theta.female.T):
        raise DimensionMismatch("Configuration components have different T")
    if not is_garp_rational(theta.male) or not is_garp_rational(theta.female):
        return False
    if not is_carp_consistent(theta.couple):
        return False
    return _stable_components(theta.couple, theta.male.mask, theta.female.mask, convention)


@dataclasses.dataclass(frozen=True)
class ConeCounts:
    T: int
    individual_types: int
    rational_individual_types: int
    collective_types: int
    consistent_collective_types: int
    stable_configurations: int

    @property
    def configurations(self) -> int:
        return self.collective_types * self.individual_types**2

    @property
    def consistent_configurations(self) -> int:
        """Configurations whose couple type is CARP-consistent, singles unrestricted."""
        return self.consistent_collective_types * self.individual_types**2

    @property
    def scanned_configurations(self) -> int:
        """Configurations checked for stability: consistent couple, two rational singles."""
        return self.consistent_collective_types * self.rational_individual_types**2

    def as_dict(self) -> Dict[str, int]:
        record = dataclasses.asdict(self)
        record["configurations"] = self.configurations
        record["consistent_configurations"] = self.consistent_configurations
        record["scanned_configurations"] = self.scanned_configurations
        return record

    def check_reference(self, strict: bool = False) -> bool:
        """Compare with the published counts; ``strict`` turns a mismatch into an error."""
        reference = REFERENCE_COUNTS.get(self.T)
        if reference is None:
            return True
        mismatched = {
            key: (getattr(self, key), expected)
            for key, expected in reference.items()
            if getattr(self, key) != expected
        }
        if mismatched and strict:
            logger.error(f"Counts differ from published reference values: {mismatched}")
            raise ReferenceCountMismatch(f"Counts differ from published reference values: {mismatched}")
        if mismatched:
            logger.warning(f"Counts differ from published reference values: {mismatched}")
        return not mismatched


@dataclasses.dataclass(frozen=True, eq=False)
class ConeMatrix:
    """Columns of the cone as three parallel code arrays.

    ``couple_index`` holds ``CollectiveType.index``; ``male_code`` and
    ``female_code`` hold ``IndividualType.code``.
    """

    T: int
    convention: StabilityConvention
    couple_index: np.ndarray
    male_code: np.ndarray
    female_code: np.ndarray
    counts: ConeCounts

    def __post_init__(self):
        for name in ("couple_index", "male_code", "female_code"):
            array = np.asarray(getattr(self, name), dtype=np.int64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if not (self.couple_index.shape == self.male_code.shape == self.female_code.shape):
            raise DimensionMismatch("Cone column arrays differ in length")

    @property
    def n_couple_rows(self) -> int:
        return self.counts.collective_types

    @property
    def n_single_rows(self) -> int:
        return self.counts.individual_types

    @property
    def rows(self) -> int:
        return self.n_couple_rows + 2 * self.n_single_rows

    @property
    def cols(self) -> int:
        return int(self.couple_index.shape[0])

    @property
    def block_sizes(self) -> Tuple[int, int, int]:
        return (self.n_couple_rows, self.n_single_rows, self.n_single_rows)

    def row_indices(self) -> np.ndarray:
        """``(cols, 3)`` array of the rows holding each column's ones."""
        female_offset = self.n_couple_rows
        male_offset = self.n_couple_rows + self.n_single_rows
        return np.column_stack(
            [self.couple_index, female_offset + self.female_code, male_offset + self.male_code]
        )

    def to_sparse(self) -> sparse.csc_matrix:
        rows = self.row_indices().ravel()
        cols = np.repeat(np.arange(self.cols), 3)
        data = np.ones(rows.shape[0])
        return sparse.csc_matrix((data, (rows, cols)), shape=(self.rows, self.cols))

    def column(self, j: int) -> ConfigurationType:
        return ConfigurationType(
            couple=CollectiveType.from_index(self.T, int(self.couple_index[j])),
            male=IndividualType(self.T, int(self.male_code[j])),
            female=IndividualType(self.T, int(self.female_code[j])),
        )

    def keys(self) -> np.ndarray:
        return np.column_stack([self.couple_index, self.male_code, self.female_code])

    def take(self, columns: Sequence[int]) -> "ConeMatrix":
        """Cone restricted to (or reordered by) the given columns."""
        columns = np.asarray(columns, dtype=np.int64)
        return dataclasses.replace(
            self,
            couple_index=self.couple_index[columns],
            male_code=self.male_code[columns],
            female_code=self.female_code[columns],
            counts=dataclasses.replace(self.counts, stable_configurations=len(columns)),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class ConfigurationSplit:
    """Consistent configurations split into stable (the cone) and the rest."""

    stable: ConeMatrix
    unstable: np.ndarray


def _scan_couples(
    T: int, couple_indices: List[int], singles: List[int], convention
) -> Tuple[List[Tuple[int, int, int]], List[Tuple[int, int, int]]]:
    stable, unstable = [], []
    masks = {code: mask_from_code(T, code) for code in singles}
    for index in couple_indices:
        couple = CollectiveType.from_index(T, index)
        for male in singles:
            for female in singles:
                key = (index, male, female)
                if _stable_components(couple, masks[male], masks[female], convention):
                    stable.append(key)
                else:
                    unstable.append(key)
    return stable, unstable


def _chunks(items: List[int], n: int) -> List[List[int]]:
    size = max(1, -(-len(items) // n))
    return [items[i : i + size] for i in range(0, len(items), size)]


def enumerate_configurations(
    T: int = 3,
    convention: StabilityConvention = DEFAULT_CONVENTION,
    size_cap: int = DEFAULT_SIZE_CAP,
    n_jobs: int = 1,
    check_reference: bool = False,
) -> ConfigurationSplit:
    convention = StabilityConvention.parse(convention)
    individuals = enumerate_individual_types(T, size_cap)
    collectives = enumerate_collective_types(T, size_cap)

    logger.info(f"Classifying {len(individuals)} individual types for T={T}")
    rational = [xi.code for xi in individuals if is_garp_rational(xi)]
    logger.info(f"Checking consistency of {len(collectives)} collective types")
    consistent = [xc.index for xc in collectives if is_carp_consistent(xc)]

    work = len(consistent) * len(rational) ** 2
    if work > size_cap:
        logger.error(f"{work} candidate configurations exceed the cap {size_cap}")
        raise SizeLimit(f"{work} candidate configurations exceed the cap {size_cap}")
    logger.info(
        f"Scanning {work} consistent configurations "
        f"({len(consistent)} couples, {len(rational)} rational singles, {convention.value})"
    )

    n_chunks = effective_n_jobs(n_jobs) * 4 if n_jobs != 1 else 1
    results = Parallel(n_jobs=n_jobs)(
        delayed(_scan_couples)(T, chunk, rational, convention)
        for chunk in _chunks(consistent, n_chunks)
    )
    stable = sorted(key for part, _ in results for key in part)
    unstable = sorted(key for _, part in results for key in part)

    counts = ConeCounts(
        T=T,
        individual_types=len(individuals),
        rational_individual_types=len(rational),
        collective_types=len(collectives),
        consistent_collective_types=len(consistent),
        stable_configurations=len(stable),
    )
    logger.info(f"Cone built: {counts.as_dict()}")
    if convention == DEFAULT_CONVENTION:
        counts.check_reference(strict=check_reference)

    keys = np.array(stable, dtype=np.int64).reshape(-1, 3)
    cone = ConeMatrix(
        T=T,
        convention=convention,
        couple_index=keys[:, 0],
        male_code=keys[:, 1],
        female_code=keys[:, 2],
        counts=counts,
    )
    _check_columns(cone)
    return ConfigurationSplit(
        stable=cone, unstable=np.array(unstable, dtype=np.int64).reshape(-1, 3)
    )


def enumerate_stable(
    T: int = 3,
    convention: StabilityConvention = DEFAULT_CONVENTION,
    size_cap: int = DEFAULT_SIZE_CAP,
    n_jobs: int = 1,
    check_reference: bool = False,
) -> ConeMatrix:
    return enumerate_configurations(T, convention, size_cap, n_jobs, check_reference).stable


def _check_columns(cone: ConeMatrix) -> None:
    rows = cone.row_indices()
    couple_ok = rows[:, 0] < cone.n_couple_rows
    male_offset = cone.n_couple_rows + cone.n_single_rows
    female_ok = (rows[:, 1] >= cone.n_couple_rows) & (rows[:, 1] < male_offset)
    male_ok = (rows[:, 2] >= male_offset) & (rows[:, 2] < cone.rows)
    if not (couple_ok.all() and female_ok.all() and male_ok.all()):
        raise DimensionMismatch("Cone column has a one outside its block")
    if len(np.unique(cone.keys(), axis=0)) != cone.cols:
        raise DimensionMismatch("Duplicate cone columns")


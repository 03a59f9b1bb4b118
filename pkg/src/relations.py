"""Revealed-preference relations and the finite type spaces they induce.

A relation over ``T`` observations is stored as an integer bit mask where
bit ``s * T + t`` is set when observation ``s`` is revealed preferred to
``t``. Diagonal bits are never stored. Type codes instead number only the
off-diagonal pairs, in row-major order with the first pair as the least
significant bit; ``pair_order`` and ``double_sum_order`` fix that layout.
"""

import collections.abc
import dataclasses
import itertools
from functools import lru_cache
from typing import Iterator, Tuple, Union

import numpy as np
from loguru import logger

from src.config import DEFAULT_EPSILON, DEFAULT_SIZE_CAP
from src.exceptions import DimensionMismatch, SizeLimit
from src.models import ChoicePath, HouseholdKind

Pair = Tuple[int, int]
SumTriple = Tuple[int, int, int]


@lru_cache(maxsize=None)
def pair_order(T: int) -> Tuple[Pair, ...]:
    return tuple((s, t) for s in range(T) for t in range(T) if s != t)


@lru_cache(maxsize=None)
def double_sum_order(T: int) -> Tuple[SumTriple, ...]:
    """``(s, t1, t2)`` with ``t1 < t2``, both different from ``s``."""
    return tuple(
        (s, t1, t2)
        for s in range(T)
        for t1, t2 in itertools.combinations([t for t in range(T) if t != s], 2)
    )


def n_pairs(T: int) -> int:
    return T * (T - 1)


def n_double_sums(T: int) -> int:
    return T * (T - 1) * (T - 2) // 2


def bit(T: int, s: int, t: int) -> int:
    return 1 << (s * T + t)


@lru_cache(maxsize=1 << 16)
def mask_from_code(T: int, code: int) -> int:
    mask = 0
    for k, (s, t) in enumerate(pair_order(T)):
        if code >> k & 1:
            mask |= bit(T, s, t)
    return mask


def code_from_mask(T: int, mask: int) -> int:
    code = 0
    for k, (s, t) in enumerate(pair_order(T)):
        if mask & bit(T, s, t):
            code |= 1 << k
    return code


@lru_cache(maxsize=1 << 16)
def transitive_closure(T: int, mask: int) -> int:
    """Off-diagonal transitive closure (Warshall on row masks)."""
    full = (1 << T) - 1
    rows = [(mask >> (s * T)) & full for s in range(T)]
    for k in range(T):
        reach = 1 << k
        for i in range(T):
            if rows[i] & reach:
                rows[i] |= rows[k]
    closed = 0
    for s, row in enumerate(rows):
        closed |= (row & ~(1 << s) & full) << (s * T)
    return closed


@lru_cache(maxsize=None)
def transpose(T: int, mask: int) -> int:
    flipped = 0
    for s, t in pair_order(T):
        if mask & bit(T, s, t):
            flipped |= bit(T, t, s)
    return flipped


def edges(T: int, mask: int) -> Tuple[Pair, ...]:
    return tuple((s, t) for s, t in pair_order(T) if mask & bit(T, s, t))


@dataclasses.dataclass(frozen=True)
class RelationBits:
    T: int
    mask: int

    @classmethod
    def from_matrix(cls, matrix) -> "RelationBits":
        matrix = np.asarray(matrix, dtype=bool)
        T = matrix.shape[0]
        if matrix.shape != (T, T):
            raise DimensionMismatch(f"Relation matrix must be square, got {matrix.shape}")
        mask = 0
        for s, t in pair_order(T):
            if matrix[s, t]:
                mask |= bit(T, s, t)
        return cls(T, mask)

    @classmethod
    def from_edges(cls, T: int, pairs) -> "RelationBits":
        mask = 0
        for s, t in pairs:
            if s != t:
                mask |= bit(T, s, t)
        return cls(T, mask)

    def to_matrix(self) -> np.ndarray:
        """Boolean matrix with the (always true) diagonal filled in."""
        matrix = np.eye(self.T, dtype=bool)
        for s, t in self.edges():
            matrix[s, t] = True
        return matrix

    def has(self, s: int, t: int) -> bool:
        return s == t or bool(self.mask & bit(self.T, s, t))

    def edges(self) -> Tuple[Pair, ...]:
        return edges(self.T, self.mask)

    def closure(self) -> "RelationBits":
        return RelationBits(self.T, transitive_closure(self.T, self.mask))

    @property
    def code(self) -> int:
        return code_from_mask(self.T, self.mask)


@dataclasses.dataclass(frozen=True)
class IndividualType:
    T: int
    code: int

    @property
    def relation(self) -> RelationBits:
        return RelationBits(self.T, mask_from_code(self.T, self.code))

    @property
    def mask(self) -> int:
        return mask_from_code(self.T, self.code)


@dataclasses.dataclass(frozen=True)
class CollectiveType:
    T: int
    pair_code: int
    sum_code: int

    @classmethod
    def from_index(cls, T: int, index: int) -> "CollectiveType":
        return cls(T, index & ((1 << n_pairs(T)) - 1), index >> n_pairs(T))

    @property
    def index(self) -> int:
        """Row position among collective types: sum bits above pair bits."""
        return (self.sum_code << n_pairs(self.T)) | self.pair_code

    @property
    def relation(self) -> RelationBits:
        return RelationBits(self.T, mask_from_code(self.T, self.pair_code))

    @property
    def mask(self) -> int:
        return mask_from_code(self.T, self.pair_code)

    @property
    def sum_bits(self) -> Tuple[int, ...]:
        return tuple(self.sum_code >> k & 1 for k in range(n_double_sums(self.T)))

    def active_sums(self) -> Tuple[SumTriple, ...]:
        return tuple(
            triple
            for k, triple in enumerate(double_sum_order(self.T))
            if self.sum_code >> k & 1
        )


AnyType = Union[IndividualType, CollectiveType]


def _revealed_bits(matrix: np.ndarray, epsilon: float) -> int:
    T = matrix.shape[0]
    code = 0
    for k, (s, t) in enumerate(pair_order(T)):
        if matrix[s, t] <= 1.0 + epsilon:
            code |= 1 << k
    return code


def classify_individual(path: ChoicePath, epsilon: float = DEFAULT_EPSILON) -> IndividualType:
    T = path.periods
    if T < 2:
        raise DimensionMismatch(f"Need at least two observations, got {T}")
    return IndividualType(T, _revealed_bits(path.cross_expenditures(), epsilon))


def classify_collective(path: ChoicePath, epsilon: float = DEFAULT_EPSILON) -> CollectiveType:
    T = path.periods
    if T < 3:
        logger.error(f"Collective classification needs T >= 3, got {T}")
        raise DimensionMismatch(f"Collective classification needs T >= 3, got {T}")
    cross = path.cross_expenditures()
    sum_code = 0
    for k, (s, t1, t2) in enumerate(double_sum_order(T)):
        if cross[s, t1] + cross[s, t2] <= 1.0 + epsilon:
            sum_code |= 1 << k
    return CollectiveType(T, _revealed_bits(cross, epsilon), sum_code)


def classify_path(path: ChoicePath, epsilon: float = DEFAULT_EPSILON) -> AnyType:
    if path.kind == HouseholdKind.COUPLE:
        return classify_collective(path, epsilon)
    return classify_individual(path, epsilon)


def is_garp_rational(xi: IndividualType) -> bool:
    """No ``s`` indirectly revealed preferred to ``t`` while ``t`` is
    directly and strictly revealed preferred to ``s``."""
    mask = xi.mask
    closure = transitive_closure(xi.T, mask)
    return not closure & transpose(xi.T, mask)


class TypeSpace(collections.abc.Sequence):
    """Lazy, index-ordered sequence over all types of one family."""

    def __init__(self, T: int, collective: bool):
        self.T = T
        self.collective = collective
        bits = n_pairs(T) + (n_double_sums(T) if collective else 0)
        self._size = 1 << bits

    def __len__(self) -> int:
        return self._size

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self._size))]
        if index < 0:
            index += self._size
        if not 0 <= index < self._size:
            raise IndexError(index)
        if self.collective:
            return CollectiveType.from_index(self.T, index)
        return IndividualType(self.T, index)

    def __iter__(self) -> Iterator[AnyType]:
        for index in range(self._size):
            yield self[index]


def _guard(T: int, size: int, size_cap: int, what: str) -> None:
    if T >= 4:
        logger.warning(f"T={T}: {what} type space has {size} elements")
    if size > size_cap:
        logger.error(f"{what} type space of {size} exceeds the cap {size_cap}")
        raise SizeLimit(f"{what} type space of {size} exceeds the cap {size_cap}")


def enumerate_individual_types(T: int, size_cap: int = DEFAULT_SIZE_CAP) -> TypeSpace:
    if T < 2:
        raise DimensionMismatch(f"Need T >= 2, got {T}")
    space = TypeSpace(T, collective=False)
    _guard(T, len(space), size_cap, "individual")
    return space


def enumerate_collective_types(T: int, size_cap: int = DEFAULT_SIZE_CAP) -> TypeSpace:
    if T < 3:
        raise DimensionMismatch(f"Collective types need T >= 3, got {T}")
    space = TypeSpace(T, collective=True)
    _guard(T, len(space), size_cap, "collective")
    return space

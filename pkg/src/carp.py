"""Collective (CARP) consistency of a couple's revealed-preference type.

A couple type is consistent when some pair of hypothesised member relations
``(Hm, Hf)`` satisfies the six collective conditions. Conditions 3 and 4 only
ever force edges into ``Hm`` or ``Hf`` and do so monotonically, while
conditions 5 and 6 only ever reject. So for every way of assigning each
revealed edge to one member, the least relations closed under the forcing
rules are the only candidates worth checking; ``brute_force_consistent``
keeps the exhaustive search for cross-checking.
"""

import dataclasses
from functools import lru_cache
from typing import Optional, Tuple

from loguru import logger

from src.relations import (
    CollectiveType,
    bit,
    edges,
    pair_order,
    transitive_closure,
    transpose,
)


@dataclasses.dataclass(frozen=True)
class HypothesizedRelations:
    T: int
    member_m: int
    member_f: int


@lru_cache(maxsize=None)
def _sum_rules(xc: CollectiveType) -> Tuple[Tuple[int, int, int], ...]:
    """Every active double sum as ``(s, a, b)``, in both orders of its pair."""
    rules = []
    for s, t1, t2 in xc.active_sums():
        rules.append((s, t1, t2))
        rules.append((s, t2, t1))
    return tuple(rules)


def satisfies_carp(xc: CollectiveType, member_m: int, member_f: int) -> bool:
    T = xc.T
    revealed = xc.mask
    if revealed & ~(member_m | member_f):
        return False
    closure_m = transitive_closure(T, member_m)
    closure_f = transitive_closure(T, member_f)
    for s, t in edges(T, revealed):
        if closure_m & bit(T, t, s) and not member_f & bit(T, s, t):
            return False
        if closure_f & bit(T, t, s) and not member_m & bit(T, s, t):
            return False
    rules = _sum_rules(xc)
    for s, a, b in rules:
        if closure_m & bit(T, a, s) and not member_f & bit(T, s, b):
            return False
        if closure_f & bit(T, a, s) and not member_m & bit(T, s, b):
            return False
    return not _rejected(T, revealed, rules, closure_m, closure_f)


def _rejected(T, revealed, rules, closure_m, closure_f) -> bool:
    for t, a, b in rules:
        if closure_m & bit(T, a, t) and closure_f & bit(T, b, t):
            return True
    return bool(closure_m & closure_f & transpose(T, revealed))


def _least_closed(T, revealed_edges, rules, member_m, member_f):
    while True:
        closure_m = transitive_closure(T, member_m)
        closure_f = transitive_closure(T, member_f)
        grown_m, grown_f = member_m, member_f
        for s, t in revealed_edges:
            if closure_m & bit(T, t, s):
                grown_f |= bit(T, s, t)
            if closure_f & bit(T, t, s):
                grown_m |= bit(T, s, t)
        for s, a, b in rules:
            if closure_m & bit(T, a, s):
                grown_f |= bit(T, s, b)
            if closure_f & bit(T, a, s):
                grown_m |= bit(T, s, b)
        if grown_m == member_m and grown_f == member_f:
            return member_m, member_f, closure_m, closure_f
        member_m, member_f = grown_m, grown_f


def find_hypothesized_relations(
    xc: CollectiveType, seed_m: int = 0, seed_f: int = 0
) -> Optional[HypothesizedRelations]:
    """Smallest witnessing ``(Hm, Hf)`` containing the seeds, or ``None``."""
    T = xc.T
    revealed = xc.mask
    revealed_edges = edges(T, revealed)
    rules = _sum_rules(xc)
    free = edges(T, revealed & ~(seed_m | seed_f))
    for assignment in range(1 << len(free)):
        member_m, member_f = seed_m, seed_f
        for k, (s, t) in enumerate(free):
            if assignment >> k & 1:
                member_m |= bit(T, s, t)
            else:
                member_f |= bit(T, s, t)
        member_m, member_f, closure_m, closure_f = _least_closed(
            T, revealed_edges, rules, member_m, member_f
        )
        if not _rejected(T, revealed, rules, closure_m, closure_f):
            return HypothesizedRelations(T, member_m, member_f)
    return None


@lru_cache(maxsize=1 << 16)
def is_carp_consistent(xc: CollectiveType) -> bool:
    return find_hypothesized_relations(xc) is not None


def brute_force_consistent(xc: CollectiveType) -> bool:
    """Exhaustive search over every pair of off-diagonal relations."""
    T = xc.T
    if T > 3:
        logger.warning(f"Exhaustive consistency search at T={T} is very slow")
    masks = [0]
    for s, t in pair_order(T):
        masks += [m | bit(T, s, t) for m in masks]
    for member_m in masks:
        for member_f in masks:
            if satisfies_carp(xc, member_m, member_f):
                return True
    return False

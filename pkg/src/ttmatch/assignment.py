"""Exact solvers for the best and second-best injective matching of a score grid.

Small groups are solved by exhaustive enumeration (needed anyway for the
runner-up total behind the confidence margin); large flattened instances go
through the Hungarian solver. Totals are always accumulated left-to-right over
rows so the two routes agree bit-for-bit on the same input.
"""

from __future__ import annotations

import functools
import itertools
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import GroupShape, ValidationError, check_similarity_matrix

# k!/(k-m)! candidate matchings at most; 9x9 square groups still enumerate.
ENUMERATION_CAP = 10**6


class EnumerationCapError(ValidationError):
    """Too many injective matchings to enumerate exhaustively."""


def matching_count(shape: GroupShape) -> int:
    return math.perm(shape.cols, shape.rows)


def enumerate_matchings(
    shape: GroupShape, cap: int = ENUMERATION_CAP
) -> list[tuple[int, ...]]:
    """All injective row->column assignments, in lexicographic order."""
    count = matching_count(shape)
    if count > cap:
        raise EnumerationCapError(
            f"group too large for enumeration: {count} matchings exceed cap {cap}"
        )
    return list(itertools.permutations(range(shape.cols), shape.rows))


@functools.lru_cache(maxsize=64)
def _perm_matrix(rows: int, cols: int) -> np.ndarray:
    """Enumerated matchings as a read-only (count, rows) int array."""
    perms = np.array(
        enumerate_matchings(GroupShape(rows, cols)), dtype=np.intp
    ).reshape(-1, rows)
    perms.flags.writeable = False
    return perms


def matching_total(s: np.ndarray, assignment) -> float:
    """Sum of s[i, assignment[i]], accumulated in row order."""
    total = 0.0
    for i, j in enumerate(assignment):
        total += float(s[i, j])
    return total


def assignment_totals(s: np.ndarray, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """Totals of every enumerated matching of `s`, in lexicographic order.

    Accumulation matches matching_total exactly: one row-indexed add per row,
    left to right.
    """
    m, k = s.shape
    if matching_count(GroupShape(m, k)) > cap:
        raise EnumerationCapError(
            f"group too large for enumeration: cap {cap} exceeded"
        )
    perms = _perm_matrix(m, k)
    totals = np.zeros(len(perms), dtype=np.float64)
    for i in range(m):
        totals += s[i, perms[:, i]]
    return totals


def best_two_matchings(
    s: np.ndarray, cap: int = ENUMERATION_CAP
) -> tuple[tuple[int, ...], float, float]:
    """Best matching plus the best and runner-up totals.

    Ties on the best total are broken toward the lexicographically smallest
    assignment. The runner-up total is the maximum over all remaining
    matchings, so an exact tie yields second_total == best_total. A 1x1 group
    has no runner-up; its second total is -inf.
    """
    s = check_similarity_matrix(s)
    m, k = s.shape
    totals = assignment_totals(s, cap=cap)
    best_idx = int(np.argmax(totals))  # first max = lexicographic tie-break
    best_total = float(totals[best_idx])
    if totals.shape[0] == 1:
        second_total = float("-inf")
    else:
        totals[best_idx] = -np.inf
        second_total = float(totals.max())
    best = tuple(int(j) for j in _perm_matrix(m, k)[best_idx])
    return best, best_total, second_total


def hungarian_max(s: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Maximum-total injective matching via the assignment-problem solver.

    Exact optimum in O(n^3); the returned total is recomputed with
    matching_total so it is directly comparable with enumeration output.
    """
    s = check_similarity_matrix(s)
    _, cols = linear_sum_assignment(s, maximize=True)
    assignment = tuple(int(j) for j in cols)
    return assignment, matching_total(s, assignment)

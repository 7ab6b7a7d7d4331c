"""Evaluation metrics for grouped similarity data.

All metrics are binary per group and use strict inequalities, so any exact tie
scores 0. The convention throughout: the correct pairing sits on the diagonal
(image i with caption i). Matrices whose stored ground truth is a different
permutation are first reordered with canonical_matrix.

Batch variants operate on (n, m, k) stacks and are the hot path for Monte
Carlo validation; scalar and batch routes are exact-equality equivalent.
"""

from __future__ import annotations

from fractions import Fraction
from math import factorial
from typing import Iterable, Optional, Sequence

import numpy as np

from .assignment import best_two_matchings, _perm_matrix
from .core import GroupShape, ValidationError, check_similarity_matrix


def canonical_matrix(
    s: np.ndarray, ground_truth: Optional[Sequence[int]]
) -> np.ndarray:
    """Reorder columns so the stored ground-truth pairing lies on the diagonal."""
    if ground_truth is None:
        return s
    m, k = s.shape
    gt = list(ground_truth)
    if len(gt) != m:
        raise ValidationError("ground truth length does not match row count")
    rest = [j for j in range(k) if j not in set(gt)]
    return s[:, gt + rest]


def group_score_batch(stack: np.ndarray) -> np.ndarray:
    """Per-matrix score for a (n, m, k) stack: 1 where each diagonal entry
    strictly beats its row rivals, and (square groups) its column rivals."""
    n, m, k = stack.shape
    GroupShape(m, k)
    diag = stack[:, np.arange(m), np.arange(m)]
    masked = stack.copy()
    masked[:, np.arange(m), np.arange(m)] = -np.inf
    ok = np.all(diag > masked.max(axis=2), axis=1)
    if m == k:
        ok &= np.all(diag > masked[:, :, :m].max(axis=1), axis=1)
    return ok.astype(np.int64)


def individual_match_batch(stack: np.ndarray) -> np.ndarray:
    """1 where every row's strict argmax is its diagonal column."""
    n, m, k = stack.shape
    GroupShape(m, k)
    diag = stack[:, np.arange(m), np.arange(m)]
    masked = stack.copy()
    masked[:, np.arange(m), np.arange(m)] = -np.inf
    return np.all(diag > masked.max(axis=2), axis=1).astype(np.int64)


def group_match_batch(stack: np.ndarray) -> np.ndarray:
    """1 where the diagonal matching's total strictly beats every other
    injective matching. Totals accumulate row by row, matching the solver."""
    n, m, k = stack.shape
    perms = _perm_matrix(m, k)  # identity is first in lexicographic order
    totals = np.zeros((n, len(perms)), dtype=np.float64)
    for i in range(m):
        totals += stack[:, i, perms[:, i]]
    if totals.shape[1] == 1:
        return np.ones(n, dtype=np.int64)
    return (totals[:, 0] > totals[:, 1:].max(axis=1)).astype(np.int64)


def group_score(s: np.ndarray) -> int:
    """1 iff each correct pair beats all its row and (square) column rivals."""
    s = check_similarity_matrix(s)
    return int(group_score_batch(s[None])[0])


def individual_match_score(s: np.ndarray) -> int:
    """Row-wise argmax agreement, no injectivity across rows."""
    s = check_similarity_matrix(s)
    return int(individual_match_batch(s[None])[0])


def group_match(s: np.ndarray) -> int:
    """1 iff the diagonal matching is the strict total-similarity optimum."""
    s = check_similarity_matrix(s)
    m = s.shape[0]
    best, best_total, second_total = best_two_matchings(s)
    return int(best == tuple(range(m)) and best_total > second_total)


def text_score(s: np.ndarray) -> int:
    """Single-image specialization: the correct caption must top the row."""
    s = check_similarity_matrix(s)
    if s.shape[0] != 1:
        raise ValidationError(
            f"text score requires a 1-image group, got {s.shape[0]} rows"
        )
    return group_score(s)


def margin(s: np.ndarray) -> float:
    """Best-matching total minus runner-up total; 0 on exact ties.

    A 1x1 group has no runner-up and returns +inf.
    """
    _, best_total, second_total = best_two_matchings(s)
    return best_total - second_total


def closed_form_random_group_score(shape: GroupShape) -> tuple[Fraction, Optional[float]]:
    """Probability that i.i.d. uniform scores achieve a group score of 1.

    Square k x k: (k-1)!/(2k-1)!. Rectangular m x k (m < k): 1/k^m. Returned
    as an exact rational plus its float value (None if not representable).
    """
    if shape.is_square:
        k = shape.cols
        exact = Fraction(factorial(k - 1), factorial(2 * k - 1))
    else:
        exact = Fraction(1, shape.cols**shape.rows)
    return exact, _to_float(exact)


def closed_form_random_group_match(shape: GroupShape) -> tuple[Fraction, Optional[float]]:
    """Probability that i.i.d. uniform scores achieve a group match of 1.

    One over the number of injective matchings: (k-m)!/k! (square: 1/k!).
    """
    exact = Fraction(
        factorial(shape.cols - shape.rows), factorial(shape.cols)
    )
    return exact, _to_float(exact)


def _to_float(x: Fraction) -> Optional[float]:
    try:
        return float(x)
    except OverflowError:
        return None


def dataset_metrics(matrices: Iterable[np.ndarray]) -> dict[str, float]:
    """Mean metrics over canonical matrices, as percentages in [0, 100].

    assignment_accuracy is the fraction of rows whose induced best matching
    lands on the diagonal. Accumulation follows the input order.
    """
    n = 0
    gs_sum = gm_sum = ind_sum = 0
    rows_total = rows_correct = 0
    for s in matrices:
        s = check_similarity_matrix(s)
        n += 1
        gs_sum += group_score(s)
        gm_sum += group_match(s)
        ind_sum += individual_match_score(s)
        best, _, _ = best_two_matchings(s)
        rows_total += len(best)
        rows_correct += sum(1 for i, j in enumerate(best) if i == j)
    if n == 0:
        raise ValidationError("cannot evaluate metrics over an empty dataset")
    return {
        "n_groups": float(n),
        "group_score": 100.0 * gs_sum / n,
        "group_match": 100.0 * gm_sum / n,
        "individual_match": 100.0 * ind_sum / n,
        "assignment_accuracy": 100.0 * rows_correct / rows_total,
    }


def display_round(value: float, ndigits: int = 2) -> float:
    """Round-half-even display rounding; internal values stay full precision."""
    return round(value, ndigits)

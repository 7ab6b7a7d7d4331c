"""Monte Carlo checks of the random-guessing closed forms.

Draws i.i.d. uniform [0, 1] similarity matrices and compares empirical metric
frequencies against the exact probabilities. Trials are processed in fixed
chunks with per-chunk derived seeds; the success count is an integer sum, so
results are deterministic for a given (shape, trials, seed) regardless of
chunking.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt
from typing import Optional

import numpy as np

from .core import GroupShape, ValidationError
from .metrics import (
    closed_form_random_group_match,
    closed_form_random_group_score,
    group_match_batch,
    group_score_batch,
    individual_match_batch,
)

CHUNK = 200_000

_BATCH_METRICS = {
    "group_score": group_score_batch,
    "group_match": group_match_batch,
    "individual_match": individual_match_batch,
}

# Rectangular shapes exercised alongside squares by check_propositions.
RECTANGULAR_SHAPES = ((1, 2), (1, 4), (2, 3), (2, 4), (3, 4))

# Beyond k = 5 the square group-score event is too rare to estimate at
# practical trial counts, so proposition checks cap there.
MAX_SQUARE_K = 5


def _chunk_seeds(shape: GroupShape, trials: int, seed: int) -> list:
    entropy = np.random.SeedSequence([seed, shape.rows, shape.cols])
    return entropy.spawn(-(-trials // CHUNK))


def monte_carlo_metric(
    shape: GroupShape, metric: str, trials: int, seed: int
) -> tuple[float, float]:
    """Empirical mean of a metric over uniform-random matrices, with the
    binomial standard error sqrt(p(1-p)/N)."""
    if metric not in _BATCH_METRICS:
        raise ValidationError(f"unknown metric '{metric}'")
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    evaluate = _BATCH_METRICS[metric]
    successes = 0
    remaining = trials
    for child in _chunk_seeds(shape, trials, seed):
        rng = np.random.default_rng(child)
        n = min(CHUNK, remaining)
        draws = rng.random((n, shape.rows, shape.cols))
        successes += int(evaluate(draws).sum())
        remaining -= n
    estimate = successes / trials
    stderr = sqrt(estimate * (1.0 - estimate) / trials)
    return estimate, stderr


@dataclass(frozen=True)
class PropositionCheck:
    """One (shape, metric) cell of the proposition table."""

    rows: int
    cols: int
    metric: str
    estimate: float
    stderr: float
    expected: float
    deviation_sigmas: Optional[float]
    passed: bool


def check_propositions(
    max_k: int = 4, trials: int = 1_000_000, seed: int = 0, band_sigmas: float = 4.0
) -> list[PropositionCheck]:
    """Estimate group score and group match frequencies for square groups up
    to max_k and a fixed set of rectangular shapes, flagging any cell that
    deviates from its closed form by more than band_sigmas standard errors.

    Both metrics of a shape are evaluated on the same draws, so shapes where
    they provably coincide (single-image groups) agree exactly.
    """
    if max_k > MAX_SQUARE_K:
        raise ValidationError(f"max_k capped at {MAX_SQUARE_K}; rarer events need more trials")
    if max_k < 2:
        raise ValidationError("max_k must be >= 2")
    shapes = [GroupShape(k, k) for k in range(2, max_k + 1)]
    shapes += [GroupShape(m, k) for m, k in RECTANGULAR_SHAPES]

    results = []
    for shape in shapes:
        counts = {"group_score": 0, "group_match": 0}
        remaining = trials
        for child in _chunk_seeds(shape, trials, seed):
            rng = np.random.default_rng(child)
            n = min(CHUNK, remaining)
            draws = rng.random((n, shape.rows, shape.cols))
            counts["group_score"] += int(group_score_batch(draws).sum())
            counts["group_match"] += int(group_match_batch(draws).sum())
            remaining -= n
        expected = {
            "group_score": float(closed_form_random_group_score(shape)[0]),
            "group_match": float(closed_form_random_group_match(shape)[0]),
        }
        for metric in ("group_score", "group_match"):
            estimate = counts[metric] / trials
            stderr = sqrt(estimate * (1.0 - estimate) / trials)
            if stderr > 0:
                sigmas = abs(estimate - expected[metric]) / stderr
            else:
                sigmas = None if estimate == expected[metric] else float("inf")
            passed = estimate == expected[metric] if sigmas is None else sigmas <= band_sigmas
            results.append(
                PropositionCheck(
                    rows=shape.rows,
                    cols=shape.cols,
                    metric=metric,
                    estimate=estimate,
                    stderr=stderr,
                    expected=expected[metric],
                    deviation_sigmas=sigmas,
                    passed=passed,
                )
            )
    return results


def format_proposition_table(results: list[PropositionCheck]) -> str:
    lines = [
        f"{'shape':>7}  {'metric':<16} {'estimate':>10} {'stderr':>9} "
        f"{'expected':>10} {'sigmas':>7}  status"
    ]
    for row in results:
        sigmas = "n/a" if row.deviation_sigmas is None else f"{row.deviation_sigmas:7.2f}"
        lines.append(
            f"{row.rows:>3}x{row.cols:<3}  {row.metric:<16} {row.estimate:>10.6f} "
            f"{row.stderr:>9.6f} {row.expected:>10.6f} {sigmas:>7}  "
            f"{'ok' if row.passed else 'FAIL'}"
        )
    return "\n".join(lines)

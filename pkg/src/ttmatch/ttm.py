"""The test-time matching engine.

Implements the grouped self-training loop (induce matchings, keep the ones
whose confidence margin clears a scheduled threshold, finetune on them,
repeat), the one-shot matching report, the oracle skyline variant, and the
global non-grouped variant that solves one assignment problem over all images
and captions with per-pair percentile thresholding.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import scorer
from .assignment import _perm_matrix, best_two_matchings, hungarian_max
from .core import (
    EmbeddingTable,
    FlatDataset,
    Group,
    GroupedDataset,
    ValidationError,
)
from .metrics import (
    canonical_matrix,
    dataset_metrics,
    group_match_batch,
    group_score,
    group_score_batch,
    individual_match_batch,
)
from .scorer import (
    AdapterParams,
    DivergenceError,
    OptimizerState,
    TrainConfig,
    score_group,
)

# Upper bound on entries of the global similarity matrix (~400 MB of float64).
GLOBAL_MATRIX_CAP = 50_000_000

SCHEDULE_KINDS = ("constant", "linear-decay", "cosine-decay", "linear-ascend")
MODE_ABSOLUTE = "absolute"
MODE_PERCENTILE = "percentile"


class CapacityError(ValidationError):
    """A global instance exceeds the in-memory matrix budget."""


@dataclass(frozen=True)
class ThresholdSchedule:
    """Selection thresholds tau_1..tau_T across iterations.

    In absolute mode the value thresholds group margins directly; in
    percentile mode it is a quantile in [0, 1] of matched-pair similarities
    (the global variant's selection rule).
    """

    kind: str
    tau_start: float
    tau_end: float
    iterations: int
    mode: str = MODE_ABSOLUTE

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"unknown schedule kind '{self.kind}'")
        if self.mode not in (MODE_ABSOLUTE, MODE_PERCENTILE):
            raise ValidationError(f"unknown schedule mode '{self.mode}'")
        if self.iterations < 1:
            raise ValidationError("schedule must have at least one iteration")
        if self.mode == MODE_PERCENTILE:
            for tau in (self.tau_start, self.tau_end):
                if not 0.0 <= tau <= 1.0:
                    raise ValidationError("percentile thresholds must lie in [0, 1]")
        if self.kind in ("linear-decay", "cosine-decay") and self.tau_start < self.tau_end:
            raise ValidationError("decay schedules require tau_start >= tau_end")
        if self.kind == "linear-ascend" and self.tau_start > self.tau_end:
            raise ValidationError("ascending schedules require tau_start <= tau_end")


def schedule_value(schedule: ThresholdSchedule, t: int) -> float:
    """Threshold at iteration t (1-based)."""
    total = schedule.iterations
    if not 1 <= t <= total:
        raise ValidationError(f"iteration {t} outside schedule range [1, {total}]")
    if schedule.kind == "constant" or total == 1:
        return schedule.tau_start
    frac = (t - 1) / (total - 1)
    if schedule.kind in ("linear-decay", "linear-ascend"):
        return schedule.tau_start + frac * (schedule.tau_end - schedule.tau_start)
    # cosine-decay
    return schedule.tau_end + (schedule.tau_start - schedule.tau_end) * (
        1.0 + math.cos(math.pi * frac)
    ) / 2.0


@dataclass(frozen=True)
class TtmConfig:
    schedule: ThresholdSchedule
    train: TrainConfig
    oracle_mode: bool = False
    global_mode: bool = False
    seed: int = 0


@dataclass
class IterationStats:
    """Bookkeeping for one loop iteration.

    pseudo_label_precision is None when nothing was selected or no ground
    truth is available (an empty selection is never reported as precision 0).
    group_score/group_match are None in global mode, assignment_accuracy is
    always populated.
    """

    iteration: int
    tau: float
    selected_count: int
    selection_fraction: float
    pseudo_label_precision: Optional[float]
    group_score: Optional[float]
    group_match: Optional[float]
    assignment_accuracy: Optional[float]
    mean_margin: Optional[float]


@dataclass
class RunReport:
    """Everything one engine run produced, minus anything nondeterministic.

    wall_clock_seconds is measured per run and deliberately excluded from
    serialization and equality so that reports from identically seeded runs
    are byte-identical.
    """

    config: dict
    seed: int
    baseline: dict
    iterations: list
    final: dict
    wall_clock_seconds: Optional[float] = field(default=None, compare=False)


# ---------------------------------------------------------------------------
# Grouped scoring internals: the whole dataset is scored as one stacked tensor
# (uniform shape), with margins and induced matchings computed against the
# same enumerated matching order as the per-group solver.
# ---------------------------------------------------------------------------


@dataclass
class _Stacks:
    images: np.ndarray  # (n, m, d)
    captions: np.ndarray  # (n, k, d)
    ground_truth: Optional[np.ndarray]  # (n, m)
    canon_cols: Optional[np.ndarray]  # (n, k) column order placing truth on diag


def _stack_dataset(dataset: GroupedDataset, table: EmbeddingTable) -> _Stacks:
    images = np.stack([table.stack(g.image_ids) for g in dataset.groups])
    captions = np.stack([table.stack(g.caption_ids) for g in dataset.groups])
    if dataset.has_ground_truth:
        gt = np.array([g.ground_truth for g in dataset.groups], dtype=np.intp)
        k = dataset.shape.cols
        canon = np.empty((len(dataset.groups), k), dtype=np.intp)
        for idx, g in enumerate(dataset.groups):
            chosen = list(g.ground_truth)
            canon[idx] = chosen + [j for j in range(k) if j not in set(chosen)]
    else:
        gt = None
        canon = None
    return _Stacks(images, captions, gt, canon)


def _score_all(params: AdapterParams, stacks: _Stacks) -> np.ndarray:
    scores, _ = scorer._forward_stack(params, stacks.images, stacks.captions)
    return scores


def _margins_and_best(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Margins and induced (best) assignments for an (n, m, k) score stack."""
    n, m, k = scores.shape
    perms = _perm_matrix(m, k)
    totals = np.zeros((n, len(perms)), dtype=np.float64)
    for i in range(m):
        totals += scores[:, i, perms[:, i]]
    best_idx = totals.argmax(axis=1)
    best = perms[best_idx]
    if len(perms) == 1:
        margins = np.full(n, np.inf)
    else:
        best_total = totals[np.arange(n), best_idx]
        totals[np.arange(n), best_idx] = -np.inf
        margins = best_total - totals.max(axis=1)
    return margins, best


def _grouped_metrics(scores: np.ndarray, stacks: _Stacks) -> dict[str, float]:
    if stacks.canon_cols is None:
        raise ValidationError("ground truth required to evaluate metrics")
    canon = np.take_along_axis(scores, stacks.canon_cols[:, None, :], axis=2)
    n = scores.shape[0]
    _, best = _margins_and_best(scores)
    row_acc = float((best == stacks.ground_truth).mean())
    return {
        "n_groups": float(n),
        "group_score": 100.0 * float(group_score_batch(canon).mean()),
        "group_match": 100.0 * float(group_match_batch(canon).mean()),
        "individual_match": 100.0 * float(individual_match_batch(canon).mean()),
        "assignment_accuracy": 100.0 * row_acc,
    }


def induce_matching(
    params: AdapterParams, group: Group, table: EmbeddingTable
) -> tuple[int, ...]:
    """The best-total matching of one group under the current scorer."""
    best, _, _ = best_two_matchings(score_group(params, group, table))
    return best


def _select(
    scores: np.ndarray,
    stacks: _Stacks,
    dataset: GroupedDataset,
    tau: float,
    oracle: bool,
) -> tuple[list[tuple[Group, tuple[int, ...]]], dict]:
    margins, best = _margins_and_best(scores)
    keep = margins >= tau
    if oracle:
        if stacks.ground_truth is None:
            raise ValidationError("oracle mode requires ground truth")
        keep &= np.all(best == stacks.ground_truth, axis=1)
    selected = [
        (dataset.groups[i], tuple(int(j) for j in best[i]))
        for i in np.flatnonzero(keep)
    ]
    precision: Optional[float] = None
    if selected and stacks.ground_truth is not None:
        correct = np.all(best == stacks.ground_truth, axis=1) & keep
        precision = float(correct.sum() / keep.sum())
    frag = {
        "selected_count": len(selected),
        "selection_fraction": len(selected) / len(dataset.groups),
        "pseudo_label_precision": precision,
        "mean_margin": float(margins.mean()),
    }
    return selected, frag


def select_pseudolabels(
    params: AdapterParams,
    dataset: GroupedDataset,
    tau: float,
    oracle: bool,
    table: EmbeddingTable,
) -> tuple[list[tuple[Group, tuple[int, ...]]], dict]:
    """Groups whose induced matching clears the margin threshold (>=), with
    selection statistics. Oracle mode additionally drops incorrect matchings.
    """
    if not math.isfinite(tau) and tau < 0:
        raise ValidationError("threshold must not be -inf")
    stacks = _stack_dataset(dataset, table)
    scores = _score_all(params, stacks)
    return _select(scores, stacks, dataset, tau, oracle)


def calibrate_tau(
    params: AdapterParams,
    dataset: GroupedDataset,
    table: EmbeddingTable,
    target_fraction: float,
) -> float:
    """Threshold whose selection keeps roughly `target_fraction` of groups.

    Computed as the (1 - target_fraction) quantile of current margins, the
    operational version of picking tau_1 so that a set share of groups is
    matched at the start.
    """
    if not 0.0 < target_fraction <= 1.0:
        raise ValidationError("target_fraction must be in (0, 1]")
    stacks = _stack_dataset(dataset, table)
    margins, _ = _margins_and_best(_score_all(params, stacks))
    return float(np.quantile(margins, 1.0 - target_fraction))


# ---------------------------------------------------------------------------
# One-shot reporting
# ---------------------------------------------------------------------------


def adapter_score_fn(
    params: AdapterParams, table: EmbeddingTable
) -> Callable[[Group], np.ndarray]:
    return lambda group: score_group(params, group, table)


def store_score_fn(store) -> Callable[[Group], np.ndarray]:
    def fn(group: Group) -> np.ndarray:
        if group.id not in store:
            raise ValidationError(f"no scores for group '{group.id}'")
        return np.asarray(store[group.id], dtype=np.float64)

    return fn


def run_simple_match(
    dataset: GroupedDataset,
    score_fn: Callable[[Group], np.ndarray],
    overfit_check: bool = False,
) -> dict[str, float]:
    """Raw vs matching-induced performance, without any training.

    Returns dataset means in [0, 100]: group_score is the raw metric,
    group_match is the simple-match number, individual_match the per-row
    variant. With overfit_check the induced matchings are burned into
    one-hot matrices and re-scored, demonstrating that the induced-matching
    number transfers to the raw metric exactly.
    """
    if not dataset.has_ground_truth:
        raise ValidationError("ground truth required to evaluate metrics")
    matrices = [
        canonical_matrix(score_fn(g), g.ground_truth) for g in dataset.groups
    ]
    result = dataset_metrics(matrices)
    if overfit_check:
        overfit_sum = 0
        for s in matrices:
            best, _, _ = best_two_matchings(s)
            burned = np.zeros_like(s)
            burned[np.arange(len(best)), list(best)] = 1.0
            overfit_sum += group_score(burned)
        overfit_score = 100.0 * overfit_sum / len(matrices)
        assert overfit_score == result["group_match"], (
            "overfitting to induced matchings must reproduce the matching score"
        )
        result["overfit_group_score"] = overfit_score
    return result


# ---------------------------------------------------------------------------
# The grouped loop
# ---------------------------------------------------------------------------


def run_ttm(
    dataset: GroupedDataset,
    table: EmbeddingTable,
    config: TtmConfig,
    initial_params: Optional[AdapterParams] = None,
) -> tuple[AdapterParams, RunReport]:
    """Iterative margin-thresholded self-training on a grouped dataset.

    Each iteration selects pseudo-labels with the current model, finetunes on
    them (skipping training entirely when nothing is selected), and evaluates
    against ground truth. Deterministic given config and seed; on divergence
    the partial report is attached to the raised error.
    """
    if not dataset.groups:
        raise ValidationError("dataset is empty")
    if not dataset.has_ground_truth:
        raise ValidationError("ground truth required to run the grouped loop")
    if config.schedule.mode != MODE_ABSOLUTE:
        raise ValidationError("grouped runs use absolute-margin schedules")

    start = time.perf_counter()
    stacks = _stack_dataset(dataset, table)
    params = (initial_params or AdapterParams.identity(table.dim)).copy()
    opt_state: Optional[OptimizerState] = None

    scores = _score_all(params, stacks)
    baseline = _grouped_metrics(scores, stacks)
    baseline["mean_margin"] = float(_margins_and_best(scores)[0].mean())

    stats_list: list[IterationStats] = []
    try:
        for t in range(1, config.schedule.iterations + 1):
            tau = schedule_value(config.schedule, t)
            selected, frag = _select(scores, stacks, dataset, tau, config.oracle_mode)
            if selected:
                params, opt_state = scorer.finetune(
                    params,
                    None if config.train.reset_optimizer_state else opt_state,
                    selected,
                    config.train,
                    table,
                    iteration=t,
                    rng=np.random.default_rng([config.seed, t]),
                )
            scores = _score_all(params, stacks)
            evaluated = _grouped_metrics(scores, stacks)
            stats_list.append(
                IterationStats(
                    iteration=t,
                    tau=tau,
                    selected_count=frag["selected_count"],
                    selection_fraction=frag["selection_fraction"],
                    pseudo_label_precision=frag["pseudo_label_precision"],
                    group_score=evaluated["group_score"],
                    group_match=evaluated["group_match"],
                    assignment_accuracy=evaluated["assignment_accuracy"],
                    mean_margin=frag["mean_margin"],
                )
            )
    except DivergenceError as err:
        err.report = _build_report(config, stats_list, baseline, start)
        raise

    report = _build_report(config, stats_list, baseline, start)
    return params, report


def _build_report(
    config: TtmConfig,
    stats_list: list[IterationStats],
    baseline: dict,
    start: float,
) -> RunReport:
    if stats_list:
        last = stats_list[-1]
        final = {
            "group_score": last.group_score,
            "group_match": last.group_match,
            "assignment_accuracy": last.assignment_accuracy,
        }
    else:
        final = {
            "group_score": baseline.get("group_score"),
            "group_match": baseline.get("group_match"),
            "assignment_accuracy": baseline.get("assignment_accuracy"),
        }
    return RunReport(
        config=asdict(config),
        seed=config.seed,
        baseline=baseline,
        iterations=stats_list,
        final=final,
        wall_clock_seconds=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# Global (non-grouped) variant
# ---------------------------------------------------------------------------


def _flat_vectors(
    flat: FlatDataset, table: EmbeddingTable
) -> tuple[np.ndarray, np.ndarray]:
    if len(flat.image_ids) * len(flat.caption_ids) > GLOBAL_MATRIX_CAP:
        raise CapacityError(
            f"global matrix {len(flat.image_ids)}x{len(flat.caption_ids)} "
            f"exceeds the {GLOBAL_MATRIX_CAP}-entry budget"
        )
    return table.stack(flat.image_ids), table.stack(flat.caption_ids)


def _flat_scores(
    params: AdapterParams, images: np.ndarray, captions: np.ndarray
) -> np.ndarray:
    scores, _ = scorer._forward_stack(params, images[None], captions[None])
    return scores[0]


def _flat_accuracy(flat: FlatDataset, assignment: Sequence[int]) -> Optional[float]:
    if flat.ground_truth is None:
        return None
    known = [i for i, img in enumerate(flat.image_ids) if img in flat.ground_truth]
    if not known:
        return None
    hits = sum(
        1
        for i in known
        if flat.caption_ids[assignment[i]] == flat.ground_truth[flat.image_ids[i]]
    )
    return hits / len(known)


def global_matching(
    flat: FlatDataset,
    scores: Optional[np.ndarray] = None,
    params: Optional[AdapterParams] = None,
    table: Optional[EmbeddingTable] = None,
) -> tuple[dict[str, str], Optional[float]]:
    """One-shot assignment of every image to a distinct caption.

    Pass either a precomputed score matrix or params + table. Returns the
    image->caption mapping and, when ground truth is known, the fraction of
    images assigned their true caption.
    """
    if scores is None:
        if params is None or table is None:
            raise ValidationError("global_matching needs scores or params + table")
        images, captions = _flat_vectors(flat, table)
        scores = _flat_scores(params, images, captions)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(flat.image_ids), len(flat.caption_ids)):
        raise ValidationError(
            f"shape mismatch: score matrix {scores.shape} does not match dataset"
        )
    if scores.size > GLOBAL_MATRIX_CAP:
        raise CapacityError("score matrix exceeds the global memory budget")
    assignment, _ = hungarian_max(scores)
    mapping = {
        flat.image_ids[i]: flat.caption_ids[j] for i, j in enumerate(assignment)
    }
    return mapping, _flat_accuracy(flat, assignment)


def run_global_ttm(
    flat: FlatDataset,
    table: EmbeddingTable,
    config: TtmConfig,
    initial_params: Optional[AdapterParams] = None,
) -> tuple[AdapterParams, RunReport]:
    """Self-training on one global matching instance.

    Each iteration solves the assignment problem, keeps the top (1 - tau_t)
    fraction of matched pairs ranked by similarity (>= the tau_t quantile),
    finetunes on those pairs with in-batch negatives, and reports assignment
    accuracy against ground truth.
    """
    if config.schedule.mode != MODE_PERCENTILE:
        raise ValidationError("global runs use percentile schedules")
    if not flat.image_ids:
        raise ValidationError("dataset is empty")

    start = time.perf_counter()
    images, captions = _flat_vectors(flat, table)
    params = (initial_params or AdapterParams.identity(table.dim)).copy()
    opt_state: Optional[OptimizerState] = None

    scores = _flat_scores(params, images, captions)
    assignment, _ = hungarian_max(scores)
    baseline_acc = _flat_accuracy(flat, assignment)
    baseline = {
        "n_images": float(len(flat.image_ids)),
        "assignment_accuracy": None if baseline_acc is None else 100.0 * baseline_acc,
    }

    n_images = len(flat.image_ids)
    gt_cols = None
    if flat.ground_truth is not None:
        caption_index = {c: j for j, c in enumerate(flat.caption_ids)}
        gt_cols = np.array(
            [
                caption_index.get(flat.ground_truth.get(img, ""), -1)
                for img in flat.image_ids
            ],
            dtype=np.intp,
        )

    stats_list: list[IterationStats] = []
    try:
        for t in range(1, config.schedule.iterations + 1):
            tau = schedule_value(config.schedule, t)
            pair_scores = scores[np.arange(n_images), assignment]
            threshold = float(np.quantile(pair_scores, tau))
            keep = pair_scores >= threshold
            picked = np.flatnonzero(keep)
            precision: Optional[float] = None
            if picked.size and gt_cols is not None:
                valid = gt_cols[picked] >= 0
                if valid.any():
                    hits = np.asarray(assignment)[picked][valid] == gt_cols[picked][valid]
                    precision = float(hits.mean())
            if picked.size:
                params, opt_state = scorer.finetune_pairs(
                    params,
                    None if config.train.reset_optimizer_state else opt_state,
                    images[picked],
                    captions[np.asarray(assignment)[picked]],
                    config.train,
                    iteration=t,
                    rng=np.random.default_rng([config.seed, t]),
                )
            scores = _flat_scores(params, images, captions)
            assignment, _ = hungarian_max(scores)
            acc = _flat_accuracy(flat, assignment)
            stats_list.append(
                IterationStats(
                    iteration=t,
                    tau=tau,
                    selected_count=int(picked.size),
                    selection_fraction=picked.size / n_images,
                    pseudo_label_precision=precision,
                    group_score=None,
                    group_match=None,
                    assignment_accuracy=None if acc is None else 100.0 * acc,
                    mean_margin=None,
                )
            )
    except DivergenceError as err:
        err.report = _build_global_report(config, stats_list, baseline, start)
        raise

    report = _build_global_report(config, stats_list, baseline, start)
    return params, report


def _build_global_report(
    config: TtmConfig,
    stats_list: list[IterationStats],
    baseline: dict,
    start: float,
) -> RunReport:
    if stats_list:
        final = {"assignment_accuracy": stats_list[-1].assignment_accuracy}
    else:
        final = {"assignment_accuracy": baseline.get("assignment_accuracy")}
    return RunReport(
        config=asdict(config),
        seed=config.seed,
        baseline=baseline,
        iterations=stats_list,
        final=final,
        wall_clock_seconds=time.perf_counter() - start,
    )

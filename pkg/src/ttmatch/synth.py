"""Planted-structure synthetic datasets.

Every group draws a shared anchor direction plus one concept vector per
caption; image and caption embeddings of a true pair share both, differing
only in per-entity noise. The anchor makes within-group pairs mutually
confusable and the noise controls how often the per-pair cosine ranks them
wrong, so one knob (`noise`) sweeps the dataset from trivially solvable to
indistinguishable-from-random.

Concept vectors are drawn inside one low-dimensional subspace shared by the
whole dataset (`concept_rank`). That shared subspace is the dataset-level
systematic structure a scorer can actually learn from confident groups and
transfer to the rest; with full-rank concepts every direction is equally
likely and no finetuning signal survives averaging over groups.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (
    EmbeddingTable,
    FlatDataset,
    Group,
    GroupedDataset,
    GroupShape,
    ValidationError,
    identity_matching,
)

DEFAULT_DIM = 64
DEFAULT_GROUPS = 400
DEFAULT_ANCHOR_WEIGHT = 2.0
DEFAULT_SIGNAL = 1.0
DEFAULT_CONCEPT_RANK = 8
# Calibrated so an identity adapter lands in the low raw-score regime
# (raw group score around 10-30 on the default 2x2 configuration).
DEFAULT_NOISE = 3.0


@dataclass(frozen=True)
class SynthConfig:
    n_groups: int = DEFAULT_GROUPS
    shape: GroupShape = GroupShape(2, 2)
    dim: int = DEFAULT_DIM
    anchor_weight: float = DEFAULT_ANCHOR_WEIGHT
    signal: float = DEFAULT_SIGNAL
    noise: float = DEFAULT_NOISE
    concept_rank: int = DEFAULT_CONCEPT_RANK
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_groups < 1:
            raise ValidationError("n_groups must be >= 1")
        if self.dim < 2:
            raise ValidationError("dim must be >= 2")
        if self.signal <= 0:
            raise ValidationError("signal must be positive")
        if self.noise < 0 or self.anchor_weight < 0:
            raise ValidationError("noise and anchor_weight must be nonnegative")
        if not 1 <= self.concept_rank <= self.dim:
            raise ValidationError("concept_rank must be in [1, dim]")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate(config: SynthConfig) -> tuple[GroupedDataset, EmbeddingTable]:
    """Deterministic dataset + embedding table for a config.

    Ground truth is positional identity. The concept subspace and every
    group's rows are seeded independently (derived from config.seed), so
    generation order never matters. Concepts are rescaled by
    sqrt(dim / concept_rank) so their expected norm matches a full-rank draw
    and `signal` keeps the same meaning at any rank.
    """
    m, k = config.shape.rows, config.shape.cols
    children = np.random.SeedSequence(config.seed).spawn(config.n_groups + 1)
    basis_rng = np.random.default_rng(children[0])
    basis, _ = np.linalg.qr(
        basis_rng.standard_normal((config.dim, config.concept_rank))
    )
    concept_scale = np.sqrt(config.dim / config.concept_rank)
    groups = []
    rows: dict[str, np.ndarray] = {}
    for gi, child in enumerate(children[1:]):
        rng = np.random.default_rng(child)
        anchor = rng.standard_normal(config.dim)
        concepts = concept_scale * rng.standard_normal((k, config.concept_rank)) @ basis.T
        noise_images = rng.standard_normal((m, config.dim))
        noise_captions = rng.standard_normal((k, config.dim))
        base = config.anchor_weight * anchor + config.signal * concepts
        images = _unit(base[:m] + config.noise * noise_images)
        captions = _unit(base + config.noise * noise_captions)
        gid = f"g{gi:05d}"
        image_ids = tuple(f"{gid}_i{r}" for r in range(m))
        caption_ids = tuple(f"{gid}_c{c}" for c in range(k))
        for name, vec in zip(image_ids, images):
            rows[name] = vec
        for name, vec in zip(caption_ids, captions):
            rows[name] = vec
        groups.append(
            Group(
                id=gid,
                image_ids=image_ids,
                caption_ids=caption_ids,
                ground_truth=identity_matching(m),
            )
        )
    dataset = GroupedDataset(groups=tuple(groups), shape=config.shape)
    return dataset, EmbeddingTable(config.dim, rows)


def flatten(dataset: GroupedDataset) -> FlatDataset:
    """Discard group structure, carrying ground truth over as a global map."""
    if not dataset.has_ground_truth:
        raise ValidationError("cannot flatten a dataset without ground truth")
    image_ids: list[str] = []
    caption_ids: list[str] = []
    mapping: dict[str, str] = {}
    for group in dataset.groups:
        image_ids.extend(group.image_ids)
        caption_ids.extend(group.caption_ids)
        for i, j in enumerate(group.ground_truth):
            mapping[group.image_ids[i]] = group.caption_ids[j]
    if len(set(image_ids)) != len(image_ids) or len(set(caption_ids)) != len(
        caption_ids
    ):
        raise ValidationError("duplicate id across groups; cannot flatten")
    return FlatDataset(
        image_ids=tuple(image_ids),
        caption_ids=tuple(caption_ids),
        ground_truth=mapping,
    )


def raw_group_score(config: SynthConfig) -> float:
    """Mean raw group score (percent) of the identity adapter on a config."""
    from .scorer import AdapterParams
    from .ttm import _grouped_metrics, _score_all, _stack_dataset

    dataset, table = generate(config)
    stacks = _stack_dataset(dataset, table)
    scores = _score_all(AdapterParams.identity(config.dim), stacks)
    return _grouped_metrics(scores, stacks)["group_score"]


def calibrate_noise(
    config: SynthConfig,
    low: float = 10.0,
    high: float = 30.0,
    max_rounds: int = 20,
) -> float:
    """Smallest noise level (coarsely) at which the identity adapter's raw
    group score lands in [low, high] percent.

    The score decreases statistically monotonically in noise toward the
    random-guessing value, so the search bisects on the first crossing below
    `high`; preferring minimal noise keeps as much recoverable signal in the
    data as the band allows.
    """
    lo, hi = 0.05, 64.0
    score_lo = raw_group_score(_with_noise(config, lo))
    if score_lo <= high:
        if score_lo >= low:
            return lo
        raise ValidationError("configuration too hard even at minimal noise")
    score_hi = raw_group_score(_with_noise(config, hi))
    if score_hi > high:
        raise ValidationError("configuration too easy even at maximal noise")
    for _ in range(max_rounds):
        mid = (lo + hi) / 2.0
        if raw_group_score(_with_noise(config, mid)) > high:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-3 * hi:
            break
    score = raw_group_score(_with_noise(config, hi))
    if not low <= score <= high:
        raise ValidationError(
            f"noise calibration landed outside [{low}, {high}]: {score:.2f}"
        )
    return hi


def _with_noise(config: SynthConfig, noise: float) -> SynthConfig:
    return replace(config, noise=noise)

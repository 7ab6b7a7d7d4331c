"""The learnable scoring head over frozen embeddings, and its training step.

The score of an (image, caption) pair is

    temperature * cosine(image_map @ u, caption_map @ v) + bias

with both linear maps, the log-temperature, and the bias trainable. Training
minimizes a pairwise sigmoid loss over every within-group pair (a softmax
contrastive loss is available behind ``TrainConfig.loss``) with an
adaptive-moment optimizer using decoupled weight decay on the two maps.
Gradients are computed analytically; everything is plain numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import EmbeddingTable, Group, ValidationError

SIGMOID_PAIRWISE = "sigmoid_pairwise"
SOFTMAX_CONTRASTIVE = "softmax_contrastive"


class DegenerateEmbeddingError(ValidationError):
    """A mapped embedding has zero norm, so its cosine is undefined."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class AdapterParams:
    """Trainable scorer state: two d x d maps plus temperature and bias."""

    image_map: np.ndarray
    caption_map: np.ndarray
    log_temperature: float
    bias: float

    @classmethod
    def identity(
        cls, dim: int, temperature: float = 10.0, bias: float = -10.0
    ) -> "AdapterParams":
        if temperature <= 0:
            raise ValidationError("temperature must be positive")
        return cls(
            image_map=np.eye(dim, dtype=np.float64),
            caption_map=np.eye(dim, dtype=np.float64),
            log_temperature=math.log(temperature),
            bias=float(bias),
        )

    @property
    def dim(self) -> int:
        return self.image_map.shape[0]

    @property
    def temperature(self) -> float:
        return math.exp(self.log_temperature)

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            image_map=self.image_map.copy(),
            caption_map=self.caption_map.copy(),
            log_temperature=self.log_temperature,
            bias=self.bias,
        )

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.image_map))
            and np.all(np.isfinite(self.caption_map))
            and math.isfinite(self.log_temperature)
            and math.isfinite(self.bias)
        )


@dataclass
class AdapterGrads:
    """Gradient (or moment accumulator) shaped like AdapterParams."""

    image_map: np.ndarray
    caption_map: np.ndarray
    log_temperature: float = 0.0
    bias: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> "AdapterGrads":
        return cls(
            image_map=np.zeros((dim, dim), dtype=np.float64),
            caption_map=np.zeros((dim, dim), dtype=np.float64),
        )


@dataclass
class TrainConfig:
    """Hyperparameters for one finetuning call.

    The learning rate follows a cosine decay toward zero across each call's
    steps, starting from learning_rate scaled by lr_restart_factor**(t-1) at
    iteration t. Batches are counted in groups.
    """

    epochs: int = 20
    batch_size: int = 50
    learning_rate: float = 0.001
    lr_restart_factor: float = 0.95
    reset_optimizer_state: bool = True
    seed: int = 0
    loss: str = SIGMOID_PAIRWISE

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0 < self.lr_restart_factor <= 1:
            raise ValidationError("lr_restart_factor must be in (0, 1]")
        if self.loss not in (SIGMOID_PAIRWISE, SOFTMAX_CONTRASTIVE):
            raise ValidationError(f"unknown loss '{self.loss}'")


@dataclass
class OptimizerState:
    """Adaptive-moment state with decoupled weight decay on the linear maps."""

    first_moment: AdapterGrads
    second_moment: AdapterGrads
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    base_lr: float = 0.001
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, dim: int, base_lr: float, **kwargs) -> "OptimizerState":
        return cls(
            first_moment=AdapterGrads.zeros(dim),
            second_moment=AdapterGrads.zeros(dim),
            base_lr=base_lr,
            **kwargs,
        )


def adamw_step(
    params: AdapterParams,
    state: OptimizerState,
    grads: AdapterGrads,
    lr: Optional[float] = None,
) -> None:
    """One in-place update. Weight decay applies to the maps only."""
    if lr is None:
        lr = state.base_lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    for name in ("image_map", "caption_map"):
        p = getattr(params, name)
        g = getattr(grads, name)
        m = getattr(state.first_moment, name)
        v = getattr(state.second_moment, name)
        p *= 1.0 - lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)

    for name in ("log_temperature", "bias"):
        g = getattr(grads, name)
        m = state.beta1 * getattr(state.first_moment, name) + (1.0 - state.beta1) * g
        v = state.beta2 * getattr(state.second_moment, name) + (1.0 - state.beta2) * g * g
        setattr(state.first_moment, name, m)
        setattr(state.second_moment, name, v)
        update = lr * (m / bc1) / (math.sqrt(v / bc2) + state.epsilon)
        setattr(params, name, getattr(params, name) - update)


def score_pair(params: AdapterParams, u: np.ndarray, v: np.ndarray) -> float:
    """Scaled cosine similarity of one mapped image/caption embedding pair."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    p = params.image_map @ u
    q = params.caption_map @ v
    pn = float(np.linalg.norm(p))
    qn = float(np.linalg.norm(q))
    if pn == 0.0 or qn == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm mapped vector")
    cos = float((p / pn) @ (q / qn))
    return params.temperature * cos + params.bias


def _forward_stack(params: AdapterParams, images: np.ndarray, captions: np.ndarray):
    """Score a (b, m, d) image stack against a (b, k, d) caption stack.

    Returns the (b, m, k) score tensor plus the intermediates needed for the
    backward pass.
    """
    mapped_i = images @ params.image_map.T
    mapped_c = captions @ params.caption_map.T
    norm_i = np.linalg.norm(mapped_i, axis=-1, keepdims=True)
    norm_c = np.linalg.norm(mapped_c, axis=-1, keepdims=True)
    if np.any(norm_i == 0.0) or np.any(norm_c == 0.0):
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm mapped vector")
    unit_i = mapped_i / norm_i
    unit_c = mapped_c / norm_c
    cos = unit_i @ unit_c.transpose(0, 2, 1)
    temperature = params.temperature
    scores = temperature * cos + params.bias
    cache = (unit_i, unit_c, norm_i, norm_c, cos, temperature)
    return scores, cache


def _backward_stack(
    images: np.ndarray,
    captions: np.ndarray,
    cache,
    d_scores: np.ndarray,
    grads: AdapterGrads,
) -> None:
    """Accumulate parameter gradients for d(loss)/d(scores) into `grads`."""
    unit_i, unit_c, norm_i, norm_c, cos, temperature = cache
    weighted = temperature * d_scores
    d_unit_i = weighted @ unit_c
    d_unit_c = weighted.transpose(0, 2, 1) @ unit_i
    # chain through row normalization: (I - xx^T)/|x| applied rowwise
    d_mapped_i = (d_unit_i - (d_unit_i * unit_i).sum(-1, keepdims=True) * unit_i) / norm_i
    d_mapped_c = (d_unit_c - (d_unit_c * unit_c).sum(-1, keepdims=True) * unit_c) / norm_c
    grads.image_map += np.einsum("bme,bmd->ed", d_mapped_i, images)
    grads.caption_map += np.einsum("bke,bkd->ed", d_mapped_c, captions)
    grads.log_temperature += float(temperature * (d_scores * cos).sum())
    grads.bias += float(d_scores.sum())


def score_group(
    params: AdapterParams, group: Group, table: EmbeddingTable
) -> np.ndarray:
    """Similarity matrix of one group: entry (i, j) scores image i vs caption j."""
    images = table.stack(group.image_ids)[None]
    captions = table.stack(group.caption_ids)[None]
    scores, _ = _forward_stack(params, images, captions)
    return scores[0]


def _stack_batch(batch: Sequence[tuple[Group, tuple[int, ...]]], table: EmbeddingTable):
    """Partition a pseudo-label batch by group shape and stack embeddings."""
    partitions: dict[tuple[int, int], list[tuple[Group, tuple[int, ...]]]] = {}
    for group, assignment in batch:
        shape = group.shape
        partitions.setdefault((shape.rows, shape.cols), []).append((group, assignment))
    stacked = []
    for (m, k), items in partitions.items():
        images = np.stack([table.stack(g.image_ids) for g, _ in items])
        captions = np.stack([table.stack(g.caption_ids) for g, _ in items])
        assign = np.array([a for _, a in items], dtype=np.intp)
        stacked.append((m, k, images, captions, assign))
    return stacked


def _positive_mask(m: int, k: int, assign: np.ndarray) -> np.ndarray:
    mask = np.zeros((assign.shape[0], m, k), dtype=bool)
    rows = np.arange(m)
    mask[np.arange(assign.shape[0])[:, None], rows[None, :], assign] = True
    return mask


def pseudo_label_loss(
    params: AdapterParams,
    batch: Sequence[tuple[Group, tuple[int, ...]]],
    table: EmbeddingTable,
    loss: str = SIGMOID_PAIRWISE,
) -> tuple[float, AdapterGrads]:
    """Loss and analytic gradient over all within-group pairs of a batch.

    sigmoid_pairwise: mean over every (image, caption) pair of
    -log sigmoid(z * score), z = +1 on matched pairs and -1 elsewhere.

    softmax_contrastive: mean cross-entropy of each image's row over its
    captions (plus each caption's column over images for square groups).
    """
    if not batch:
        raise ValidationError("pseudo-label batch is empty")
    stacked = _stack_batch(batch, table)

    if loss == SIGMOID_PAIRWISE:
        n_terms = sum(images.shape[0] * m * k for m, k, images, _, _ in stacked)
    elif loss == SOFTMAX_CONTRASTIVE:
        n_terms = sum(
            images.shape[0] * (m + (k if m == k else 0))
            for m, k, images, _, _ in stacked
        )
    else:
        raise ValidationError(f"unknown loss '{loss}'")

    grads = AdapterGrads.zeros(params.dim)
    loss_sum = 0.0
    for m, k, images, captions, assign in stacked:
        scores, cache = _forward_stack(params, images, captions)
        if loss == SIGMOID_PAIRWISE:
            signs = np.where(_positive_mask(m, k, assign), 1.0, -1.0)
            loss_sum += float(np.logaddexp(0.0, -signs * scores).sum())
            d_scores = -signs * expit(-signs * scores) / n_terms
        else:
            loss_part, d_scores = _softmax_terms(scores, assign)
            loss_sum += loss_part
            d_scores = d_scores / n_terms
        _backward_stack(images, captions, cache, d_scores, grads)

    return loss_sum / n_terms, grads


def _softmax_terms(scores: np.ndarray, assign: np.ndarray):
    """Unnormalized cross-entropy sum and score gradient for one shape block."""
    b, m, k = scores.shape
    batch_idx = np.arange(b)[:, None]
    rows = np.arange(m)[None, :]

    shifted = scores - scores.max(axis=2, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=2, keepdims=True)) + scores.max(
        axis=2, keepdims=True
    )
    row_ce = (log_z[..., 0] - scores[batch_idx, rows, assign]).sum()
    d_scores = np.exp(scores - log_z)
    d_scores[batch_idx, rows, assign] -= 1.0

    if m == k:
        inverse = np.argsort(assign, axis=1)
        scores_t = scores.transpose(0, 2, 1)
        cols = np.arange(k)[None, :]
        shifted_t = scores_t - scores_t.max(axis=2, keepdims=True)
        log_z_t = np.log(np.exp(shifted_t).sum(axis=2, keepdims=True)) + scores_t.max(
            axis=2, keepdims=True
        )
        col_ce = (log_z_t[..., 0] - scores_t[batch_idx, cols, inverse]).sum()
        d_t = np.exp(scores_t - log_z_t)
        d_t[batch_idx, cols, inverse] -= 1.0
        return float(row_ce + col_ce), d_scores + d_t.transpose(0, 2, 1)

    return float(row_ce), d_scores


def pair_batch_loss(
    params: AdapterParams,
    images: np.ndarray,
    captions: np.ndarray,
    loss: str = SIGMOID_PAIRWISE,
) -> tuple[float, AdapterGrads]:
    """Loss over matched (image, caption) pairs with in-batch negatives.

    The batch is scored as one square block: pair i against caption j for all
    j in the batch, positives on the diagonal.
    """
    images = np.asarray(images, dtype=np.float64)
    captions = np.asarray(captions, dtype=np.float64)
    if images.shape != captions.shape or images.ndim != 2:
        raise ValidationError("pair batch needs matching (n, d) image/caption stacks")
    n = images.shape[0]
    scores, cache = _forward_stack(params, images[None], captions[None])
    grads = AdapterGrads.zeros(params.dim)
    assign = np.arange(n, dtype=np.intp)[None]
    if loss == SIGMOID_PAIRWISE:
        n_terms = n * n
        signs = np.where(_positive_mask(n, n, assign), 1.0, -1.0)
        loss_sum = float(np.logaddexp(0.0, -signs * scores).sum())
        d_scores = -signs * expit(-signs * scores) / n_terms
    elif loss == SOFTMAX_CONTRASTIVE:
        n_terms = 2 * n
        loss_sum, d_scores = _softmax_terms(scores, assign)
        d_scores = d_scores / n_terms
    else:
        raise ValidationError(f"unknown loss '{loss}'")
    _backward_stack(images[None], captions[None], cache, d_scores, grads)
    return loss_sum / n_terms, grads


def _run_updates(
    params: AdapterParams,
    optimizer_state: OptimizerState,
    n_items: int,
    batch_loss: Callable[[AdapterParams, np.ndarray], tuple[float, AdapterGrads]],
    config: TrainConfig,
    iteration: int,
    rng: np.random.Generator,
) -> None:
    """Shared mini-batch loop: shuffled epochs, cosine-decayed learning rate."""
    base_lr = config.learning_rate * config.lr_restart_factor ** (iteration - 1)
    batches_per_epoch = math.ceil(n_items / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n_items)
        for b in range(batches_per_epoch):
            picked = order[b * config.batch_size : (b + 1) * config.batch_size]
            loss, grads = batch_loss(params, picked)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at iteration {iteration}, step {step}: {loss}"
                )
            lr = 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))
            adamw_step(params, optimizer_state, grads, lr)
            step += 1
    if not params.is_finite():
        raise DivergenceError(f"non-finite parameters after iteration {iteration}")


def finetune(
    params: AdapterParams,
    optimizer_state: Optional[OptimizerState],
    pseudo_labels: Sequence[tuple[Group, tuple[int, ...]]],
    config: TrainConfig,
    table: EmbeddingTable,
    iteration: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> tuple[AdapterParams, OptimizerState]:
    """Run config.epochs of shuffled mini-batch updates on the pseudo-labels.

    The learning rate decays along a cosine from the iteration-scaled base
    rate toward zero across this call's steps. Deterministic given the rng
    seed; the caller decides whether to pass a carried-over optimizer state or
    let a fresh one be created.
    """
    labels = list(pseudo_labels)
    if not labels:
        raise ValidationError("cannot finetune on an empty pseudo-label set")
    params = params.copy()
    if optimizer_state is None:
        optimizer_state = OptimizerState.fresh(params.dim, base_lr=config.learning_rate)
    if rng is None:
        rng = np.random.default_rng([config.seed, iteration])

    def batch_loss(p: AdapterParams, picked: np.ndarray):
        return pseudo_label_loss(p, [labels[i] for i in picked], table, loss=config.loss)

    _run_updates(params, optimizer_state, len(labels), batch_loss, config, iteration, rng)
    return params, optimizer_state


def finetune_pairs(
    params: AdapterParams,
    optimizer_state: Optional[OptimizerState],
    images: np.ndarray,
    captions: np.ndarray,
    config: TrainConfig,
    iteration: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> tuple[AdapterParams, OptimizerState]:
    """finetune() for flat pair supervision: batches are pairs, negatives are
    the other captions of the batch. Used by the global matching loop."""
    images = np.asarray(images, dtype=np.float64)
    captions = np.asarray(captions, dtype=np.float64)
    if len(images) == 0:
        raise ValidationError("cannot finetune on an empty pair set")
    params = params.copy()
    if optimizer_state is None:
        optimizer_state = OptimizerState.fresh(params.dim, base_lr=config.learning_rate)
    if rng is None:
        rng = np.random.default_rng([config.seed, iteration])

    def batch_loss(p: AdapterParams, picked: np.ndarray):
        return pair_batch_loss(p, images[picked], captions[picked], loss=config.loss)

    _run_updates(params, optimizer_state, len(images), batch_loss, config, iteration, rng)
    return params, optimizer_state

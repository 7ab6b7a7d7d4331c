"""Shared domain types for grouped image-caption matching data.

Everything downstream (metrics, solvers, the self-training loop) works on
these types. All of them are plain immutable values; similarity matrices are
ordinary 2-D float64 numpy arrays and matchings are tuples of column indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np


class ValidationError(ValueError):
    """A dataset, matching, matrix, or embedding table violates an invariant."""


@dataclass(frozen=True)
class GroupShape:
    """Dimensions of one group: `rows` images by `cols` captions, rows <= cols."""

    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(
                f"invalid shape {self.rows}x{self.cols}: sides must be >= 1"
            )
        if self.rows > self.cols:
            raise ValidationError(
                f"invalid shape {self.rows}x{self.cols}: images may not outnumber captions"
            )

    @property
    def is_square(self) -> bool:
        return self.rows == self.cols


# A matching assigns caption (column) indices to image (row) indices:
# assignment[i] is the column matched to row i. Injective by contract.
Matching = tuple


def identity_matching(rows: int) -> tuple[int, ...]:
    return tuple(range(rows))


def check_matching(assignment: Sequence[int], shape: GroupShape) -> tuple[int, ...]:
    """Validate an assignment against a shape and return it as a tuple of ints."""
    out = tuple(int(j) for j in assignment)
    if len(out) != shape.rows:
        raise ValidationError(
            f"matching length {len(out)} does not equal row count {shape.rows}"
        )
    if any(j < 0 or j >= shape.cols for j in out):
        raise ValidationError(f"matching column index out of range [0, {shape.cols})")
    if len(set(out)) != len(out):
        raise ValidationError("non-injective matching: repeated column index")
    return out


def invert_matching(assignment: Sequence[int]) -> tuple[int, ...]:
    """Inverse of a square bijection: result[assignment[i]] = i."""
    n = len(assignment)
    if sorted(assignment) != list(range(n)):
        raise ValidationError("only square bijective matchings can be inverted")
    inverse = [0] * n
    for i, j in enumerate(assignment):
        inverse[j] = i
    return tuple(inverse)


def compose_matchings(outer: Sequence[int], inner: Sequence[int]) -> tuple[int, ...]:
    """(outer o inner)[i] = outer[inner[i]]."""
    return tuple(outer[j] for j in inner)


def check_similarity_matrix(
    entries: np.ndarray, shape: Optional[GroupShape] = None
) -> np.ndarray:
    """Validate a score grid: 2-D, finite, rows <= cols; returns float64 array."""
    s = np.asarray(entries, dtype=np.float64)
    if s.ndim != 2:
        raise ValidationError(f"similarity matrix must be 2-D, got ndim={s.ndim}")
    if not np.all(np.isfinite(s)):
        raise ValidationError("non-finite entry in similarity matrix")
    m, k = s.shape
    if shape is not None and (m, k) != (shape.rows, shape.cols):
        raise ValidationError(
            f"shape mismatch: matrix is {m}x{k}, expected {shape.rows}x{shape.cols}"
        )
    if shape is None:
        GroupShape(m, k)  # raises on m > k or empty sides
    return s


def _as_str_tuple(ids: Sequence[str]) -> tuple[str, ...]:
    return tuple(str(i) for i in ids)


@dataclass(frozen=True)
class Group:
    """One evaluation unit: image ids, caption ids, and an optional hidden pairing.

    `ground_truth[i]` is the caption index correctly paired with image i. By
    convention exported datasets order entities so the truth is the identity
    assignment, but a permuted pairing remains expressible.
    """

    id: str
    image_ids: tuple[str, ...]
    caption_ids: tuple[str, ...]
    ground_truth: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_ids", _as_str_tuple(self.image_ids))
        object.__setattr__(self, "caption_ids", _as_str_tuple(self.caption_ids))
        if self.ground_truth is not None:
            object.__setattr__(
                self, "ground_truth", tuple(int(j) for j in self.ground_truth)
            )

    @property
    def shape(self) -> GroupShape:
        return GroupShape(len(self.image_ids), len(self.caption_ids))


@dataclass(frozen=True)
class GroupedDataset:
    """A collection of groups sharing one shape."""

    groups: tuple[Group, ...]
    shape: GroupShape

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", tuple(self.groups))

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def has_ground_truth(self) -> bool:
        return all(g.ground_truth is not None for g in self.groups)


@dataclass(frozen=True)
class FlatDataset:
    """A single global matching instance: all images against all captions."""

    image_ids: tuple[str, ...]
    caption_ids: tuple[str, ...]
    ground_truth: Optional[dict[str, str]] = None  # image id -> caption id

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_ids", _as_str_tuple(self.image_ids))
        object.__setattr__(self, "caption_ids", _as_str_tuple(self.caption_ids))
        if len(self.image_ids) > len(self.caption_ids):
            raise ValidationError(
                "invalid flat dataset: more images than captions"
            )
        if self.ground_truth is not None:
            targets = list(self.ground_truth.values())
            if len(set(targets)) != len(targets):
                raise ValidationError("non-injective matching: flat ground truth")


class EmbeddingTable:
    """Fixed-width vectors keyed by entity id; vectors are read-only float64."""

    def __init__(self, dim: int, rows: Mapping[str, np.ndarray]):
        if dim < 1:
            raise ValidationError(f"embedding dim must be >= 1, got {dim}")
        self.dim = int(dim)
        self.rows: dict[str, np.ndarray] = {}
        for entity_id, vec in rows.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (self.dim,):
                raise ValidationError(
                    f"embedding for id '{entity_id}' has shape {arr.shape}, "
                    f"expected ({self.dim},)"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite entry in embedding '{entity_id}'")
            arr = arr.copy()
            arr.flags.writeable = False
            self.rows[str(entity_id)] = arr

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.rows

    def vector(self, entity_id: str) -> np.ndarray:
        try:
            return self.rows[entity_id]
        except KeyError:
            raise ValidationError(f"unresolvable id '{entity_id}'") from None

    def stack(self, ids: Sequence[str]) -> np.ndarray:
        """Stack vectors for `ids` into a (len(ids), dim) matrix."""
        return np.stack([self.vector(i) for i in ids])


# A score store maps group id -> similarity matrix (the score-file ingestion path).
ScoreStore = Mapping[str, np.ndarray]
Store = Union[EmbeddingTable, ScoreStore]


def validate_dataset(dataset: GroupedDataset, store: Optional[Store] = None) -> None:
    """Check every dataset invariant, raising ValidationError at the first violation.

    With an EmbeddingTable store, additionally checks that every entity id
    resolves; with a score store (mapping group id -> matrix), checks coverage
    and per-group matrix shape/finiteness.
    """
    shape = dataset.shape
    for group in dataset.groups:
        if len(group.image_ids) != shape.rows or len(group.caption_ids) != shape.cols:
            raise ValidationError(
                f"shape mismatch: group '{group.id}' is "
                f"{len(group.image_ids)}x{len(group.caption_ids)}, "
                f"expected {shape.rows}x{shape.cols}"
            )
        ids = group.image_ids + group.caption_ids
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate id within group '{group.id}'")
        if group.ground_truth is not None:
            try:
                check_matching(group.ground_truth, shape)
            except ValidationError as exc:
                raise ValidationError(f"group '{group.id}': {exc}") from None
        if isinstance(store, EmbeddingTable):
            for entity_id in ids:
                if entity_id not in store:
                    raise ValidationError(
                        f"unresolvable id '{entity_id}' in group '{group.id}'"
                    )
        elif store is not None:
            if group.id not in store:
                raise ValidationError(f"no scores for group '{group.id}'")
            check_similarity_matrix(store[group.id], shape)

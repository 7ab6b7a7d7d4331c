"""File formats and ingestion.

Formats (all bit-exact round-trippable):

- Dataset manifest: UTF-8 JSON with top-level ``shape: {m, k}`` and
  ``groups: [{id, image_ids, caption_ids, ground_truth?}]``.
- Embedding table: a JSON sidecar ``{magic: "TTME1", dim, count, ids}``
  next to a raw binary of count x dim little-endian float32 values in id
  order. The binary lives at the sidecar's path with a ``.bin`` suffix.
- Similarity scores: CSV with header ``group_id,row,col,score``, exactly one
  line per (group, row, col). Parsed floats are taken verbatim.
- Run report: JSON mirroring RunReport with full round-trip float precision.
  Wall-clock time is not serialized, so identically seeded runs write
  byte-identical reports.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Union

import numpy as np

from .core import (
    EmbeddingTable,
    Group,
    GroupedDataset,
    GroupShape,
    ValidationError,
    validate_dataset,
)
from .ttm import IterationStats, RunReport

EMBEDDING_MAGIC = "TTME1"


class FormatError(Exception):
    """A file is malformed or does not match its declared format."""


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


def dataset_to_dict(dataset: GroupedDataset) -> dict:
    return {
        "shape": {"m": dataset.shape.rows, "k": dataset.shape.cols},
        "groups": [
            {
                "id": g.id,
                "image_ids": list(g.image_ids),
                "caption_ids": list(g.caption_ids),
                **(
                    {"ground_truth": list(g.ground_truth)}
                    if g.ground_truth is not None
                    else {}
                ),
            }
            for g in dataset.groups
        ],
    }


def dataset_from_dict(payload: dict) -> GroupedDataset:
    try:
        shape = GroupShape(int(payload["shape"]["m"]), int(payload["shape"]["k"]))
        groups = tuple(
            Group(
                id=str(entry["id"]),
                image_ids=tuple(entry["image_ids"]),
                caption_ids=tuple(entry["caption_ids"]),
                ground_truth=(
                    tuple(entry["ground_truth"])
                    if entry.get("ground_truth") is not None
                    else None
                ),
            )
            for entry in payload["groups"]
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest: missing or bad field {exc}") from None
    dataset = GroupedDataset(groups=groups, shape=shape)
    validate_dataset(dataset)
    return dataset


def save_manifest(dataset: GroupedDataset, path: Union[str, Path]) -> None:
    Path(path).write_text(
        json.dumps(dataset_to_dict(dataset), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_manifest(path: Union[str, Path]) -> GroupedDataset:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON in {path}: {exc}") from None
    return dataset_from_dict(payload)


# ---------------------------------------------------------------------------
# Embedding tables
# ---------------------------------------------------------------------------


def _binary_path(sidecar: Path) -> Path:
    return sidecar.with_suffix(".bin")


def save_embeddings(table: EmbeddingTable, sidecar_path: Union[str, Path]) -> None:
    """Write the sidecar JSON and the float32 binary next to it."""
    sidecar = Path(sidecar_path)
    ids = sorted(table.rows)
    sidecar.write_text(
        json.dumps(
            {
                "magic": EMBEDDING_MAGIC,
                "dim": table.dim,
                "count": len(ids),
                "ids": ids,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    matrix = np.stack([table.rows[i] for i in ids]).astype("<f4")
    _binary_path(sidecar).write_bytes(matrix.tobytes(order="C"))


def load_embeddings(sidecar_path: Union[str, Path]) -> EmbeddingTable:
    sidecar = Path(sidecar_path)
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed embedding sidecar {sidecar}: {exc}") from None
    if meta.get("magic") != EMBEDDING_MAGIC:
        raise FormatError(
            f"bad magic in {sidecar}: expected '{EMBEDDING_MAGIC}', got {meta.get('magic')!r}"
        )
    try:
        dim = int(meta["dim"])
        count = int(meta["count"])
        ids = [str(i) for i in meta["ids"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed embedding sidecar {sidecar}: {exc}") from None
    if len(ids) != count:
        raise FormatError(
            f"embedding sidecar {sidecar}: count {count} != {len(ids)} ids"
        )
    raw = _binary_path(sidecar).read_bytes()
    expected_bytes = count * dim * 4
    if len(raw) != expected_bytes:
        raise FormatError(
            f"embedding binary {_binary_path(sidecar)}: {len(raw)} bytes, "
            f"expected {expected_bytes}"
        )
    matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
    return EmbeddingTable(dim, {i: matrix[idx] for idx, i in enumerate(ids)})


# ---------------------------------------------------------------------------
# Similarity score files
# ---------------------------------------------------------------------------


def save_scores(
    store: dict[str, np.ndarray], dataset: GroupedDataset, path: Union[str, Path]
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_id", "row", "col", "score"])
        for group in dataset.groups:
            matrix = np.asarray(store[group.id])
            for i in range(dataset.shape.rows):
                for j in range(dataset.shape.cols):
                    writer.writerow([group.id, i, j, repr(float(matrix[i, j]))])


def load_scores(
    path: Union[str, Path], dataset: GroupedDataset
) -> dict[str, np.ndarray]:
    """Parse a score CSV into per-group matrices, enforcing exact coverage."""
    m, k = dataset.shape.rows, dataset.shape.cols
    known = {g.id for g in dataset.groups}
    store = {
        g.id: np.full((m, k), np.nan, dtype=np.float64) for g in dataset.groups
    }
    seen: set[tuple[str, int, int]] = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["group_id", "row", "col", "score"]:
            raise FormatError(
                f"{path}: expected header 'group_id,row,col,score', got {header}"
            )
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != 4:
                raise FormatError(f"{path} line {lineno}: expected 4 fields")
            gid, row_s, col_s, score_s = fields
            try:
                row, col, score = int(row_s), int(col_s), float(score_s)
            except ValueError:
                raise FormatError(f"{path} line {lineno}: unparseable row") from None
            if gid not in known:
                raise FormatError(f"{path} line {lineno}: unknown group '{gid}'")
            if not (0 <= row < m and 0 <= col < k):
                raise FormatError(
                    f"{path} line {lineno}: pair ({row}, {col}) outside {m}x{k}"
                )
            key = (gid, row, col)
            if key in seen:
                raise FormatError(
                    f"{path} line {lineno}: duplicate pair ({row}, {col}) "
                    f"for group '{gid}'"
                )
            seen.add(key)
            store[gid][row, col] = score
    for group in dataset.groups:
        missing = np.argwhere(np.isnan(store[group.id]))
        if missing.size:
            i, j = missing[0]
            raise FormatError(
                f"{path}: missing pair ({i}, {j}) for group '{group.id}'"
            )
    validate_dataset(dataset, store)
    return store


# ---------------------------------------------------------------------------
# Run reports
# ---------------------------------------------------------------------------


def report_to_json(report: RunReport) -> str:
    payload = {
        "config": report.config,
        "seed": report.seed,
        "baseline": report.baseline,
        "iterations": [vars(s) for s in report.iterations],
        "final": report.final,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def save_report(report: RunReport, path: Union[str, Path]) -> None:
    Path(path).write_text(report_to_json(report), encoding="utf-8")


def load_report(path: Union[str, Path]) -> RunReport:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed report {path}: {exc}") from None
    try:
        return RunReport(
            config=payload["config"],
            seed=payload["seed"],
            baseline=payload["baseline"],
            iterations=[IterationStats(**entry) for entry in payload["iterations"]],
            final=payload["final"],
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed report {path}: {exc}") from None

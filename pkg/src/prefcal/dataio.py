"""Ingestion of vote tables and embeddings, consensus filtering and splitting."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from prefcal.errors import IngestionError, ParameterError
from prefcal.labels import CATEGORIES, Label

CLIP_DIM = 768
PCA_DIM = 8

# Majority ties are resolved in this order; consensus filtering drops them anyway.
_LABEL_ORDER = (Label.LEFT, Label.RIGHT, Label.EQUAL)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    clip_embedding: np.ndarray
    pca_embedding: np.ndarray | None = None

    def __post_init__(self):
        if self.clip_embedding.shape != (CLIP_DIM,):
            raise ParameterError(
                f"{self.image_id}: clip_embedding must have length {CLIP_DIM}, "
                f"got {self.clip_embedding.shape}"
            )
        if self.pca_embedding is not None and self.pca_embedding.shape != (PCA_DIM,):
            raise ParameterError(f"{self.image_id}: pca_embedding must have length {PCA_DIM}")


@dataclass(frozen=True)
class ComparisonRecord:
    left_id: str
    right_id: str
    category: str
    label: Label
    vote_count: int
    agreement: float

    def __post_init__(self):
        if self.left_id == self.right_id:
            raise ParameterError(f"comparison of {self.left_id!r} with itself")
        if self.vote_count < 1:
            raise ParameterError("vote_count must be positive")
        if not 0.0 < self.agreement <= 1.0:
            raise ParameterError(f"agreement {self.agreement} outside (0, 1]")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.category, self.left_id, self.right_id)

    @property
    def pair_identity(self) -> tuple[str, str, str]:
        """Orientation-free identity; a pair and its reverse share it."""
        a, b = sorted((self.left_id, self.right_id))
        return (self.category, a, b)

    def to_dict(self) -> dict:
        return {
            "left_id": self.left_id,
            "right_id": self.right_id,
            "category": self.category,
            "label": self.label.value,
            "vote_count": self.vote_count,
            "agreement": self.agreement,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ComparisonRecord:
        return cls(
            left_id=str(d["left_id"]),
            right_id=str(d["right_id"]),
            category=str(d["category"]),
            label=Label.parse(d["label"]),
            vote_count=int(d["vote_count"]),
            agreement=float(d["agreement"]),
        )


@dataclass(frozen=True)
class DatasetSplit:
    reference: list[ComparisonRecord]
    pool: list[ComparisonRecord]
    seed: int
    ratio: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.ratio,
            "reference": [r.to_dict() for r in self.reference],
            "pool": [r.to_dict() for r in self.pool],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> DatasetSplit:
        return cls(
            reference=[ComparisonRecord.from_dict(r) for r in d["reference"]],
            pool=[ComparisonRecord.from_dict(r) for r in d["pool"]],
            seed=int(d["seed"]),
            ratio=float(d["ratio"]),
        )


@dataclass(frozen=True)
class Schema:
    """Binds the columns of a vote table to the fields we need.

    ``outcome_map`` and ``category_map`` translate raw tokens (compared after
    stripping and lower-casing) into labels and category names.
    """

    left: str = "left_id"
    right: str = "right_id"
    category: str = "category"
    outcome: str = "winner"
    outcome_map: Mapping[str, str] = field(
        default_factory=lambda: {"left": "left", "right": "right", "equal": "equal"}
    )
    category_map: Mapping[str, str] = field(default_factory=lambda: {c: c for c in CATEGORIES})
    delimiter: str = ","


@dataclass
class IngestResult:
    records: list[ComparisonRecord]
    rejects: list[tuple[int, str]]

    def rejects_report(self) -> str:
        return "".join(f"{line_no}: {reason}\n" for line_no, reason in self.rejects)


def parse_comparisons(stream: BinaryIO | bytes | str, schema: Schema | None = None) -> IngestResult:
    """Aggregate a vote table into one record per (left, right, category).

    Each data row is one vote. Rows with unknown categories or outcomes, or
    missing keys, are collected in ``rejects`` as ``(line_no, reason)`` where
    the header is line 1.
    """
    schema = schema or Schema()
    text = _read_text(stream)
    if not text.strip():
        return IngestResult([], [])

    reader = csv.reader(io.StringIO(text), delimiter=schema.delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except csv.Error as exc:
        raise IngestionError(f"cannot parse header: {exc}") from exc
    required = (schema.left, schema.right, schema.category, schema.outcome)
    missing = [c for c in required if c not in header]
    if missing:
        raise IngestionError(f"header lacks required columns: {', '.join(missing)}")
    idx = {name: header.index(name) for name in required}
    outcome_map = {k.strip().lower(): Label.parse(v) for k, v in schema.outcome_map.items()}
    category_map = {k.strip().lower(): v for k, v in schema.category_map.items()}

    votes: dict[tuple[str, str, str], list[int]] = defaultdict(lambda: [0, 0, 0])
    rejects: list[tuple[int, str]] = []
    width = max(idx.values()) + 1
    line_no = 1
    try:
        for row in reader:
            line_no = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < width:
                rejects.append((line_no, f"expected at least {width} columns, got {len(row)}"))
                continue
            left = row[idx[schema.left]].strip()
            right = row[idx[schema.right]].strip()
            cat_token = row[idx[schema.category]].strip()
            out_token = row[idx[schema.outcome]].strip()
            if not left or not right:
                rejects.append((line_no, "empty image key"))
                continue
            if left == right:
                rejects.append((line_no, f"image {left!r} compared with itself"))
                continue
            category = category_map.get(cat_token.lower())
            if category is None:
                rejects.append((line_no, f"unknown category {cat_token!r}"))
                continue
            label = outcome_map.get(out_token.lower())
            if label is None:
                rejects.append((line_no, f"unknown outcome {out_token!r}"))
                continue
            votes[(category, left, right)][_LABEL_ORDER.index(label)] += 1
    except csv.Error as exc:
        raise IngestionError(f"line {line_no}: {exc}") from exc

    records = []
    for (category, left, right) in sorted(votes):
        counts = votes[(category, left, right)]
        total = sum(counts)
        top = max(range(3), key=lambda i: (counts[i], -i))
        records.append(
            ComparisonRecord(left, right, category, _LABEL_ORDER[top], total, counts[top] / total)
        )
    return IngestResult(records, rejects)


def _read_text(stream: BinaryIO | bytes | str) -> str:
    if isinstance(stream, str):
        return stream
    try:
        raw = stream if isinstance(stream, bytes) else stream.read()
    except OSError as exc:
        raise IngestionError(f"cannot read comparisons stream: {exc}") from exc
    if isinstance(raw, str):
        return raw
    try:
        return raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise IngestionError(f"comparisons stream is not UTF-8: {exc}") from exc


def consensus_filter(
    records: Iterable[ComparisonRecord], min_votes: int = 3, min_agreement: float = 0.5
) -> list[ComparisonRecord]:
    """Keep records with at least ``min_votes`` votes and agreement strictly above ``min_agreement``."""
    if min_votes < 1:
        raise ParameterError(f"min_votes must be >= 1, got {min_votes}")
    if not 0.5 <= min_agreement <= 1.0:
        raise ParameterError(f"min_agreement must lie in [0.5, 1], got {min_agreement}")
    return [r for r in records if r.vote_count >= min_votes and r.agreement > min_agreement]


def sample_and_split(
    records: list[ComparisonRecord], sample_size: int, ratio: float, seed: int
) -> DatasetSplit:
    """Sample ``sample_size`` records and split them into reference and pool.

    Records sharing a pair identity (a pair and its reverse) always land on the
    same side, so the two sides never share an image pair.
    """
    if sample_size > len(records):
        raise ParameterError(
            f"sample_size {sample_size} exceeds the {len(records)} available records"
        )
    if sample_size < 0:
        raise ParameterError("sample_size must be non-negative")
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"ratio must lie in (0, 1), got {ratio}")

    ordered = sorted(records, key=lambda r: r.key)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ordered))[:sample_size]
    sampled = [ordered[i] for i in order]

    n_ref = int(math.floor(ratio * sample_size + 0.5))
    reference: list[ComparisonRecord] = []
    pool: list[ComparisonRecord] = []
    side: dict[tuple[str, str, str], list[ComparisonRecord]] = {}
    for rec in sampled:
        target = side.get(rec.pair_identity)
        if target is None:
            target = reference if len(reference) < n_ref else pool
            side[rec.pair_identity] = target
        target.append(rec)
    return DatasetSplit(reference=reference, pool=pool, seed=seed, ratio=ratio)


def load_embeddings(path: str | Path, fmt: str = "text") -> dict[str, np.ndarray]:
    """Read an ``image_id -> 768-vector`` sidecar.

    ``text``: one record per line, the id followed by 768 floats separated by
    whitespace or commas. ``npz``: a numpy archive with ``ids`` (N strings) and
    ``embeddings`` (N x 768).
    """
    path = Path(path)
    if fmt == "npz":
        try:
            with np.load(path, allow_pickle=False) as data:
                ids = [str(x) for x in data["ids"]]
                mat = np.asarray(data["embeddings"], dtype=np.float64)
        except (OSError, KeyError, ValueError) as exc:
            raise IngestionError(f"cannot read embeddings archive {path}: {exc}") from exc
        if mat.ndim != 2 or mat.shape != (len(ids), CLIP_DIM):
            raise IngestionError(f"{path}: embeddings must be {len(ids)} x {CLIP_DIM}, got {mat.shape}")
        out = {}
        for i, image_id in enumerate(ids):
            if image_id in out:
                raise IngestionError(f"{path}: duplicate image id {image_id!r}")
            out[image_id] = mat[i].copy()
        return out
    if fmt != "text":
        raise ParameterError(f"unknown embeddings format {fmt!r}; expected 'text' or 'npz'")

    out: dict[str, np.ndarray] = {}
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot open embeddings file {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.replace(",", " ").split()
            if not parts:
                continue
            image_id, values = parts[0], parts[1:]
            if len(values) != CLIP_DIM:
                raise IngestionError(
                    f"{path}:{line_no}: expected {CLIP_DIM} values for {image_id!r}, got {len(values)}"
                )
            if image_id in out:
                raise IngestionError(f"{path}:{line_no}: duplicate image id {image_id!r}")
            try:
                out[image_id] = np.array([float(v) for v in values])
            except ValueError as exc:
                raise IngestionError(f"{path}:{line_no}: {exc}") from exc
    return out


def write_embeddings(path: str | Path, embeddings: Mapping[str, np.ndarray], fmt: str = "text") -> None:
    path = Path(path)
    ids = sorted(embeddings)
    if fmt == "npz":
        np.savez(path, ids=np.array(ids), embeddings=np.stack([embeddings[i] for i in ids]))
        return
    with path.open("w", encoding="utf-8") as fh:
        for image_id in ids:
            fh.write(image_id + " " + " ".join(repr(float(v)) for v in embeddings[image_id]) + "\n")

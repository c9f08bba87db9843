"""Stage 1: consensus exemplar sampling and dimension-set extraction."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from prefcal import prompts
from prefcal.errors import (
    CardinalityError,
    CompositionError,
    ConsensusSamplingError,
    DuplicateNameError,
    MalformedDimensionError,
    MissingFieldError,
    NoJsonFoundError,
    ParameterError,
)
from prefcal.ratings import Rating

MIN_DIMENSIONS = 5
MAX_DIMENSIONS = 10
DIMENSION_FIELDS = ("name", "description", "high_indicator", "low_indicator")


@dataclass(frozen=True)
class Dimension:
    name: str
    description: str
    high_indicator: str
    low_indicator: str

    def __post_init__(self):
        if not self.name.strip():
            raise MissingFieldError("dimension name is empty")

    def to_dict(self) -> dict[str, str]:
        return {f: getattr(self, f) for f in DIMENSION_FIELDS}


@dataclass(frozen=True)
class DimensionSet:
    category: str
    dimensions: tuple[Dimension, ...]
    provenance: str = "manual"

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        n = len(self.dimensions)
        if not MIN_DIMENSIONS <= n <= MAX_DIMENSIONS:
            raise CardinalityError(f"expected {MIN_DIMENSIONS}-{MAX_DIMENSIONS} dimensions, got {n}")
        _check_unique([d.name for d in self.dimensions])

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def __len__(self) -> int:
        return len(self.dimensions)

    def to_dict(self) -> dict[str, Any]:
        return {
            "category": self.category,
            "dimensions": [d.to_dict() for d in self.dimensions],
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DimensionSet:
        dims = tuple(_dimension_from(item, i) for i, item in enumerate(d["dimensions"]))
        return cls(category=str(d["category"]), dimensions=dims, provenance=str(d.get("provenance", "manual")))

    def digest(self) -> str:
        """Content digest over category and dimensions (provenance excluded)."""
        body = json.dumps(
            {"category": self.category, "dimensions": [d.to_dict() for d in self.dimensions]},
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def with_provenance(self, provenance: str) -> DimensionSet:
        return DimensionSet(self.category, self.dimensions, provenance)

    def definitions(self) -> str:
        return render_definitions(self.dimensions)


def render_definitions(dims: Sequence[Dimension]) -> str:
    return "\n".join(
        f"{i}. {d.name}: {d.description} (HIGH: {d.high_indicator}; LOW: {d.low_indicator})"
        for i, d in enumerate(dims, start=1)
    )


def canonical_name(name: str) -> str:
    return name.strip().casefold()


def _check_unique(names: Sequence[str]) -> None:
    seen: dict[str, str] = {}
    for name in names:
        key = canonical_name(name)
        if key in seen:
            raise DuplicateNameError(f"duplicate dimension name {name!r} (clashes with {seen[key]!r})")
        seen[key] = name


@dataclass(frozen=True)
class ConsensusSet:
    category: str
    high: list[str]
    low: list[str]
    tau_high: float
    tau_low: float
    sigma_med: float

    @property
    def image_ids(self) -> list[str]:
        return self.high + self.low


@dataclass(frozen=True)
class ConsensusConfig:
    pct_high: float = 75.0
    pct_low: float = 25.0
    n_per_group: int = 5


def sample_consensus(
    ratings: Mapping[str, Rating], category: str, cfg: ConsensusConfig | None = None
) -> ConsensusSet:
    """Pick confidently rated high and low exemplars.

    High images satisfy ``mu > tau_high`` and ``sigma < sigma_med``; low images
    ``mu < tau_low`` and ``sigma < sigma_med``, thresholds being percentiles
    (linear interpolation) of the rating distribution. Among qualifying images
    the highest (lowest) ``mu`` are taken, ties broken by image id.
    """
    cfg = cfg or ConsensusConfig()
    if not ratings:
        raise ConsensusSamplingError("no ratings to sample from", 0, 0, cfg.n_per_group)
    ids = sorted(ratings)
    mu = np.array([ratings[i].mu for i in ids])
    sigma = np.array([ratings[i].sigma for i in ids])
    tau_high = float(np.percentile(mu, cfg.pct_high))
    tau_low = float(np.percentile(mu, cfg.pct_low))
    sigma_med = float(np.median(sigma))

    high = [i for i, m, s in zip(ids, mu, sigma) if m > tau_high and s < sigma_med]
    low = [i for i, m, s in zip(ids, mu, sigma) if m < tau_low and s < sigma_med]
    if len(high) < cfg.n_per_group or len(low) < cfg.n_per_group:
        raise ConsensusSamplingError(
            f"{category}: need {cfg.n_per_group} images per group, "
            f"{len(high)} high and {len(low)} low qualified",
            len(high),
            len(low),
            cfg.n_per_group,
        )
    high.sort(key=lambda i: (-ratings[i].mu, i))
    low.sort(key=lambda i: (ratings[i].mu, i))
    return ConsensusSet(
        category=category,
        high=high[: cfg.n_per_group],
        low=low[: cfg.n_per_group],
        tau_high=tau_high,
        tau_low=tau_low,
        sigma_med=sigma_med,
    )


@dataclass
class PCA:
    """Principal components via SVD of the centred data matrix."""

    k: int
    mean: np.ndarray = field(init=False, repr=False)
    components: np.ndarray = field(init=False, repr=False)
    explained_variance: np.ndarray = field(init=False, repr=False)

    def fit(self, X: np.ndarray) -> PCA:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ParameterError("PCA expects a 2-D array")
        n, d = X.shape
        if n < self.k:
            raise ParameterError(f"PCA with k={self.k} needs at least {self.k} samples, got {n}")
        if self.k > d:
            raise ParameterError(f"k={self.k} exceeds the input dimension {d}")
        self.mean = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - self.mean, full_matrices=False)
        # Fix the sign of each axis so projections are reproducible.
        signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
        signs[signs == 0] = 1.0
        vt = vt * signs[:, None]
        var = s**2 / max(n - 1, 1)
        self.components = vt[: self.k]
        self.explained_variance = var[: self.k]
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean


def pca_fit_transform(embeddings: Sequence[np.ndarray] | np.ndarray, k: int = 8) -> np.ndarray:
    X = np.asarray(embeddings, dtype=np.float64)
    return PCA(k).fit(X).transform(X)


def _describe(image_id: str, ratings: Mapping[str, Rating], pca: Mapping[str, np.ndarray]) -> str:
    if image_id not in ratings:
        raise CompositionError(f"image {image_id!r} has no rating")
    if image_id not in pca:
        raise CompositionError(f"image {image_id!r} has no PCA vector")
    coords = ", ".join(f"{float(v):.4f}" for v in pca[image_id])
    return f"- {image_id}: TrueSkill mu={ratings[image_id].mu:.2f}; CLIP-PCA(8D)=[{coords}]"


def build_extraction_prompt(
    cs: ConsensusSet,
    ratings: Mapping[str, Rating],
    pca: Mapping[str, np.ndarray],
    category: str,
    elite: DimensionSet | None = None,
) -> str:
    """Fill the extraction template; ``elite`` appends a soft-reference block."""
    if not cs.high or not cs.low:
        raise CompositionError("consensus set needs at least one high and one low image")
    text = prompts.render(
        prompts.EXTRACTION,
        {
            "category": category,
            "high_image_descriptions": "\n".join(_describe(i, ratings, pca) for i in cs.high),
            "low_image_descriptions": "\n".join(_describe(i, ratings, pca) for i in cs.low),
        },
    )
    if elite is not None:
        text += prompts.render(prompts.ELITE_REFERENCE, {"elite_definitions": elite.definitions()})
    return text


def build_mutation_prompt(elite: DimensionSet, targets: Sequence[str]) -> str:
    return prompts.render(
        prompts.MUTATION,
        {
            "category": elite.category,
            "elite_definitions": elite.definitions(),
            "count": str(len(targets)),
            "targets": "\n".join(f"- {t}" for t in targets),
        },
    )


_FENCE = re.compile(r"```[a-zA-Z0-9_-]*[ \t]*\r?\n?(.*?)```", re.DOTALL)


def extract_json_object(text: str, required_key: str | None = None) -> dict:
    """Return the first JSON object in ``text`` (optionally one holding ``required_key``).

    Code fences are searched first, then the raw text; every ``{`` is tried
    as a start position.
    """
    if not isinstance(text, str):
        raise NoJsonFoundError("response is not text")
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    decoder = json.JSONDecoder()
    first: dict | None = None
    for chunk in candidates:
        pos = chunk.find("{")
        while pos != -1:
            try:
                obj, _ = decoder.raw_decode(chunk, pos)
            except (json.JSONDecodeError, RecursionError):
                obj = None
            if isinstance(obj, dict):
                if required_key is None or required_key in obj:
                    return obj
                if first is None:
                    first = obj
            pos = chunk.find("{", pos + 1)
    if first is not None:
        return first
    raise NoJsonFoundError("no JSON object found in response")


def _dimension_from(item: Any, index: int) -> Dimension:
    if not isinstance(item, Mapping):
        raise MalformedDimensionError(f"dimension #{index + 1} is not an object")
    values = {}
    for f in DIMENSION_FIELDS:
        if f not in item or item[f] is None:
            raise MissingFieldError(f"dimension #{index + 1} lacks {f!r}")
        if not isinstance(item[f], str):
            raise MalformedDimensionError(f"dimension #{index + 1} field {f!r} is not a string")
        values[f] = item[f].strip()
    if not values["name"]:
        raise MissingFieldError(f"dimension #{index + 1} has an empty name")
    return Dimension(**values)


def parse_dimension_list(text: str, expected: int | None = None) -> list[Dimension]:
    """Parse the ``dimensions`` array of a response; ``expected`` pins its length."""
    obj = extract_json_object(text, required_key="dimensions")
    if "dimensions" not in obj:
        raise MissingFieldError("JSON object lacks 'dimensions'")
    items = obj["dimensions"]
    if not isinstance(items, list):
        raise MalformedDimensionError("'dimensions' is not a list")
    dims = [_dimension_from(item, i) for i, item in enumerate(items)]
    if expected is not None and len(dims) != expected:
        raise CardinalityError(f"expected {expected} dimensions, got {len(dims)}")
    _check_unique([d.name for d in dims])
    return dims


def parse_dimension_response(text: str, category: str, provenance: str = "manual") -> DimensionSet:
    """Validate a mining response into a :class:`DimensionSet`.

    Raises a :class:`~prefcal.errors.DimensionParseError` subclass for every
    failure: no JSON, wrong shape, missing field, wrong count, duplicates.
    """
    dims = parse_dimension_list(text)
    if not MIN_DIMENSIONS <= len(dims) <= MAX_DIMENSIONS:
        raise CardinalityError(f"expected {MIN_DIMENSIONS}-{MAX_DIMENSIONS} dimensions, got {len(dims)}")
    return DimensionSet(category=category, dimensions=tuple(dims), provenance=provenance)

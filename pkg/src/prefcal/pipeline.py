"""Glue between the stages: per-category data preparation, scoring, calibration and evaluation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from prefcal.calibration import (
    CalibrationResult,
    HybridConfig,
    Manifold,
    ScoredPair,
    apply_selection,
    build_reference_manifold,
    calibrate_all,
)
from prefcal.dataio import ComparisonRecord, DatasetSplit, consensus_filter, sample_and_split
from prefcal.errors import CompositionError, EvaluationError
from prefcal.evaluation import EvalReport, dimension_power, evaluate
from prefcal.mining import ConsensusConfig, DimensionSet, PCA, sample_consensus
from prefcal.ratings import Rating, RatingConfig, rate_all
from prefcal.scoring.cache import ScoreCache
from prefcal.scoring.client import VlmClient
from prefcal.scoring.scorer import AgentTemperatures, PairScores, Scorer
from prefcal.search import MiningContext, Outcome, SearchConfig, generate_candidate

logger = logging.getLogger(__name__)


def derive_seed(root: int, *labels: object) -> int:
    """Child seed: first 8 bytes (little endian) of sha256 over ``root`` and ``labels`` joined by '/'."""
    body = "/".join(str(x) for x in (root, *labels)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(body).digest()[:8], "little") % (2**32)


@dataclass
class CategoryData:
    category: str
    filtered: list[ComparisonRecord]
    split: DatasetSplit
    ratings: dict[str, Rating]


def prepare_category(
    records: Sequence[ComparisonRecord],
    category: str,
    sample_size: int | None,
    ratio: float,
    seed: int,
    rating_cfg: RatingConfig | None = None,
    min_votes: int = 3,
    min_agreement: float = 0.5,
) -> CategoryData:
    """Filter, split and rate one category.

    Ratings use every filtered comparison except those whose pair identity
    belongs to the pool, so evaluation targets never leak into the targets
    used for fitting.
    """
    mine = [r for r in records if r.category == category]
    filtered = consensus_filter(mine, min_votes, min_agreement)
    n = len(filtered) if sample_size is None else min(sample_size, len(filtered))
    split = sample_and_split(filtered, n, ratio, seed)
    held_out = {r.pair_identity for r in split.pool}
    rated = [r for r in filtered if r.pair_identity not in held_out]
    if not rated:
        raise CompositionError(f"{category}: no comparisons left to rate after holding out the pool")
    return CategoryData(category, filtered, split, rate_all(rated, rating_cfg or RatingConfig()))


def _scored(records: Sequence[ComparisonRecord], scores: Sequence[PairScores]) -> list[ScoredPair]:
    return [ScoredPair(r.left_id, r.right_id, s, r.label) for r, s in zip(records, scores)]


@dataclass
class CategoryRun:
    category: str
    reference: list[ScoredPair]
    pool: list[ScoredPair]
    manifold: Manifold
    results: list[CalibrationResult]
    selected: list[CalibrationResult]
    calibrated: EvalReport
    raw: EvalReport
    power: dict[str, float] = field(default_factory=dict)


def score_split(scorer: Scorer, split: DatasetSplit) -> tuple[list[ScoredPair], list[ScoredPair]]:
    ref = split.reference
    pool = split.pool
    scores = scorer.score_pairs([(r.left_id, r.right_id) for r in list(ref) + list(pool)])
    return _scored(ref, scores[: len(ref)]), _scored(pool, scores[len(ref):])


def calibrate_and_evaluate(
    category: str,
    dims: DimensionSet,
    reference: Sequence[ScoredPair],
    pool: Sequence[ScoredPair],
    embeddings: Mapping[str, np.ndarray],
    ratings: Mapping[str, Rating],
    hybrid: HybridConfig | None = None,
) -> CategoryRun:
    hybrid = hybrid or HybridConfig()
    if not pool:
        raise CompositionError(f"{category}: the pool is empty")
    manifold = build_reference_manifold(reference, embeddings, ratings, hybrid)
    results = calibrate_all(pool, embeddings, manifold, hybrid)
    selected = apply_selection(results, hybrid.selection_ratio)
    labels = [p.label for p in pool]
    try:
        power = dimension_power([p.scores.scores_a for p in pool], [p.scores.scores_b for p in pool], labels,
                                dims.names)
    except EvaluationError:  # a pool of equal-labelled pairs has no power table
        power = {}
    calibrated = evaluate([r.predicted for r in selected], [r.human_label for r in selected], power,
                          category, "calibrated")
    raw = evaluate([p.scores.raw_winner for p in pool], labels, power, category, "raw")
    return CategoryRun(category, list(reference), list(pool), manifold, results, selected, calibrated, raw,
                       power)


def consensus_context(
    data: CategoryData, embeddings: Mapping[str, np.ndarray], cfg: ConsensusConfig | None = None
) -> MiningContext:
    cs = sample_consensus(data.ratings, data.category, cfg)
    ids = sorted(i for i in data.ratings if i in embeddings)
    pca = PCA(8).fit(np.stack([embeddings[i] for i in ids]))
    coords = dict(zip(ids, pca.transform(np.stack([embeddings[i] for i in ids]))))
    return MiningContext(data.category, cs, data.ratings, coords)


def subsample_split(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    """A seeded ``fraction`` of each side of ``split`` (at least one record per side)."""
    if fraction >= 1.0:
        return split
    rng = np.random.default_rng(seed)

    def take(records):
        k = max(1, int(round(fraction * len(records))))
        idx = np.sort(rng.permutation(len(records))[:k])
        return [records[i] for i in idx]

    return DatasetSplit(take(list(split.reference)), take(list(split.pool)), split.seed, split.ratio)


class SearchAdapter:
    """Implements the trial-pipeline protocol on top of real stages and a VLM client."""

    def __init__(
        self,
        data: Mapping[str, CategoryData],
        embeddings: Mapping[str, np.ndarray],
        client: VlmClient,
        search: SearchConfig | None = None,
        hybrid: HybridConfig | None = None,
        mode: int = 4,
        temps: AgentTemperatures | None = None,
        cache: ScoreCache | None = None,
        max_workers: int = 4,
        consensus: ConsensusConfig | None = None,
        max_calls: int | None = None,
    ):
        self.data = dict(data)
        self.categories = list(self.data)
        self.embeddings = embeddings
        self.client = client
        self.search = search or SearchConfig()
        self.hybrid = hybrid or HybridConfig()
        self.mode = mode
        self.temps = temps
        self.cache = cache
        self.max_workers = max_workers
        self.max_calls = max_calls
        self._contexts = {c: consensus_context(d, embeddings, consensus) for c, d in self.data.items()}
        self._eval = {c: subsample_split(d.split, self.search.eval_fraction,
                                         derive_seed(self.search.seed, "eval_sample", c))
                      for c, d in self.data.items()}

    def budget_exhausted(self) -> bool:
        return self.max_calls is not None and self.client.counter.calls >= self.max_calls

    def generate(self, category, phase, tau_gen, elite, elite_power, trial_index) -> DimensionSet:
        return generate_candidate(self._contexts[category], phase, tau_gen, elite, self.client,
                                  self.search.mutation_count, elite_power, self.search.elite_in_explore,
                                  trial_index)

    def evaluate(self, category: str, dims: DimensionSet) -> Outcome:
        scorer = Scorer(self.client, dims, self.mode, temps=self.temps, cache=self.cache,
                        max_workers=self.max_workers)
        ref, pool = score_split(scorer, self._eval[category])
        run = calibrate_and_evaluate(category, dims, ref, pool, self.embeddings, self.data[category].ratings,
                                     self.hybrid)
        return Outcome(run.calibrated.acc_incl, run.calibrated.kappa_incl, run.power)

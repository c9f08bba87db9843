"""Planted-structure synthetic data and a deterministic mock VLM.

Each image has latent concept levels ``z`` in [0, 1] and a binary context.
A category's true appeal is a context-dependent linear function of a few
informative concepts whose weights change sign between contexts, so an
unweighted sum of scores is a poor predictor while a local fit recovers the
right weights. The context is encoded only in the embedding: each context
projects concepts through its own random subspace.

The mock VLM answers every prompt family used by the pipeline (mining,
mutation, single-image and pairwise scoring, the three-agent chain) from
request tags, with noise seeded by content so that identical requests give
identical answers and the two orientations of a pair see the same scores.
"""

from __future__ import annotations

import hashlib
import io
import json
import csv
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from prefcal.dataio import CLIP_DIM
from prefcal.errors import ContentError
from prefcal.labels import CATEGORIES
from prefcal.mining import Dimension, DimensionSet
from prefcal.scoring.client import Completion, MockBackend, VlmRequest, estimate_tokens

CONCEPTS: tuple[tuple[str, str, str, str], ...] = (
    ("Tree Canopy", "Share of the view covered by tree crowns", "dense mature trees", "no trees"),
    ("Facade Upkeep", "Condition of building fronts", "fresh paint and intact trim", "peeling or cracked walls"),
    ("Litter", "Visible rubbish on the ground", "no rubbish in view", "scattered rubbish and bags"),
    ("Sidewalk Width", "Room for pedestrians", "wide continuous sidewalk", "no sidewalk"),
    ("Traffic Volume", "Number of moving vehicles", "many cars and trucks", "empty road"),
    ("Storefront Activity", "Open shops and signage at street level", "busy shopfronts", "shuttered units"),
    ("Graffiti", "Unsanctioned markings on surfaces", "no tags visible", "walls covered in tags"),
    ("Sky Openness", "Amount of open sky", "wide open sky", "sky blocked by structures"),
    ("Lighting Fixtures", "Street lamps and lit frontages", "regular lamps", "no lighting visible"),
    ("Building Height", "Height of surrounding buildings", "tall towers", "single storey"),
    ("Vacant Lots", "Empty or abandoned parcels", "no vacant land", "several empty lots"),
    ("Pedestrian Presence", "People walking or sitting", "crowded sidewalks", "nobody in view"),
    ("Road Surface", "Condition of the pavement", "smooth new asphalt", "potholes and patches"),
    ("Fencing", "Barriers, bars and fences", "open frontages", "bars and chain-link fences"),
    ("Architectural Detail", "Ornament and variety in buildings", "rich ornament", "blank boxes"),
    ("Green Verges", "Planted strips and lawns", "continuous planting", "bare concrete"),
)
CONCEPT_NAMES = tuple(c[0] for c in CONCEPTS)
CONCEPT_INDEX = {name.casefold(): i for i, name in enumerate(CONCEPT_NAMES)}


def _seed(*parts: Any) -> int:
    body = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return int.from_bytes(hashlib.sha256(body).digest()[:8], "little")


def _rng(*parts: Any) -> np.random.Generator:
    return np.random.default_rng(_seed(*parts))


def dimension(name: str) -> Dimension:
    _, desc, high, low = CONCEPTS[CONCEPT_INDEX[name.casefold()]]
    return Dimension(name, desc, high, low)


@dataclass(frozen=True)
class WorldConfig:
    n_images: int = 100
    n_pairs: int = 400
    votes_per_pair: int = 5
    n_informative: int = 6
    vote_noise: float = 0.3
    draw_band: float = 0.12
    score_noise: float = 0.6
    clip_noise: float = 0.02
    seed: int = 0
    categories: tuple[str, ...] = CATEGORIES


@dataclass
class SyntheticWorld:
    """Latent structure behind a synthetic vote table."""

    cfg: WorldConfig
    image_ids: list[str]
    z: np.ndarray
    context: np.ndarray
    embeddings: dict[str, np.ndarray]
    informative: dict[str, list[int]]
    weights: dict[str, np.ndarray]  # category -> (2, n_concepts) weights per context
    pairs: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    def skill(self, category: str, image_id: str) -> float:
        i = self.image_ids.index(image_id)
        return float(self.weights[category][self.context[i]] @ self.z[i])

    def planted_set(self, category: str, size: int = 8) -> DimensionSet:
        """The informative concepts padded with the first decoys."""
        idx = list(self.informative[category])
        idx += [j for j in range(len(CONCEPTS)) if j not in idx][: size - len(idx)]
        return DimensionSet(category, tuple(dimension(CONCEPT_NAMES[j]) for j in sorted(idx)), "planted")

    def vote_rows(self) -> list[dict[str, str]]:
        rows = []
        for category in self.cfg.categories:
            rng = _rng(self.cfg.seed, "votes", category)
            for a, b in self.pairs[category]:
                d = self.skill(category, a) - self.skill(category, b)
                for _ in range(self.cfg.votes_per_pair):
                    x = d + rng.normal(0.0, self.cfg.vote_noise)
                    winner = "equal" if abs(x) < self.cfg.draw_band else ("left" if x > 0 else "right")
                    rows.append({"left_id": a, "right_id": b, "category": category, "winner": winner})
        return rows

    def votes_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["left_id", "right_id", "category", "winner"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.vote_rows())
        return buf.getvalue()


def make_world(cfg: WorldConfig | None = None) -> SyntheticWorld:
    cfg = cfg or WorldConfig()
    rng = _rng(cfg.seed, "world")
    n_c = len(CONCEPTS)
    ids = [f"img_{i:03d}" for i in range(cfg.n_images)]
    z = rng.uniform(0.0, 1.0, size=(cfg.n_images, n_c))
    context = np.arange(cfg.n_images) % 2
    rng.shuffle(context)

    base = rng.normal(size=CLIP_DIM)
    base /= np.linalg.norm(base)
    proj = rng.normal(size=(2, CLIP_DIM, n_c)) / np.sqrt(CLIP_DIM)
    embeddings = {}
    for i, image_id in enumerate(ids):
        e = base + 0.5 * proj[context[i]] @ z[i] + rng.normal(0.0, cfg.clip_noise, CLIP_DIM) / np.sqrt(CLIP_DIM)
        embeddings[image_id] = e

    informative, weights = {}, {}
    for category in cfg.categories:
        crng = _rng(cfg.seed, "weights", category)
        idx = sorted(crng.choice(n_c, size=cfg.n_informative, replace=False).tolist())
        mags = crng.uniform(0.8, 1.6, size=cfg.n_informative)
        signs = np.array([1.0, -1.0] * (cfg.n_informative // 2) + [1.0] * (cfg.n_informative % 2))
        crng.shuffle(signs)
        flip = np.array([1.0, -1.0] * (cfg.n_informative // 2) + [1.0] * (cfg.n_informative % 2))
        crng.shuffle(flip)
        w = np.zeros((2, n_c))
        w[0, idx] = mags * signs
        w[1, idx] = mags * signs * flip
        informative[category] = idx
        weights[category] = w

    world = SyntheticWorld(cfg, ids, z, context, embeddings, informative, weights)
    by_context = [[ids[i] for i in range(cfg.n_images) if context[i] == c] for c in (0, 1)]
    for category in cfg.categories:
        prng = _rng(cfg.seed, "pairs", category)
        seen: set[frozenset[str]] = set()
        pairs: list[tuple[str, str]] = []
        while len(pairs) < cfg.n_pairs:
            group = by_context[int(prng.integers(2))]
            a, b = prng.choice(len(group), size=2, replace=False)
            key = frozenset((group[a], group[b]))
            if key in seen:
                continue
            seen.add(key)
            pairs.append((group[a], group[b]))
        world.pairs[category] = pairs
    return world


def _score_vector(world: SyntheticWorld, image: str, names: Sequence[str], noise: np.ndarray) -> list[int]:
    i = world.image_ids.index(image)
    out = []
    for name, eps in zip(names, noise):
        j = CONCEPT_INDEX.get(name.casefold())
        level = 0.5 if j is None else world.z[i, j]
        out.append(int(np.clip(np.rint(1.0 + 9.0 * level + eps), 1, 10)))
    return out


class SyntheticResponder:
    """Callable used as a :class:`MockBackend` responder for a synthetic world."""

    def __init__(self, world: SyntheticWorld, seed: int = 0, dims_per_set: int = 8):
        self.world = world
        self.seed = seed
        self.dims_per_set = dims_per_set

    def _noise(self, tags: dict, image: str, n: int, scale: float) -> np.ndarray:
        a, b = sorted(tags["images"]) if len(tags["images"]) == 2 else (tags["images"][0], "")
        return _rng(self.seed, tags["category"], tags["dimensions"], tags["mode"], a, b, image).normal(0, scale, n)

    def _scores(self, tags: dict, image: str, scale: float) -> dict[str, int]:
        names = tags["dimensions"]
        values = _score_vector(self.world, image, names, self._noise(tags, image, len(names), scale))
        return dict(zip(names, values))

    def _pair_verdict(self, tags: dict, scale: float) -> dict:
        a, b = tags["images"]
        sa, sb = self._scores(tags, a, scale), self._scores(tags, b, scale)
        total = sum(sa.values()) - sum(sb.values())
        winner = "left" if total > 0 else "right" if total < 0 else "equal"
        return {"image_a_scores": sa, "image_b_scores": sb, "winner": winner}

    def _mine(self, req: VlmRequest) -> dict:
        tags = req.tags
        rng = _rng(self.seed, "mine", tags.get("category"), tags.get("trial"), tags.get("phase"),
                   tags.get("elite"), req.temperature)
        if tags.get("phase") == "converge":
            keep = {n.casefold() for n in tags["elite"] if n not in tags["targets"]}
            options = [n for n in CONCEPT_NAMES if n.casefold() not in keep and n not in tags["targets"]]
            names = rng.choice(options, size=len(tags["targets"]), replace=False).tolist()
        else:
            names = sorted(rng.choice(CONCEPT_NAMES, size=self.dims_per_set, replace=False).tolist(),
                           key=CONCEPT_NAMES.index)
        return {"dimensions": [dimension(n).to_dict() for n in names]}

    def __call__(self, req: VlmRequest) -> Completion:
        tags = dict(req.tags)
        stage = tags.get("stage")
        if req.role_tag == "miner":
            body: Any = self._mine(req)
        elif stage == "observer":
            body = {"observations": {img: f"street scene {img}" for img in tags["images"]}}
        elif stage == "debater":
            body = {"debates": {n: "both readings are plausible" for n in tags["dimensions"]}}
        elif stage == "judge" and tags["mode"] == 4:
            body = self._pair_verdict(tags, self.world.cfg.score_noise)
        elif stage == "judge":
            body = {"scores": self._scores(tags, tags["images"][0], self.world.cfg.score_noise)}
        elif stage == "single" and tags["mode"] == 2:
            body = self._pair_verdict(tags, 1.5 * self.world.cfg.score_noise)
        elif stage == "single":
            body = {"scores": self._scores(tags, tags["images"][0], 1.5 * self.world.cfg.score_noise)}
        else:
            raise ContentError(f"synthetic responder cannot answer stage {stage!r}")
        text = "```json\n" + json.dumps(body, indent=2) + "\n```"
        return Completion(text, estimate_tokens(req.prompt), estimate_tokens(text))


def mock_backend(world: SyntheticWorld, seed: int = 0) -> MockBackend:
    return MockBackend(responder=SyntheticResponder(world, seed))


def deliberation_variance(
    rho: float, sigma: float = 1.0, trials: int = 10_000, seed: int = 0
) -> float:
    """Variance of the mean of three exchangeable agent estimates with pairwise correlation ``rho``.

    The three errors share a common component of variance ``rho * sigma^2``
    plus independent parts, which is the equicorrelated Gaussian model.
    """
    rng = np.random.default_rng(seed)
    common = rng.normal(0.0, sigma * np.sqrt(rho), size=trials)
    own = rng.normal(0.0, sigma * np.sqrt(1.0 - rho), size=(trials, 3))
    estimates = common[:, None] + own
    return float(np.var(estimates.mean(axis=1), ddof=1))

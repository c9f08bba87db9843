"""Stage 2: per-dimension score extraction in four modes.

=====  ============  ===========  ==============
mode   arity         agents       calls per pair
=====  ============  ===========  ==============
1      single image  direct       2
2      pairwise      direct       1
3      single image  O -> D -> J  6
4      pairwise      O -> D -> J  3
=====  ============  ===========  ==============
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from prefcal import prompts
from prefcal.errors import ContentError, DimensionParseError, ParameterError
from prefcal.labels import Label
from prefcal.mining import DimensionSet, canonical_name, extract_json_object
from prefcal.scoring.cache import ScoreCache, cache_key
from prefcal.scoring.client import VlmClient, VlmRequest

logger = logging.getLogger(__name__)

MODES = (1, 2, 3, 4)
SCORE_MIN, SCORE_MAX = 1.0, 10.0
# Values in [CLAMP_MIN, CLAMP_MAX] are clamped onto the score range; beyond is an error.
CLAMP_MIN, CLAMP_MAX = 0.0, 11.0


@dataclass(frozen=True)
class AgentTemperatures:
    observer: float = 0.3
    debater: float = 0.5
    judge: float = 0.1
    single_shot: float = 0.0


def default_sigma_i(n_dims: int) -> float:
    """Equal-intensity threshold scaled to the dimension count (0.8 at n = 8)."""
    return 0.8 * n_dims / 8.0


@dataclass(frozen=True)
class PairScores:
    scores_a: tuple[float, ...]
    scores_b: tuple[float, ...]
    intensity: float
    raw_winner: Label
    dimension_weights: tuple[float, ...] | None = None
    stated_winner: Label | None = None

    def __post_init__(self):
        if len(self.scores_a) != len(self.scores_b):
            raise ParameterError("score vectors differ in length")
        for s in self.scores_a + self.scores_b:
            if not SCORE_MIN <= s <= SCORE_MAX:
                raise ParameterError(f"score {s} outside [1, 10]")

    @classmethod
    def build(
        cls,
        scores_a: Sequence[float],
        scores_b: Sequence[float],
        sigma_i: float,
        stated_winner: Label | None = None,
        dimension_weights: Sequence[float] | None = None,
    ) -> PairScores:
        label, intensity = determine_winner(scores_a, scores_b, sigma_i)
        # Above the threshold a stated left/right verdict from the VLM is kept.
        if label is not Label.EQUAL and stated_winner in (Label.LEFT, Label.RIGHT):
            label = stated_winner
        return cls(
            scores_a=tuple(float(s) for s in scores_a),
            scores_b=tuple(float(s) for s in scores_b),
            intensity=intensity,
            raw_winner=label,
            dimension_weights=None if dimension_weights is None else tuple(float(w) for w in dimension_weights),
            stated_winner=stated_winner,
        )

    def with_threshold(self, sigma_i: float) -> PairScores:
        return PairScores.build(self.scores_a, self.scores_b, sigma_i, self.stated_winner, self.dimension_weights)

    def swapped(self) -> PairScores:
        return PairScores(
            scores_a=self.scores_b,
            scores_b=self.scores_a,
            intensity=self.intensity,
            raw_winner=self.raw_winner.flip(),
            dimension_weights=self.dimension_weights,
            stated_winner=None if self.stated_winner is None else self.stated_winner.flip(),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "scores_a": list(self.scores_a),
            "scores_b": list(self.scores_b),
            "intensity": self.intensity,
            "raw_winner": self.raw_winner.value,
            "dimension_weights": None if self.dimension_weights is None else list(self.dimension_weights),
            "stated_winner": None if self.stated_winner is None else self.stated_winner.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PairScores:
        return cls(
            scores_a=tuple(float(x) for x in d["scores_a"]),
            scores_b=tuple(float(x) for x in d["scores_b"]),
            intensity=float(d["intensity"]),
            raw_winner=Label.parse(d["raw_winner"]),
            dimension_weights=None if d.get("dimension_weights") is None else tuple(d["dimension_weights"]),
            stated_winner=None if d.get("stated_winner") is None else Label.parse(d["stated_winner"]),
        )


def determine_winner(scores_a: Sequence[float], scores_b: Sequence[float], sigma_i: float) -> tuple[Label, float]:
    """``(equal, I)`` when ``I = sum|a - b| < sigma_i``; otherwise the sign of ``sum(a - b)``.

    A zero net difference above the threshold is also ``equal``, which keeps
    the rule antisymmetric under swapping the two images.
    """
    if len(scores_a) != len(scores_b):
        raise ParameterError(f"score vectors differ in length ({len(scores_a)} vs {len(scores_b)})")
    diffs = [float(a) - float(b) for a, b in zip(scores_a, scores_b)]
    intensity = math.fsum(abs(d) for d in diffs)
    if intensity < sigma_i:
        return Label.EQUAL, intensity
    net = math.fsum(diffs)
    if net == 0:
        return Label.EQUAL, intensity
    return (Label.LEFT if net > 0 else Label.RIGHT), intensity


def _coerce_score(value: Any, name: str, stage: str) -> float:
    if isinstance(value, bool):
        raise ContentError(f"score for {name!r} is not a number", stage)
    if isinstance(value, Mapping) and "score" in value:
        value = value["score"]
    try:
        x = float(str(value).strip()) if isinstance(value, str) else float(value)
    except (TypeError, ValueError):
        raise ContentError(f"score for {name!r} is not a number: {value!r}", stage) from None
    if not math.isfinite(x) or not CLAMP_MIN <= x <= CLAMP_MAX:
        raise ContentError(f"score for {name!r} out of range: {x}", stage)
    if x < SCORE_MIN or x > SCORE_MAX:
        clamped = min(SCORE_MAX, max(SCORE_MIN, x))
        logger.warning("[%s] clamping score %s for %r to %s", stage, x, name, clamped)
        x = clamped
    return x


def parse_score_map(obj: Any, dims: DimensionSet, stage: str, field: str) -> list[float]:
    """Scores for every dimension of ``dims`` from a ``{name: score}`` mapping."""
    if not isinstance(obj, Mapping):
        raise ContentError(f"{field!r} is missing or not an object", stage)
    by_name = {canonical_name(str(k)): v for k, v in obj.items()}
    out = []
    for name in dims.names:
        key = canonical_name(name)
        if key not in by_name:
            raise ContentError(f"{field!r} lacks dimension {name!r}", stage)
        out.append(_coerce_score(by_name[key], name, stage))
    return out


def _parse_weights(obj: Any, dims: DimensionSet) -> list[float] | None:
    if not isinstance(obj, Mapping):
        return None
    by_name = {canonical_name(str(k)): v for k, v in obj.items()}
    weights = []
    for name in dims.names:
        v = by_name.get(canonical_name(name))
        try:
            w = float(v)
        except (TypeError, ValueError):
            return None
        if not math.isfinite(w) or w < 0:
            return None
        weights.append(w)
    return weights


def _parse_winner(value: Any) -> Label | None:
    try:
        return Label.parse(value)
    except ValueError:
        return None


def _json_stage(text: str, key: str, stage: str) -> dict:
    try:
        obj = extract_json_object(text, required_key=key)
    except DimensionParseError as exc:
        raise ContentError(str(exc), stage) from None
    if key not in obj:
        raise ContentError(f"response lacks {key!r}", stage)
    return obj


class _Call:
    """Issue one request, re-asking once if its response fails to parse."""

    def __init__(self, client: VlmClient, transcript: list[dict]):
        self.client = client
        self.transcript = transcript

    def __call__(self, req: VlmRequest, parse, stage: str):
        text = self.client.complete(req)
        self.transcript.append({"stage": stage, "response": text})
        try:
            return text, parse(text)
        except ContentError as exc:
            reason = str(exc)
        logger.info("[%s] re-asking after unusable reply: %s", stage, reason)
        retry = VlmRequest(
            prompt=req.prompt + prompts.render(prompts.REASK, {"reason": reason}),
            images=req.images,
            temperature=req.temperature,
            role_tag=req.role_tag,
            tags={**req.tags, "reask": True},
            max_tokens=req.max_tokens,
        )
        text = self.client.complete(retry)
        self.transcript.append({"stage": stage, "response": text, "reask": True})
        return text, parse(text)


def _tags(dims: DimensionSet, stage: str, mode: int, images: Sequence[str]) -> dict:
    return {"category": dims.category, "dimensions": dims.names, "stage": stage, "mode": mode,
            "images": list(images)}


def _base_values(dims: DimensionSet) -> dict[str, str]:
    return {"category": dims.category, "dimension_definitions": dims.definitions()}


def score_mode1_single(
    client: VlmClient, image: str, dims: DimensionSet, temperature: float = 0.0,
    image_ref: str | None = None, transcript: list[dict] | None = None,
) -> list[float]:
    """Direct single-image scores (one call)."""
    call = _Call(client, [] if transcript is None else transcript)
    req = VlmRequest(
        prompt=prompts.render(prompts.DIRECT_SINGLE, _base_values(dims)),
        images=(image_ref or image,),
        temperature=temperature,
        role_tag="single",
        tags=_tags(dims, "single", 1, [image]),
    )
    _, scores = call(req, lambda t: parse_score_map(_json_stage(t, "scores", "single").get("scores"),
                                                     dims, "single", "scores"), "single")
    return scores


def score_mode2_pair(
    client: VlmClient, pair: tuple[str, str], dims: DimensionSet, sigma_i: float | None = None,
    temperature: float = 0.0, image_refs: Mapping[str, str] | None = None,
    transcript: list[dict] | None = None,
) -> PairScores:
    """Direct pairwise scores (one call)."""
    sigma_i = default_sigma_i(len(dims)) if sigma_i is None else sigma_i
    refs = image_refs or {}
    call = _Call(client, [] if transcript is None else transcript)
    req = VlmRequest(
        prompt=prompts.render(prompts.DIRECT_PAIR, _base_values(dims)),
        images=tuple(refs.get(i, i) for i in pair),
        temperature=temperature,
        role_tag="single",
        tags=_tags(dims, "single", 2, pair),
    )
    _, result = call(req, lambda t: _parse_pair_verdict(t, dims, "single", sigma_i), "single")
    return result


def _parse_pair_verdict(text: str, dims: DimensionSet, stage: str, sigma_i: float) -> PairScores:
    obj = _json_stage(text, "image_a_scores", stage)
    a = parse_score_map(obj.get("image_a_scores"), dims, stage, "image_a_scores")
    b = parse_score_map(obj.get("image_b_scores"), dims, stage, "image_b_scores")
    return PairScores.build(a, b, sigma_i, _parse_winner(obj.get("winner")),
                            _parse_weights(obj.get("ai_dimension_weights"), dims))


def multi_agent_score(
    client: VlmClient, pair: tuple[str, str], dims: DimensionSet,
    temps: AgentTemperatures | None = None, sigma_i: float | None = None,
    image_refs: Mapping[str, str] | None = None, transcript: list[dict] | None = None,
) -> PairScores:
    """Observer, Debater and Judge over an image pair (three calls, strictly in order)."""
    temps = temps or AgentTemperatures()
    sigma_i = default_sigma_i(len(dims)) if sigma_i is None else sigma_i
    refs = image_refs or {}
    images = tuple(refs.get(i, i) for i in pair)
    call = _Call(client, [] if transcript is None else transcript)
    values = _base_values(dims)

    _, obs = call(VlmRequest(prompts.render(prompts.OBSERVER, values), images, temps.observer, "observer",
                             _tags(dims, "observer", 4, pair)),
                  lambda t: _json_stage(t, "observations", "observer"), "observer")
    values["observer_output"] = json.dumps(obs, indent=2, ensure_ascii=False)
    _, deb = call(VlmRequest(prompts.render(prompts.DEBATER, values), images, temps.debater, "debater",
                             _tags(dims, "debater", 4, pair)),
                  lambda t: _json_stage(t, "debates", "debater"), "debater")
    values["debater_output"] = json.dumps(deb, indent=2, ensure_ascii=False)
    _, result = call(VlmRequest(prompts.render(prompts.JUDGE, values), images, temps.judge, "judge",
                                _tags(dims, "judge", 4, pair)),
                     lambda t: _parse_pair_verdict(t, dims, "judge", sigma_i), "judge")
    return result


def multi_agent_single(
    client: VlmClient, image: str, dims: DimensionSet, temps: AgentTemperatures | None = None,
    image_ref: str | None = None, transcript: list[dict] | None = None,
) -> list[float]:
    """Mode 3 chain on one image: the pairwise templates with the second image removed."""
    temps = temps or AgentTemperatures()
    images = (image_ref or image,)
    call = _Call(client, [] if transcript is None else transcript)
    values = _base_values(dims)
    _, obs = call(VlmRequest(prompts.render(prompts.OBSERVER_SINGLE, values), images, temps.observer,
                             "observer", _tags(dims, "observer", 3, [image])),
                  lambda t: _json_stage(t, "observations", "observer"), "observer")
    values["observer_output"] = json.dumps(obs, indent=2, ensure_ascii=False)
    _, deb = call(VlmRequest(prompts.render(prompts.DEBATER_SINGLE, values), images, temps.debater,
                             "debater", _tags(dims, "debater", 3, [image])),
                  lambda t: _json_stage(t, "debates", "debater"), "debater")
    values["debater_output"] = json.dumps(deb, indent=2, ensure_ascii=False)
    _, scores = call(VlmRequest(prompts.render(prompts.JUDGE_SINGLE, values), images, temps.judge,
                                "judge", _tags(dims, "judge", 3, [image])),
                     lambda t: parse_score_map(_json_stage(t, "scores", "judge").get("scores"),
                                               dims, "judge", "scores"), "judge")
    return scores


class Scorer:
    """Scores pairs for one dimension set in a fixed mode, with caching.

    At most ``max_workers`` pairs are in flight at once; the calls belonging
    to one pair always run sequentially in a single worker.
    """

    def __init__(
        self,
        client: VlmClient,
        dims: DimensionSet,
        mode: int = 4,
        sigma_i: float | None = None,
        temps: AgentTemperatures | None = None,
        cache: ScoreCache | None = None,
        image_refs: Mapping[str, str] | None = None,
        max_workers: int = 4,
    ):
        if mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {mode}")
        if max_workers < 1:
            raise ParameterError("max_workers must be >= 1")
        self.client = client
        self.dims = dims
        self.mode = mode
        self.sigma_i = default_sigma_i(len(dims)) if sigma_i is None else sigma_i
        self.temps = temps or AgentTemperatures()
        self.cache = cache
        self.image_refs = dict(image_refs or {})
        self.max_workers = max_workers

    def _ref(self, image: str) -> str:
        return self.image_refs.get(image, image)

    def _fresh(self, pair: tuple[str, str], transcript: list[dict]) -> PairScores:
        a, b = pair
        if self.mode == 1:
            sa = score_mode1_single(self.client, a, self.dims, self.temps.single_shot, self._ref(a), transcript)
            sb = score_mode1_single(self.client, b, self.dims, self.temps.single_shot, self._ref(b), transcript)
            return PairScores.build(sa, sb, self.sigma_i)
        if self.mode == 2:
            return score_mode2_pair(self.client, pair, self.dims, self.sigma_i, self.temps.single_shot,
                                    self.image_refs, transcript)
        if self.mode == 3:
            sa = multi_agent_single(self.client, a, self.dims, self.temps, self._ref(a), transcript)
            sb = multi_agent_single(self.client, b, self.dims, self.temps, self._ref(b), transcript)
            return PairScores.build(sa, sb, self.sigma_i)
        return multi_agent_score(self.client, pair, self.dims, self.temps, self.sigma_i,
                                 self.image_refs, transcript)

    def score_pair(self, left: str, right: str) -> PairScores:
        key = cache_key(left, right, self.dims.category, self.dims.digest(), self.mode)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit.with_threshold(self.sigma_i)
        transcript: list[dict] = []
        result = self._fresh((left, right), transcript)
        if self.cache is not None:
            self.cache.put(key, result, transcript)
        return result

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> list[PairScores]:
        """Score ``pairs`` preserving input order; the first failure is raised."""
        if self.max_workers == 1 or len(pairs) <= 1:
            return [self.score_pair(a, b) for a, b in pairs]
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            return list(pool.map(lambda p: self.score_pair(*p), pairs))

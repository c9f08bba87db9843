"""Two-phase dimension-set search with elite seeding, mutation and per-category assembly.

Trials run sequentially. Each trial proposes one candidate dimension set per
category, evaluates it, and updates that category's running best (its
elite). The final answer takes, for every category independently, the best
candidate seen in any trial.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from prefcal.errors import ParameterError, PrefcalError, SearchStateError
from prefcal.mining import (
    ConsensusSet,
    DimensionSet,
    build_extraction_prompt,
    build_mutation_prompt,
    parse_dimension_list,
    parse_dimension_response,
)
from prefcal.ratings import Rating
from prefcal.scoring.client import VlmClient, VlmRequest

logger = logging.getLogger(__name__)

EXPLORE, CONVERGE = "explore", "converge"


@dataclass(frozen=True)
class SearchConfig:
    trials: int = 15
    patience: int = 5
    explore_trials: int = 6
    explore_tau: tuple[float, float] = (0.85, 1.0)
    converge_tau: tuple[float, float] = (0.7, 0.5)
    mutation_count: int = 1
    eval_fraction: float = 0.2
    seed: int = 42
    elite_in_explore: bool = True

    def __post_init__(self):
        object.__setattr__(self, "explore_tau", tuple(float(t) for t in self.explore_tau))
        object.__setattr__(self, "converge_tau", tuple(float(t) for t in self.converge_tau))
        problems = self.violations()
        if problems:
            raise ParameterError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.trials < 1:
            out.append(f"trials must be >= 1, got {self.trials}")
        if not 0 <= self.explore_trials <= self.trials:
            out.append(f"explore_trials must lie in [0, trials], got {self.explore_trials}")
        if self.patience < 1:
            out.append(f"patience must be >= 1, got {self.patience}")
        if self.mutation_count not in (1, 2):
            out.append(f"mutation_count must be 1 or 2, got {self.mutation_count}")
        if not 0.0 < self.eval_fraction <= 1.0:
            out.append(f"eval_fraction must lie in (0, 1], got {self.eval_fraction}")
        for name in ("explore_tau", "converge_tau"):
            span = getattr(self, name)
            if len(span) != 2 or not all(0.0 <= t <= 2.0 for t in span):
                out.append(f"{name} must be two temperatures in [0, 2], got {span}")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "trials": self.trials, "patience": self.patience, "explore_trials": self.explore_trials,
            "explore_tau": list(self.explore_tau), "converge_tau": list(self.converge_tau),
            "mutation_count": self.mutation_count, "eval_fraction": self.eval_fraction,
            "seed": self.seed, "elite_in_explore": self.elite_in_explore,
        }


def _interp(span: tuple[float, float], i: int, n: int) -> float:
    if n <= 1:
        return span[0]
    return span[0] + (span[1] - span[0]) * i / (n - 1)


def temperature_schedule(trial_index: int, cfg: SearchConfig) -> tuple[str, float]:
    """Phase and generation temperature, linear across each phase with both endpoints hit."""
    if not 0 <= trial_index < cfg.trials:
        raise ParameterError(f"trial index {trial_index} outside [0, {cfg.trials})")
    if trial_index < cfg.explore_trials:
        return EXPLORE, _interp(cfg.explore_tau, trial_index, cfg.explore_trials)
    n_conv = cfg.trials - cfg.explore_trials
    return CONVERGE, _interp(cfg.converge_tau, trial_index - cfg.explore_trials, n_conv)


@dataclass
class MiningContext:
    """Everything a category needs to build its extraction prompt."""

    category: str
    consensus: ConsensusSet
    ratings: Mapping[str, Rating]
    pca: Mapping[str, np.ndarray]


def mutation_targets(elite: DimensionSet, count: int, power: Mapping[str, float] | None = None) -> list[str]:
    """Names of the ``count`` weakest elite dimensions (last ones when power is unknown)."""
    names = elite.names
    if power:
        ranked = sorted(range(len(names)), key=lambda i: (power.get(names[i], 0.0), -i))
        return [names[i] for i in sorted(ranked[:count])]
    return names[-count:]


def generate_candidate(
    ctx: MiningContext,
    phase: str,
    tau_gen: float,
    elite: DimensionSet | None,
    client: VlmClient,
    mutation_count: int = 1,
    elite_power: Mapping[str, float] | None = None,
    use_elite: bool = True,
    trial_index: int | None = None,
) -> DimensionSet:
    """Propose a dimension set for ``ctx.category``.

    Explore runs a full extraction, with the elite appended as a soft
    reference when ``use_elite`` is set. Converge keeps the elite verbatim
    except for ``mutation_count`` replaced dimensions.
    """
    tags = {"category": ctx.category, "stage": "mine", "phase": phase, "trial": trial_index}
    if phase == EXPLORE:
        reference = elite if use_elite else None
        prompt = build_extraction_prompt(ctx.consensus, ctx.ratings, ctx.pca, ctx.category, reference)
        tags["elite"] = None if reference is None else reference.names
        text = client.complete(VlmRequest(prompt, temperature=tau_gen, role_tag="miner", tags=tags))
        return parse_dimension_response(text, ctx.category, provenance=f"trial {trial_index} explore")
    if phase != CONVERGE:
        raise ParameterError(f"unknown phase {phase!r}")
    if elite is None:
        raise SearchStateError(f"{ctx.category}: converge phase needs an elite dimension set")
    targets = mutation_targets(elite, mutation_count, elite_power)
    tags.update(elite=elite.names, targets=targets)
    prompt = build_mutation_prompt(elite, targets)
    text = client.complete(VlmRequest(prompt, temperature=tau_gen, role_tag="miner", tags=tags))
    fresh = iter(parse_dimension_list(text, expected=len(targets)))
    dims = tuple(next(fresh) if d.name in targets else d for d in elite.dimensions)
    return DimensionSet(ctx.category, dims, provenance=f"trial {trial_index} converge")


@dataclass(frozen=True)
class Outcome:
    """Evaluation of one candidate on one category."""

    accuracy: float
    kappa: float | None = None
    power: Mapping[str, float] = field(default_factory=dict)


class TrialPipeline(Protocol):
    """What :func:`optimize` needs from the surrounding pipeline."""

    categories: Sequence[str]

    def generate(self, category: str, phase: str, tau_gen: float, elite: DimensionSet | None,
                 elite_power: Mapping[str, float] | None, trial_index: int) -> DimensionSet: ...

    def evaluate(self, category: str, dims: DimensionSet) -> Outcome: ...


@dataclass
class CategoryEntry:
    status: str  # "ok", "error" or "skipped"
    dimension_set: DimensionSet | None = None
    accuracy: float | None = None
    kappa: float | None = None
    power: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "dimension_set": None if self.dimension_set is None else self.dimension_set.to_dict(),
            "accuracy": self.accuracy,
            "kappa": self.kappa,
            "power": dict(self.power),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CategoryEntry:
        ds = d.get("dimension_set")
        return cls(d["status"], None if ds is None else DimensionSet.from_dict(ds), d.get("accuracy"),
                   d.get("kappa"), dict(d.get("power") or {}), d.get("error"))


@dataclass
class TrialRecord:
    trial_index: int
    phase: str
    tau_gen: float
    per_category: dict[str, CategoryEntry]
    improved: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "trial_index": self.trial_index,
            "phase": self.phase,
            "tau_gen": self.tau_gen,
            "improved": list(self.improved),
            "per_category": {c: e.to_dict() for c, e in self.per_category.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TrialRecord:
        return cls(int(d["trial_index"]), d["phase"], float(d["tau_gen"]),
                   {c: CategoryEntry.from_dict(e) for c, e in d["per_category"].items()},
                   list(d.get("improved", [])))


@dataclass
class Best:
    dimension_set: DimensionSet
    accuracy: float
    kappa: float | None
    power: dict[str, float]
    source_trial: int


@dataclass
class SearchState:
    best: dict[str, Best] = field(default_factory=dict)
    trials: list[TrialRecord] = field(default_factory=list)
    stale: int = 0

    def absorb(self, record: TrialRecord) -> None:
        """Fold a finished trial into the running bests and the patience counter."""
        record.improved = []
        for category, entry in record.per_category.items():
            if entry.status != "ok":
                continue
            current = self.best.get(category)
            if current is None or entry.accuracy > current.accuracy:
                self.best[category] = Best(entry.dimension_set, entry.accuracy, entry.kappa, dict(entry.power),
                                           record.trial_index)
                record.improved.append(category)
        self.stale = 0 if record.improved else self.stale + 1
        self.trials.append(record)


def run_trial(trial_index: int, cfg: SearchConfig, state: SearchState, pipeline: TrialPipeline) -> TrialRecord:
    phase, tau = temperature_schedule(trial_index, cfg)
    entries: dict[str, CategoryEntry] = {}
    exhausted = getattr(pipeline, "budget_exhausted", None)
    for category in pipeline.categories:
        if exhausted is not None and exhausted():
            entries[category] = CategoryEntry("skipped", error="call budget exhausted")
            continue
        best = state.best.get(category)
        elite = None if best is None else best.dimension_set
        try:
            dims = pipeline.generate(category, phase, tau, elite, None if best is None else best.power,
                                     trial_index)
            out = pipeline.evaluate(category, dims)
        except PrefcalError as exc:
            logger.warning("trial %d, %s: %s", trial_index, category, exc)
            entries[category] = CategoryEntry("error", error=f"{type(exc).__name__}: {exc}")
            continue
        entries[category] = CategoryEntry("ok", dims, float(out.accuracy), out.kappa, dict(out.power))
    return TrialRecord(trial_index, phase, tau, entries)


@dataclass
class SearchResult:
    assembly: dict[str, dict[str, Any]]
    trials: list[TrialRecord]
    stopped_early: bool

    def best_single_trial(self) -> tuple[int, float] | None:
        """Trial with the highest mean accuracy over categories it scored, and that mean."""
        scored = []
        for t in self.trials:
            accs = [e.accuracy for e in t.per_category.values() if e.status == "ok"]
            if accs:
                scored.append((float(np.mean(accs)), -t.trial_index))
        if not scored:
            return None
        mean, neg = max(scored)
        return -neg, mean


def assemble(state: SearchState, categories: Sequence[str]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for c in categories:
        b = state.best.get(c)
        if b is None:
            out[c] = {"status": "unresolved"}
        else:
            out[c] = {"status": "ok", "dimension_set": b.dimension_set.to_dict(), "accuracy": b.accuracy,
                      "kappa": b.kappa, "source_trial": b.source_trial}
    return out


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_trials(run_dir: str | Path) -> list[TrialRecord]:
    trial_dir = Path(run_dir) / "trials"
    if not trial_dir.is_dir():
        return []
    records = [TrialRecord.from_dict(json.loads(p.read_text(encoding="utf-8")))
               for p in sorted(trial_dir.glob("trial_*.json"))]
    for expected, r in enumerate(records):
        if r.trial_index != expected:
            raise SearchStateError(f"trial ledger in {trial_dir} has a gap before trial {r.trial_index}")
    return records


def optimize(
    cfg: SearchConfig, pipeline: TrialPipeline, run_dir: str | Path | None = None, resume: bool = False
) -> SearchResult:
    """Run trials until ``cfg.trials``, until ``patience`` consecutive trials improve nothing,
    or until the pipeline reports its call budget exhausted.

    With ``run_dir`` each trial is written to ``trials/trial_XXX.json`` as
    soon as it finishes and the assembly to ``assembly.json``. ``resume``
    replays the saved trials and continues after the last one.
    """
    state = SearchState()
    run_path = None if run_dir is None else Path(run_dir)
    if resume:
        if run_path is None:
            raise SearchStateError("resume needs a run directory")
        for record in load_trials(run_path):
            state.absorb(record)
        logger.info("resumed %d trials from %s", len(state.trials), run_path)

    for t in range(len(state.trials), cfg.trials):
        if state.stale >= cfg.patience:
            break
        record = run_trial(t, cfg, state, pipeline)
        state.absorb(record)
        logger.info("trial %d (%s, tau=%.3f): improved %s", t, record.phase, record.tau_gen,
                    ", ".join(record.improved) or "nothing")
        if run_path is not None:
            _write_json(run_path / "trials" / f"trial_{t:03d}.json", record.to_dict())
        exhausted = getattr(pipeline, "budget_exhausted", None)
        if exhausted is not None and exhausted():
            logger.warning("call budget exhausted after trial %d; stopping", t)
            break
    stopped_early = len(state.trials) < cfg.trials

    assembly = assemble(state, pipeline.categories)
    if run_path is not None:
        _write_json(run_path / "assembly.json", assembly)
    return SearchResult(assembly, state.trials, stopped_early)

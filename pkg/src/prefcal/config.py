"""Run configuration: one JSON document with a section per stage.

Every key has a default; a config file only needs the keys it changes.
Unknown keys and out-of-range values are collected and reported together.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from prefcal.calibration import HybridConfig
from prefcal.errors import ConfigError, PrefcalError
from prefcal.labels import CATEGORIES
from prefcal.mining import ConsensusConfig
from prefcal.ratings import RatingConfig
from prefcal.scoring.scorer import MODES, AgentTemperatures
from prefcal.search import SearchConfig

BACKENDS = ("synthetic", "fixtures", "http")

DEFAULTS: dict[str, Any] = {
    "seed": 42,
    "categories": list(CATEGORIES),
    "paths": {
        "comparisons": "comparisons.csv",
        "embeddings": "embeddings.txt",
        "embeddings_format": "text",
        "out_dir": "run",
    },
    "data": {"min_votes": 3, "min_agreement": 0.5, "sample_size": 288, "ratio": 0.7},
    "rating": {"mu0": 25.0, "sigma0": 8.33, "beta": 4.17, "draw_probability": 0.10, "passes": 3},
    "consensus": {"pct_high": 75.0, "pct_low": 25.0, "n_per_group": 5},
    "hybrid": {"alpha": 0.3, "K": 20, "tau_kernel": 1.0, "lambda": 1.0, "epsilon": 0.8, "theta": 0.6,
               "selection_ratio": 1.0},
    "scoring": {"mode": 4, "sigma_i": None, "observer_temp": 0.3, "debater_temp": 0.5, "judge_temp": 0.1,
                "single_temp": 0.0, "max_workers": 4, "max_attempts": 5},
    "mining": {"temperature": 0.85},
    "search": {"trials": 15, "patience": 5, "explore_trials": 6, "explore_tau": [0.85, 1.0],
               "converge_tau": [0.7, 0.5], "mutation_count": 1, "eval_fraction": 0.2,
               "elite_in_explore": True, "max_calls": None},
    "backend": {"kind": "synthetic", "base_url": "https://api.openai.com/v1", "model": "gpt-4o",
                "timeout": 120.0, "fixtures": None, "world_seed": 0, "world_images": 100, "world_pairs": 400},
}


def flat_defaults(tree: Mapping[str, Any] = DEFAULTS, prefix: str = "") -> list[tuple[str, Any]]:
    out = []
    for k, v in tree.items():
        if isinstance(v, Mapping):
            out.extend(flat_defaults(v, f"{prefix}{k}."))
        else:
            out.append((f"{prefix}{k}", v))
    return out


def _merge(base: dict, override: Mapping, path: str, problems: list[str]) -> None:
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            problems.append(f"unknown key {where!r}")
        elif isinstance(base[k], dict):
            if not isinstance(v, Mapping):
                problems.append(f"{where!r} must be an object")
            else:
                _merge(base[k], v, where + ".", problems)
        else:
            base[k] = v


@dataclass
class RunConfig:
    raw: dict[str, Any]
    rating: RatingConfig
    consensus: ConsensusConfig
    hybrid: HybridConfig
    search: SearchConfig
    temps: AgentTemperatures

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def categories(self) -> list[str]:
        return list(self.raw["categories"])

    def section(self, name: str) -> dict[str, Any]:
        return self.raw[name]

    @property
    def max_calls(self) -> int | None:
        return self.raw["search"]["max_calls"]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def _build(label: str, factory, problems: list[str]):
    try:
        return factory()
    except (PrefcalError, TypeError, ValueError) as exc:
        problems.append(f"{label}: {exc}")
        return None


def build_config(overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults overlaid with ``overrides``; raises :class:`ConfigError` listing every problem."""
    raw = copy.deepcopy(DEFAULTS)
    problems: list[str] = []
    if overrides:
        _merge(raw, overrides, "", problems)

    cats = raw["categories"]
    if not isinstance(cats, list) or not cats:
        problems.append("'categories' must be a non-empty list")
    else:
        problems.extend(f"unknown category {c!r}" for c in cats if c not in CATEGORIES)
        if len(set(cats)) != len(cats):
            problems.append("'categories' has duplicates")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        problems.append("'seed' must be an integer")

    def check(label: str, value: Any, ok, msg: str) -> None:
        try:
            good = bool(ok(value))
        except TypeError:
            good = False
        if not good:
            problems.append(f"{label} {msg}")

    def is_int(v: Any) -> bool:
        return isinstance(v, int) and not isinstance(v, bool)

    data = raw["data"]
    check("data.min_votes", data["min_votes"], lambda v: is_int(v) and v >= 1, "must be an integer >= 1")
    check("data.min_agreement", data["min_agreement"], lambda v: 0.5 <= v <= 1.0, "must lie in [0.5, 1]")
    check("data.sample_size", data["sample_size"], lambda v: v is None or (is_int(v) and v >= 2),
          "must be null or an integer >= 2")
    check("data.ratio", data["ratio"], lambda v: 0.0 < v < 1.0, "must lie in (0, 1)")
    check("paths.embeddings_format", raw["paths"]["embeddings_format"], lambda v: v in ("text", "npz"),
          "must be 'text' or 'npz'")

    sc = raw["scoring"]
    check("scoring.mode", sc["mode"], lambda v: v in MODES, f"must be one of {MODES}")
    check("scoring.sigma_i", sc["sigma_i"], lambda v: v is None or v >= 0, "must be null or non-negative")
    for k in ("observer_temp", "debater_temp", "judge_temp", "single_temp"):
        check(f"scoring.{k}", sc[k], lambda v: 0.0 <= v <= 2.0, "must lie in [0, 2]")
    check("scoring.max_workers", sc["max_workers"], lambda v: is_int(v) and v >= 1, "must be an integer >= 1")
    check("scoring.max_attempts", sc["max_attempts"], lambda v: is_int(v) and v >= 1,
          "must be an integer >= 1")
    check("mining.temperature", raw["mining"]["temperature"], lambda v: 0.0 <= v <= 2.0, "must lie in [0, 2]")
    check("backend.kind", raw["backend"]["kind"], lambda v: v in BACKENDS, f"must be one of {BACKENDS}")
    check("search.max_calls", raw["search"]["max_calls"], lambda v: v is None or (is_int(v) and v >= 1),
          "must be null or a positive integer")

    rating = _build("rating", lambda: RatingConfig(**raw["rating"]), problems)
    consensus = _build("consensus", lambda: ConsensusConfig(**raw["consensus"]), problems)
    hybrid = _build("hybrid", lambda: HybridConfig.from_dict(raw["hybrid"]), problems)
    search_fields = {k: v for k, v in raw["search"].items() if k != "max_calls"}
    search = _build("search", lambda: SearchConfig(seed=raw["seed"], **search_fields), problems)
    if problems:
        raise ConfigError(problems)
    temps = AgentTemperatures(sc["observer_temp"], sc["debater_temp"], sc["judge_temp"], sc["single_temp"])
    return RunConfig(raw, rating, consensus, hybrid, search, temps)


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read a JSON config file (``None`` for defaults), then apply ``overrides``."""
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config {path} is not valid JSON: {exc}"]) from exc
        if not isinstance(doc, dict):
            raise ConfigError([f"config {path} must hold a JSON object"])
    if overrides:
        merged = copy.deepcopy(doc)
        for k, v in overrides.items():
            if isinstance(v, Mapping):
                merged.setdefault(k, {})
                if isinstance(merged[k], dict):
                    merged[k].update(v)
                    continue
            merged[k] = v
        doc = merged
    return build_config(doc)

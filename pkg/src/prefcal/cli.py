"""Command-line entry point: ``prefcal <subcommand> [--config FILE] [--out DIR]``.

Artifacts live under ``<out>/<category>/<stage>/<artifact>`` and every
write is recorded in ``<out>/manifest.json`` with its sha256 digest. A file
is rewritten only when its content changes, so repeating a command with
the same inputs leaves the run directory untouched.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from prefcal import __version__
from prefcal.calibration import (
    HybridConfig,
    ScoredPair,
    report_lines,
    weight_statistics,
)
from prefcal.config import DEFAULTS, RunConfig, flat_defaults, load_config
from prefcal.dataio import (
    ComparisonRecord,
    DatasetSplit,
    load_embeddings,
    parse_comparisons,
    write_embeddings,
)
from prefcal.errors import (
    BackendError,
    CompositionError,
    ConfigError,
    IngestionError,
    MissingArtifactError,
    ParameterError,
    PrefcalError,
)
from prefcal.evaluation import EvalReport, format_power, format_table
from prefcal.labels import Label
from prefcal.mining import DimensionSet, build_extraction_prompt, parse_dimension_response
from prefcal.pipeline import (
    CategoryData,
    SearchAdapter,
    calibrate_and_evaluate,
    consensus_context,
    derive_seed,
    prepare_category,
)
from prefcal.ratings import rate_all, ratings_csv, read_ratings
from prefcal.scoring.cache import ScoreCache
from prefcal.scoring.client import HttpBackend, MockBackend, VlmClient, VlmRequest
from prefcal.scoring.scorer import PairScores, Scorer
from prefcal.search import optimize as run_search
from prefcal.synthetic import SyntheticResponder, WorldConfig, make_world

logger = logging.getLogger("prefcal")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_BACKEND = 0, 1, 2, 3
SWEEPABLE = ("alpha", "K", "tau_kernel", "lambda", "epsilon", "theta", "selection_ratio")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


class RunDir:
    """Run directory with a digest manifest and write-if-changed semantics."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.json"
        self.manifest: dict[str, str] = {}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def write(self, rel: Path | str, text: str) -> bool:
        path = self.root / rel
        data = text.encode("utf-8")
        changed = not path.exists() or path.read_bytes() != data
        if changed:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
        key = Path(rel).as_posix()
        if self.manifest.get(key) != _sha(data):
            self.manifest[key] = _sha(data)
            self._save_manifest()
        return changed

    def _save_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(_dump(dict(sorted(self.manifest.items()))), encoding="utf-8")

    def require(self, rel: Path | str, producer: str) -> Path:
        path = self.root / rel
        if not path.exists():
            raise MissingArtifactError(str(path), producer)
        return path

    def read(self, rel: Path | str, producer: str) -> str:
        return self.require(rel, producer).read_text(encoding="utf-8")


def _art(category: str, stage: str, name: str) -> str:
    return f"{category}/{stage}/{name}"


class Context:
    """Resolved configuration plus lazily loaded shared inputs."""

    def __init__(self, cfg: RunConfig, base: Path, out: Path, categories: Sequence[str] | None):
        self.cfg = cfg
        self.base = base
        self.run = RunDir(out)
        self.categories = list(categories) if categories else cfg.categories
        unknown = [c for c in self.categories if c not in cfg.categories]
        if unknown:
            raise ParameterError(f"categories not in the config: {', '.join(unknown)}")
        self._embeddings: dict[str, np.ndarray] | None = None
        self._client: VlmClient | None = None

    def input_path(self, key: str) -> Path:
        p = Path(self.cfg.section("paths")[key])
        return p if p.is_absolute() else self.base / p

    @property
    def embeddings(self) -> dict[str, np.ndarray]:
        if self._embeddings is None:
            path = self.input_path("embeddings")
            if not path.exists():
                raise IngestionError(f"embedding file {path} not found")
            self._embeddings = load_embeddings(path, self.cfg.section("paths")["embeddings_format"])
        return self._embeddings

    @property
    def client(self) -> VlmClient:
        if self._client is None:
            b = self.cfg.section("backend")
            if b["kind"] == "synthetic":
                world = make_world(WorldConfig(n_images=b["world_images"], n_pairs=b["world_pairs"],
                                               seed=b["world_seed"]))
                backend: Any = MockBackend(responder=SyntheticResponder(world, derive_seed(self.cfg.seed, "vlm")))
            elif b["kind"] == "fixtures":
                if not b["fixtures"]:
                    raise ConfigError(["backend.fixtures must name a JSON file for the fixtures backend"])
                fixtures = json.loads(Path(self.base / b["fixtures"]).read_text(encoding="utf-8"))
                backend = MockBackend(fixtures=fixtures)
            else:
                backend = HttpBackend(b["base_url"], b["model"], timeout=b["timeout"])
            self._client = VlmClient(backend, max_attempts=self.cfg.section("scoring")["max_attempts"])
        return self._client

    def scorer(self, dims: DimensionSet) -> Scorer:
        sc = self.cfg.section("scoring")
        cache = ScoreCache(self.run.path("cache", "scores.jsonl"))
        return Scorer(self.client, dims, sc["mode"], sc["sigma_i"], self.cfg.temps, cache,
                      max_workers=sc["max_workers"])

    def category_data(self, category: str) -> CategoryData:
        filtered = [ComparisonRecord.from_dict(json.loads(line)) for line in
                    self.run.read(_art(category, "ingest", "filtered.jsonl"), "ingest").splitlines() if line]
        split = DatasetSplit.from_dict(json.loads(self.run.read(_art(category, "ingest", "split.json"), "ingest")))
        ratings = read_ratings(self.run.require(_art(category, "rate", "ratings.csv"), "rate"))
        return CategoryData(category, filtered, split, ratings)

    def dimensions(self, category: str) -> DimensionSet:
        text = self.run.read(_art(category, "mine", "dimensions.json"), "mine")
        return DimensionSet.from_dict(json.loads(text))

    def scored(self, category: str) -> tuple[DimensionSet, list[ScoredPair], list[ScoredPair]]:
        text = self.run.read(_art(category, "score", "scores.jsonl"), "score")
        head, *rows = [json.loads(line) for line in text.splitlines() if line]
        dims = DimensionSet.from_dict(head["dimension_set"])
        ref, pool = [], []
        for row in rows:
            sp = ScoredPair(row["left_id"], row["right_id"], PairScores.from_dict(row["scores"]),
                            Label.parse(row["label"]))
            (ref if row["side"] == "reference" else pool).append(sp)
        return dims, ref, pool


# -- stages -----------------------------------------------------------------


def cmd_ingest(ctx: Context, args: argparse.Namespace) -> int:
    path = ctx.input_path("comparisons")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read comparisons {path}: {exc}") from exc
    result = parse_comparisons(raw)
    ctx.run.write("ingest/rejects.txt", result.rejects_report())
    if result.rejects:
        logger.warning("%d malformed rows; see %s", len(result.rejects), ctx.run.path("ingest", "rejects.txt"))
    data = ctx.cfg.section("data")
    for c in ctx.categories:
        cd = prepare_category(result.records, c, data["sample_size"], data["ratio"],
                              derive_seed(ctx.cfg.seed, "split", c), ctx.cfg.rating, data["min_votes"],
                              data["min_agreement"])
        ctx.run.write(_art(c, "ingest", "filtered.jsonl"),
                      "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in cd.filtered))
        ctx.run.write(_art(c, "ingest", "split.json"), _dump(cd.split.to_dict()))
        print(f"{c}: {len(cd.filtered)} comparisons kept, {len(cd.split.reference)} reference, "
              f"{len(cd.split.pool)} pool")
    return EXIT_OK


def cmd_rate(ctx: Context, args: argparse.Namespace) -> int:
    data = ctx.cfg.section("data")
    for c in ctx.categories:
        filtered = [ComparisonRecord.from_dict(json.loads(line)) for line in
                    ctx.run.read(_art(c, "ingest", "filtered.jsonl"), "ingest").splitlines() if line]
        split = DatasetSplit.from_dict(json.loads(ctx.run.read(_art(c, "ingest", "split.json"), "ingest")))
        held_out = {r.pair_identity for r in split.pool}
        rated = [r for r in filtered if r.pair_identity not in held_out]
        if not rated:
            raise CompositionError(f"{c}: nothing left to rate after holding out the pool")
        ratings = rate_all(rated, ctx.cfg.rating)
        ctx.run.write(_art(c, "rate", "ratings.csv"), ratings_csv(ratings))
        print(f"{c}: rated {len(ratings)} images from {len(rated)} comparisons (min_votes={data['min_votes']})")
    return EXIT_OK


def cmd_mine(ctx: Context, args: argparse.Namespace) -> int:
    for c in ctx.categories:
        target = _art(c, "mine", "dimensions.json")
        if ctx.run.path(target).exists() and not args.force:
            print(f"{c}: dimensions already mined (use --force to regenerate)")
            continue
        data = ctx.category_data(c)
        mctx = consensus_context(data, ctx.embeddings, ctx.cfg.consensus)
        prompt = build_extraction_prompt(mctx.consensus, mctx.ratings, mctx.pca, c)
        req = VlmRequest(prompt, temperature=ctx.cfg.section("mining")["temperature"], role_tag="miner",
                         tags={"category": c, "stage": "mine", "phase": "explore", "trial": None, "elite": None})
        text = ctx.client.complete(req)
        dims = parse_dimension_response(text, c, provenance="mined")
        ctx.run.write(_art(c, "mine", "prompt.txt"), prompt)
        ctx.run.write(_art(c, "mine", "response.txt"), text)
        ctx.run.write(target, dims.to_json())
        print(f"{c}: {len(dims)} dimensions: {', '.join(dims.names)}")
    return EXIT_OK


def cmd_score(ctx: Context, args: argparse.Namespace) -> int:
    for c in ctx.categories:
        dims = ctx.dimensions(c)
        split = DatasetSplit.from_dict(json.loads(ctx.run.read(_art(c, "ingest", "split.json"), "ingest")))
        records = [("reference", r) for r in split.reference] + [("pool", r) for r in split.pool]
        scores = ctx.scorer(dims).score_pairs([(r.left_id, r.right_id) for _, r in records])
        lines = [json.dumps({"dimension_set": dims.to_dict(), "mode": ctx.cfg.section("scoring")["mode"]},
                            sort_keys=True)]
        lines += [json.dumps({"side": side, "left_id": r.left_id, "right_id": r.right_id,
                              "label": r.label.value, "scores": s.to_dict()}, sort_keys=True)
                  for (side, r), s in zip(records, scores)]
        ctx.run.write(_art(c, "score", "scores.jsonl"), "\n".join(lines) + "\n")
        print(f"{c}: scored {len(records)} pairs")
    logger.info("usage: %s", ctx.client.counter.snapshot() if ctx._client else "no calls")
    return EXIT_OK


def _calibrate(ctx: Context, category: str, hybrid: HybridConfig):
    dims, ref, pool = ctx.scored(category)
    ratings = read_ratings(ctx.run.require(_art(category, "rate", "ratings.csv"), "rate"))
    return dims, calibrate_and_evaluate(category, dims, ref, pool, ctx.embeddings, ratings, hybrid)


def cmd_calibrate(ctx: Context, args: argparse.Namespace) -> int:
    for c in ctx.categories:
        dims, run = _calibrate(ctx, c, ctx.cfg.hybrid)
        ctx.run.write(_art(c, "calibrate", "report.jsonl"), report_lines(run.results))
        fitted = [r for r in run.results if not r.degenerate]
        stats = weight_statistics(fitted, dims.names) if len(fitted) >= 2 else []
        ctx.run.write(_art(c, "calibrate", "weights.json"),
                      _dump([{"dimension": s.dimension, "mean": s.mean, "std": s.std, "cv": s.cv}
                             for s in stats]))
        ctx.run.write(_art(c, "calibrate", "summary.json"),
                      _dump({"calibrated": run.calibrated.to_dict(), "raw": run.raw.to_dict()}))
        print(f"{c}: calibrated {len(run.results)} pool pairs "
              f"(accuracy {100 * run.calibrated.acc_incl:.1f}% vs raw {100 * run.raw.acc_incl:.1f}%)")
    return EXIT_OK


def _average(reports: Sequence[EvalReport], method: str) -> EvalReport:
    def mean(attr: str) -> float | None:
        vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return EvalReport(n_total=sum(r.n_total for r in reports), n_excl_equal=sum(r.n_excl_equal for r in reports),
                      acc_incl=mean("acc_incl"), acc_excl=mean("acc_excl"), kappa_incl=mean("kappa_incl"),
                      kappa_excl=mean("kappa_excl"), macro_f1=mean("macro_f1"), category="Avg", method=method)


def cmd_evaluate(ctx: Context, args: argparse.Namespace) -> int:
    report: dict[str, Any] = {"categories": {}}
    cal, raw = [], []
    for c in ctx.categories:
        summary = json.loads(ctx.run.read(_art(c, "calibrate", "summary.json"), "calibrate"))
        rc = EvalReport(**summary["calibrated"])
        rr = EvalReport(**summary["raw"])
        ctx.run.write(_art(c, "evaluate", "report.json"), _dump(summary))
        report["categories"][c] = summary
        cal.append(rc)
        raw.append(rr)
    avg_cal, avg_raw = _average(cal, "calibrated"), _average(raw, "raw")
    report["average"] = {"calibrated": avg_cal.to_dict(), "raw": avg_raw.to_dict()}
    ctx.run.write("report.json", _dump(report))
    rows = [r for pair in zip(raw, cal) for r in pair] + [avg_raw, avg_cal]
    print(format_table(rows), end="")
    for r in cal:
        if r.per_dimension_power:
            print(f"\n{r.category}: single-dimension power")
            print(format_power(r.per_dimension_power), end="")
    return EXIT_OK


def cmd_run(ctx: Context, args: argparse.Namespace) -> int:
    for step in (cmd_ingest, cmd_rate, cmd_mine, cmd_score, cmd_calibrate, cmd_evaluate):
        step(ctx, args)
    return EXIT_OK


def cmd_optimize(ctx: Context, args: argparse.Namespace) -> int:
    data = {c: ctx.category_data(c) for c in ctx.categories}
    sc = ctx.cfg.section("scoring")
    adapter = SearchAdapter(data, ctx.embeddings, ctx.client, ctx.cfg.search, ctx.cfg.hybrid, sc["mode"],
                            ctx.cfg.temps, ScoreCache(ctx.run.path("cache", "scores.jsonl")), sc["max_workers"],
                            ctx.cfg.consensus, ctx.cfg.max_calls)
    result = run_search(ctx.cfg.search, adapter, ctx.run.path("optimize"), resume=args.resume)
    for t in result.trials:
        ctx.run.write(f"optimize/trials/trial_{t.trial_index:03d}.json", _dump(t.to_dict()))
    ctx.run.write("optimize/assembly.json", _dump(result.assembly))
    width = max(len(c) for c in ctx.categories)
    print(f"{'category'.ljust(width)}  accuracy  trial")
    for c, entry in result.assembly.items():
        if entry["status"] == "ok":
            print(f"{c.ljust(width)}  {100 * entry['accuracy']:7.1f}%  {entry['source_trial']:5d}")
        else:
            print(f"{c.ljust(width)}  unresolved")
    stop = "early stop" if result.stopped_early else "all trials"
    print(f"{len(result.trials)} trials ({stop})")
    return EXIT_OK


def _parse_values(param: str, text: str) -> list[float | int]:
    cast: Callable[[str], float | int] = int if param == "K" else float
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ParameterError(f"bad --values for {param}: {exc}") from None


def cmd_sweep(ctx: Context, args: argparse.Namespace) -> int:
    if args.param not in SWEEPABLE:
        raise ParameterError(f"--param must be one of {', '.join(SWEEPABLE)}")
    values = _parse_values(args.param, args.values)
    if not values:
        raise ParameterError("--values is empty")
    base = ctx.cfg.hybrid.to_dict()
    rows = []
    for v in values:
        hybrid = HybridConfig.from_dict({**base, args.param: v})
        accs = {}
        for c in ctx.categories:
            _, run = _calibrate(ctx, c, hybrid)
            value = getattr(run.calibrated, args.metric)
            accs[c] = value
        present = [a for a in accs.values() if a is not None]
        rows.append({"value": v, "per_category": accs, "avg": float(np.mean(present)) if present else None})
    ctx.run.write(f"sweep/{args.param}.json", _dump({"param": args.param, "metric": args.metric, "rows": rows}))
    scale = 1.0 if args.metric.startswith("kappa") else 100.0
    header = [args.param] + ctx.categories + ["Avg"]
    table = [[str(r["value"])] + [("n/a" if r["per_category"][c] is None else f"{scale * r['per_category'][c]:.1f}")
                                  for c in ctx.categories] + [f"{scale * r['avg']:.1f}" if r["avg"] is not None
                                                              else "n/a"] for r in rows]
    widths = [max(len(h), *(len(t[i]) for t in table)) for i, h in enumerate(header)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for t in table:
        print("  ".join(x.rjust(w) for x, w in zip(t, widths)))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    """Write a synthetic vote table, embeddings and a matching config."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = make_world(WorldConfig(n_images=args.images, n_pairs=args.pairs, seed=args.world_seed))
    (out / "comparisons.csv").write_text(world.votes_csv(), encoding="utf-8")
    write_embeddings(out / "embeddings.txt", world.embeddings)
    cfg = {
        "paths": {"comparisons": "comparisons.csv", "embeddings": "embeddings.txt", "out_dir": "run"},
        "data": {"sample_size": args.sample_size},
        "search": {"eval_fraction": 1.0},
        "backend": {"kind": "synthetic", "world_seed": args.world_seed, "world_images": args.images,
                    "world_pairs": args.pairs},
    }
    (out / "config.json").write_text(_dump(cfg), encoding="utf-8")
    print(f"wrote {out / 'comparisons.csv'}, {out / 'embeddings.txt'} and {out / 'config.json'}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------


def _epilog() -> str:
    lines = ["config keys (JSON, dotted path = nested object) and defaults:"]
    for key, value in flat_defaults(DEFAULTS):
        lines.append(f"  {key} = {json.dumps(value)}")
    lines.append("")
    lines.append("exit status: 0 success, 1 validation error, 2 runtime error, 3 backend error")
    lines.append("the http backend reads its API key from PREFCAL_API_KEY")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefcal",
        description="Calibrate VLM concept scores against human pairwise preferences.",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"prefcal {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults when omitted)")
    common.add_argument("--out", help="run directory (overrides paths.out_dir)")
    common.add_argument("--category", action="append", help="restrict to a category (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (overrides seed)")
    common.add_argument("--comparisons", help="vote table (overrides paths.comparisons)")
    common.add_argument("--embeddings", help="embedding file (overrides paths.embeddings)")
    common.add_argument("--embeddings-format", choices=("text", "npz"), help="embedding codec")
    common.add_argument("-v", "--verbose", action="count", default=0)

    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "parse, filter and split the vote table",
        "rate": "TrueSkill ratings from reference-side comparisons",
        "mine": "extract a dimension set per category",
        "score": "score reference and pool pairs",
        "calibrate": "locally weighted ridge calibration of pool pairs",
        "evaluate": "metrics report and table",
        "run": "ingest, rate, mine, score, calibrate and evaluate in one go",
        "optimize": "two-phase dimension-set search",
        "sweep": "vary one calibration parameter over a grid",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text, epilog=_epilog(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name in ("mine", "run"):
            p.add_argument("--force", action="store_true", help="regenerate existing dimension sets")
        if name == "optimize":
            p.add_argument("--resume", action="store_true", help="continue the trial ledger in the run directory")
        if name == "sweep":
            p.add_argument("--param", required=True, choices=SWEEPABLE)
            p.add_argument("--values", required=True, help="comma-separated grid, e.g. 10,20,30,50")
            p.add_argument("--metric", default="acc_incl",
                           choices=("acc_incl", "acc_excl", "kappa_incl", "kappa_excl", "macro_f1"))
    sp = sub.add_parser("synth", help="write a synthetic dataset with planted structure")
    sp.add_argument("--out", required=True)
    sp.add_argument("--images", type=int, default=100)
    sp.add_argument("--pairs", type=int, default=400)
    sp.add_argument("--sample-size", type=int, default=40)
    sp.add_argument("--world-seed", type=int, default=0)
    sp.add_argument("-v", "--verbose", action="count", default=0)
    return parser


COMMANDS: dict[str, Callable[[Context, argparse.Namespace], int]] = {
    "ingest": cmd_ingest, "rate": cmd_rate, "mine": cmd_mine, "score": cmd_score, "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate, "run": cmd_run, "optimize": cmd_optimize, "sweep": cmd_sweep,
}


def _context(args: argparse.Namespace) -> Context:
    overrides: dict[str, Any] = {}
    paths = {k: getattr(args, a) for k, a in (("comparisons", "comparisons"), ("embeddings", "embeddings"),
                                              ("embeddings_format", "embeddings_format"))
             if getattr(args, a) is not None}
    if paths:
        overrides["paths"] = paths
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    base = Path(args.config).resolve().parent if args.config else Path.cwd()
    out = Path(args.out) if args.out else base / cfg.section("paths")["out_dir"]
    return Context(cfg, base, out, args.category)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        return COMMANDS[args.command](_context(args), args)
    except (ConfigError, ParameterError, IngestionError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (PrefcalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

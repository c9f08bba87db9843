"""Agreement metrics, per-dimension discriminability and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

from prefcal.errors import EvaluationError
from prefcal.labels import Label

LABELS = (Label.LEFT, Label.RIGHT, Label.EQUAL)


def _aligned(preds: Sequence, labels: Sequence) -> tuple[list[Label], list[Label]]:
    if len(preds) != len(labels):
        raise EvaluationError(f"{len(preds)} predictions for {len(labels)} labels")
    return [Label.parse(p) for p in preds], [Label.parse(y) for y in labels]


def _drop_equal(preds: list[Label], labels: list[Label]) -> tuple[list[Label], list[Label]]:
    kept = [(p, y) for p, y in zip(preds, labels) if y is not Label.EQUAL]
    return [p for p, _ in kept], [y for _, y in kept]


def accuracy(preds: Sequence, labels: Sequence, exclude_equal: bool = False) -> float:
    """Exact-match rate.

    With ``exclude_equal`` the pairs whose human label is equal are dropped
    first; an "equal" prediction on a remaining pair is an error.
    """
    p, y = _aligned(preds, labels)
    if exclude_equal:
        p, y = _drop_equal(p, y)
    if not y:
        raise EvaluationError("no pairs left to score")
    return sum(a is b for a, b in zip(p, y)) / len(y)


def cohens_kappa(preds: Sequence, labels: Sequence) -> float | None:
    """Chance-corrected agreement; ``None`` when expected agreement is 1."""
    p, y = _aligned(preds, labels)
    n = len(y)
    if n == 0:
        raise EvaluationError("kappa of an empty list")
    p_o = sum(a is b for a, b in zip(p, y)) / n
    p_e = sum((p.count(c) / n) * (y.count(c) / n) for c in LABELS)
    if p_e >= 1.0:
        return None
    return (p_o - p_e) / (1.0 - p_e)


def macro_f1(preds: Sequence, labels: Sequence) -> float:
    """Mean per-class F1 over the classes present in ``labels``."""
    p, y = _aligned(preds, labels)
    if not y:
        raise EvaluationError("macro-F1 of an empty list")
    scores = []
    for c in LABELS:
        if c not in y:
            continue
        tp = sum(a is c and b is c for a, b in zip(p, y))
        fp = sum(a is c and b is not c for a, b in zip(p, y))
        fn = sum(a is not c and b is c for a, b in zip(p, y))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return sum(scores) / len(scores)


def dimension_power(
    scores_a: Sequence[Sequence[float]],
    scores_b: Sequence[Sequence[float]],
    labels: Sequence,
    names: Sequence[str],
) -> dict[str, float]:
    """Fraction of non-equal pairs whose single-dimension difference picks the human winner.

    A zero difference on a dimension counts as incorrect.
    """
    if not (len(scores_a) == len(scores_b) == len(labels)):
        raise EvaluationError("scores and labels are not aligned")
    rows = [(a, b, Label.parse(y)) for a, b, y in zip(scores_a, scores_b, labels)]
    rows = [r for r in rows if r[2] is not Label.EQUAL]
    if not rows:
        raise EvaluationError("dimension power needs at least one non-equal pair")
    power = {}
    for j, name in enumerate(names):
        hits = 0
        for a, b, y in rows:
            d = a[j] - b[j]
            hits += (d > 0 and y is Label.LEFT) or (d < 0 and y is Label.RIGHT)
        power[name] = hits / len(rows)
    return power


@dataclass(frozen=True)
class EvalReport:
    n_total: int
    n_excl_equal: int
    acc_incl: float
    acc_excl: float | None
    kappa_incl: float | None
    kappa_excl: float | None
    macro_f1: float
    per_dimension_power: dict[str, float] = field(default_factory=dict)
    category: str | None = None
    method: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(
    preds: Sequence,
    labels: Sequence,
    power: Mapping[str, float] | None = None,
    category: str | None = None,
    method: str | None = None,
) -> EvalReport:
    p, y = _aligned(preds, labels)
    if not y:
        raise EvaluationError("nothing to evaluate")
    pe, ye = _drop_equal(p, y)
    return EvalReport(
        n_total=len(y),
        n_excl_equal=len(ye),
        acc_incl=accuracy(p, y),
        acc_excl=accuracy(pe, ye) if ye else None,
        kappa_incl=cohens_kappa(p, y),
        kappa_excl=cohens_kappa(pe, ye) if ye else None,
        macro_f1=macro_f1(p, y),
        per_dimension_power=dict(power or {}),
        category=category,
        method=method,
    )


def _fmt(v: float | None, pct: bool) -> str:
    if v is None:
        return "n/a"
    return f"{100 * v:.1f}" if pct else f"{v:.3f}"


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table, one row per report."""
    header = ["category", "method", "n", "acc_incl", "acc_excl", "kappa_incl", "kappa_excl", "macro_f1"]
    rows = [
        [r.category or "-", r.method or "-", str(r.n_total), _fmt(r.acc_incl, True), _fmt(r.acc_excl, True),
         _fmt(r.kappa_incl, False), _fmt(r.kappa_excl, False), _fmt(r.macro_f1, True)]
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def format_power(power: Mapping[str, float]) -> str:
    if not power:
        return ""
    width = max(len(k) for k in power)
    ranked = sorted(power.items(), key=lambda kv: (-kv[1], kv[0]))
    return "".join(f"{name.ljust(width)}  {100 * v:5.1f}%\n" for name, v in ranked)

"""Two-player Gaussian TrueSkill over aggregated pairwise comparisons.

Only the 1-vs-1 case is implemented, without a dynamics term, so sigma
shrinks monotonically with every update.

Draw margin: for a pair with combined performance spread
``c = sqrt(2*beta**2 + sigma_a**2 + sigma_b**2)`` we use
``eps = Phi^-1((1 + p_draw) / 2) * c``. Two equal-mean players then observe a
performance difference ``N(0, c**2)`` that falls inside ``(-eps, eps)`` with
probability ``p_draw``. In units of ``c`` the margin is the constant
``Phi^-1((1 + p_draw) / 2)``.

The normal CDF uses ``math.erfc`` (libm, accurate to a few ulp) which keeps
tail probabilities accurate where ``1 - Phi`` would cancel.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping

from prefcal.dataio import ComparisonRecord
from prefcal.errors import NumericError, ParameterError
from prefcal.labels import Label

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Rating:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise NumericError(f"non-finite rating ({self.mu}, {self.sigma})")
        if self.sigma <= 0:
            raise NumericError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class RatingConfig:
    mu0: float = 25.0
    sigma0: float = 8.33
    beta: float = 4.17
    draw_probability: float = 0.10
    passes: int = 3

    def __post_init__(self):
        if not 0.0 < self.draw_probability < 1.0:
            raise ParameterError("draw_probability must lie in (0, 1)")
        if self.beta <= 0 or self.sigma0 <= 0:
            raise ParameterError("beta and sigma0 must be positive")
        if self.passes < 1:
            raise ParameterError("passes must be >= 1")

    @property
    def prior(self) -> Rating:
        return Rating(self.mu0, self.sigma0)

    @property
    def draw_margin_units(self) -> float:
        """Draw margin divided by the pair's combined performance spread."""
        return NormalDist().inv_cdf((1.0 + self.draw_probability) / 2.0)


def norm_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def _v_win(t: float, eps: float) -> float:
    x = t - eps
    denom = norm_cdf(x)
    if denom < 1e-300:
        return -x
    return norm_pdf(x) / denom


def _w_win(t: float, eps: float) -> float:
    x = t - eps
    denom = norm_cdf(x)
    if denom < 1e-300:
        return 1.0 if x < 0 else 0.0
    v = norm_pdf(x) / denom
    return v * (v + x)


def _v_draw(t: float, eps: float) -> float:
    # Odd in t; evaluated on |t| so swapped inputs give exactly negated output.
    a = abs(t)
    denom = norm_cdf(eps - a) - norm_cdf(-eps - a)
    if denom < 1e-300:
        v = -a - eps
    else:
        v = (norm_pdf(-eps - a) - norm_pdf(eps - a)) / denom
    return v if t >= 0 else -v


def _w_draw(t: float, eps: float) -> float:
    a = abs(t)
    denom = norm_cdf(eps - a) - norm_cdf(-eps - a)
    if denom < 1e-300:
        return 1.0
    v = (norm_pdf(-eps - a) - norm_pdf(eps - a)) / denom
    return v * v + ((eps - a) * norm_pdf(eps - a) + (eps + a) * norm_pdf(eps + a)) / denom


def update_pair(a: Rating, b: Rating, outcome: Label | str, cfg: RatingConfig) -> tuple[Rating, Rating]:
    """Posterior ratings of ``a`` (left) and ``b`` (right) after one comparison."""
    for r in (a, b):
        if not (math.isfinite(r.mu) and math.isfinite(r.sigma)):
            raise NumericError(f"non-finite rating {r}")
    outcome = Label.parse(outcome)
    if outcome is Label.RIGHT:
        new_b, new_a = _update_win(b, a, cfg)
        return new_a, new_b
    if outcome is Label.LEFT:
        return _update_win(a, b, cfg)

    var_a, var_b = a.sigma * a.sigma, b.sigma * b.sigma
    c2 = 2.0 * cfg.beta * cfg.beta + (var_a + var_b)
    c = math.sqrt(c2)
    eps = cfg.draw_margin_units
    t = (a.mu - b.mu) / c
    v, w = _v_draw(t, eps), _w_draw(t, eps)
    return (
        Rating(a.mu + var_a / c * v, math.sqrt(var_a * (1.0 - var_a / c2 * w))),
        Rating(b.mu - var_b / c * v, math.sqrt(var_b * (1.0 - var_b / c2 * w))),
    )


def _update_win(winner: Rating, loser: Rating, cfg: RatingConfig) -> tuple[Rating, Rating]:
    var_w, var_l = winner.sigma * winner.sigma, loser.sigma * loser.sigma
    c2 = 2.0 * cfg.beta * cfg.beta + (var_w + var_l)
    c = math.sqrt(c2)
    eps = cfg.draw_margin_units
    t = (winner.mu - loser.mu) / c
    v, w = _v_win(t, eps), _w_win(t, eps)
    return (
        Rating(winner.mu + var_w / c * v, math.sqrt(var_w * (1.0 - var_w / c2 * w))),
        Rating(loser.mu - var_l / c * v, math.sqrt(var_l * (1.0 - var_l / c2 * w))),
    )


def rate_all(comparisons: Iterable[ComparisonRecord], cfg: RatingConfig | None = None) -> dict[str, Rating]:
    """Rate every image that appears in ``comparisons``.

    Each record contributes one update with its majority label. Records are
    processed in the canonical order ``(left_id, right_id, input index)`` and
    the whole sequence is replayed ``cfg.passes`` times.
    """
    cfg = cfg or RatingConfig()
    comps = list(comparisons)
    if not comps:
        raise ParameterError("rate_all needs at least one comparison")
    order = sorted(range(len(comps)), key=lambda i: (comps[i].left_id, comps[i].right_id, i))
    ratings: dict[str, Rating] = {}
    prior = cfg.prior
    for _ in range(cfg.passes):
        for i in order:
            rec = comps[i]
            a = ratings.get(rec.left_id, prior)
            b = ratings.get(rec.right_id, prior)
            ratings[rec.left_id], ratings[rec.right_id] = update_pair(a, b, rec.label, cfg)
    return dict(sorted(ratings.items()))


def ratings_csv(ratings: Mapping[str, Rating]) -> str:
    """``image_id,mu,sigma`` table sorted by id, floats written at full precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "mu", "sigma"])
    for image_id in sorted(ratings):
        r = ratings[image_id]
        writer.writerow([image_id, repr(r.mu), repr(r.sigma)])
    return buf.getvalue()


def write_ratings(path: str | Path, ratings: Mapping[str, Rating]) -> None:
    Path(path).write_text(ratings_csv(ratings), encoding="utf-8")


def read_ratings(path: str | Path) -> dict[str, Rating]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return {row["image_id"]: Rating(float(row["mu"]), float(row["sigma"])) for row in csv.DictReader(fh)}

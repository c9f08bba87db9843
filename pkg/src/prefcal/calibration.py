"""Stage 3: locally-weighted ridge regression on the hybrid differential manifold.

For a query pair the pipeline is: hybrid differential -> cosine K-NN over the
mirror-augmented reference manifold -> exponential kernel weights -> weighted
ridge fit of TrueSkill differences on semantic differences -> calibrated
margin -> three-way label.

Semantic differences are divided by 10 everywhere (manifold rows, ridge
design matrix and the query), so local weights are in TrueSkill units per
normalised score step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

from prefcal.errors import CompositionError, NumericError, ParameterError
from prefcal.labels import Label
from prefcal.ratings import Rating
from prefcal.scoring.scorer import PairScores

R2_MIN_VARIANCE = 1e-12
CV_MIN_MEAN = 1e-12


@dataclass(frozen=True)
class HybridConfig:
    alpha: float = 0.3
    K: int = 20
    tau_kernel: float = 1.0
    lam: float = 1.0
    epsilon: float = 0.8
    theta: float = 0.6
    selection_ratio: float = 1.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ParameterError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if not 0.0 <= self.alpha <= 1.0:
            out.append(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.K) != self.K or self.K < 1:
            out.append(f"K must be an integer >= 1, got {self.K}")
        if not self.tau_kernel > 0:
            out.append(f"tau_kernel must be positive, got {self.tau_kernel}")
        if not self.lam >= 0:
            out.append(f"lambda must be non-negative, got {self.lam}")
        if not self.epsilon >= 0:
            out.append(f"epsilon must be non-negative, got {self.epsilon}")
        if not 0.0 <= self.theta <= 1.0:
            out.append(f"theta must lie in [0, 1], got {self.theta}")
        if not 0.0 < self.selection_ratio <= 1.0:
            out.append(f"selection_ratio must lie in (0, 1], got {self.selection_ratio}")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"alpha": self.alpha, "K": self.K, "tau_kernel": self.tau_kernel, "lambda": self.lam,
                "epsilon": self.epsilon, "theta": self.theta, "selection_ratio": self.selection_ratio}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> HybridConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True)
class ScoredPair:
    """A comparison together with its Stage 2 scores; ``label`` is the human label."""

    left_id: str
    right_id: str
    scores: PairScores
    label: Label | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.left_id, self.right_id)

    def swapped(self) -> ScoredPair:
        return ScoredPair(self.right_id, self.left_id, self.scores.swapped(),
                          None if self.label is None else self.label.flip())


@dataclass(frozen=True)
class ReferencePoint:
    hybrid: np.ndarray
    sem_diff: np.ndarray
    y_ts: float
    label: Label
    pair_key: tuple[str, str]
    mirrored: bool = False

    def mirror(self) -> ReferencePoint:
        return ReferencePoint(-self.hybrid, -self.sem_diff, -self.y_ts, self.label.flip(),
                              (self.pair_key[1], self.pair_key[0]), not self.mirrored)


def hybrid_diff(
    clip_a: np.ndarray, clip_b: np.ndarray, sem_a: Sequence[float], sem_b: Sequence[float], alpha: float
) -> np.ndarray:
    """``[alpha * (a/|a| - b/|b|), (1 - alpha) * (s_a - s_b) / 10]``."""
    clip_a = np.asarray(clip_a, dtype=np.float64)
    clip_b = np.asarray(clip_b, dtype=np.float64)
    sa = np.asarray(sem_a, dtype=np.float64)
    sb = np.asarray(sem_b, dtype=np.float64)
    if not (np.all(np.isfinite(clip_a)) and np.all(np.isfinite(clip_b))
            and np.all(np.isfinite(sa)) and np.all(np.isfinite(sb))):
        raise NumericError("non-finite input to hybrid_diff")
    na, nb = np.linalg.norm(clip_a), np.linalg.norm(clip_b)
    if na == 0 or nb == 0:
        raise NumericError("zero-norm CLIP embedding")
    clip_block = alpha * (clip_a / na - clip_b / nb)
    sem_block = (1.0 - alpha) * ((sa - sb) / 10.0)
    return np.concatenate([clip_block, sem_block])


class Manifold:
    """Mirror-augmented reference points with stacked arrays for search.

    ``points[:N]`` are the original pairs and ``points[N:]`` their mirrors in
    the same order. Ties in similarity are broken by the orientation-free
    pair identity, then original before mirror, so that the neighbour order
    of a query and of its negation correspond point-for-mirror-point.
    """

    def __init__(self, originals: Sequence[ReferencePoint]):
        if not originals:
            raise ParameterError("reference manifold is empty")
        originals = list(originals)
        self.points: list[ReferencePoint] = originals + [p.mirror() for p in originals]
        self.n_original = len(originals)
        self.hybrid = np.stack([p.hybrid for p in originals])
        self.norms = np.linalg.norm(self.hybrid, axis=1)
        self.sem = np.stack([p.sem_diff for p in self.points])
        self.y = np.array([p.y_ts for p in self.points])
        self.is_equal = np.array([p.label is Label.EQUAL for p in self.points])
        identity = [tuple(sorted(p.pair_key)) for p in originals]
        order = sorted(range(len(originals)), key=lambda i: (identity[i], originals[i].pair_key))
        rank = np.empty(len(originals), dtype=np.int64)
        rank[order] = np.arange(len(originals))
        self.tie_rank = np.concatenate([2 * rank, 2 * rank + 1])

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, i: int) -> ReferencePoint:
        return self.points[i]

    def similarities(self, query: np.ndarray) -> np.ndarray:
        """Cosine similarity of ``query`` to every point (zero for zero-norm points)."""
        q = np.asarray(query, dtype=np.float64)
        qn = np.linalg.norm(q)
        if qn == 0 or not np.isfinite(qn):
            raise NumericError("query hybrid vector is zero or non-finite")
        flip = _orientation(q) < 0
        if flip:
            q = -q
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(self.norms > 0, (self.hybrid @ q) / (self.norms * qn), 0.0)
        if flip:
            s = -s
        return np.concatenate([s, -s])


def _orientation(v: np.ndarray) -> float:
    nz = np.flatnonzero(v)
    return 0.0 if nz.size == 0 else float(np.sign(v[nz[0]]))


def build_reference_manifold(
    pairs: Iterable[ScoredPair],
    embeddings: Mapping[str, np.ndarray],
    ratings: Mapping[str, Rating],
    cfg: HybridConfig | None = None,
) -> Manifold:
    """Reference points for every pair plus their mirrors (twice as many points)."""
    cfg = cfg or HybridConfig()
    originals = []
    for p in pairs:
        for image_id in p.key:
            if image_id not in embeddings:
                raise CompositionError(f"pair {p.left_id}/{p.right_id}: no embedding for {image_id!r}")
            if image_id not in ratings:
                raise CompositionError(f"pair {p.left_id}/{p.right_id}: no rating for {image_id!r}")
        if p.label is None:
            raise CompositionError(f"pair {p.left_id}/{p.right_id}: reference pairs need a human label")
        h = hybrid_diff(embeddings[p.left_id], embeddings[p.right_id], p.scores.scores_a, p.scores.scores_b,
                        cfg.alpha)
        sem = (np.asarray(p.scores.scores_a) - np.asarray(p.scores.scores_b)) / 10.0
        y = ratings[p.left_id].mu - ratings[p.right_id].mu
        originals.append(ReferencePoint(h, sem, y, p.label, p.key))
    return Manifold(originals)


def knn_indices(query: np.ndarray, manifold: Manifold, K: int) -> tuple[np.ndarray, np.ndarray]:
    sims = manifold.similarities(query)
    order = np.lexsort((manifold.tie_rank, -sims))[: min(K, len(manifold))]
    return order, sims[order]


def knn_cosine(query: np.ndarray, manifold: Manifold, K: int) -> list[tuple[ReferencePoint, float]]:
    """The ``min(K, |manifold|)`` most cosine-similar points, most similar first."""
    idx, sims = knn_indices(query, manifold, K)
    return [(manifold.points[i], float(s)) for i, s in zip(idx, sims)]


def kernel_weights(similarities: np.ndarray | Sequence[float], tau_kernel: float) -> np.ndarray:
    if not tau_kernel > 0:
        raise ParameterError("tau_kernel must be positive")
    return np.exp(np.asarray(similarities, dtype=np.float64) / tau_kernel)


def ridge_solve(X: np.ndarray, W: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Weighted ridge estimate ``(X'WX + lam I)^-1 X'Wy`` by Cholesky factorisation.

    ``W`` is the vector of per-row weights.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ParameterError("lambda must be non-negative")
    if X.shape[0] < 1 or X.shape[0] != W.shape[0] or X.shape[0] != y.shape[0]:
        raise ParameterError(f"inconsistent shapes X{X.shape}, W{W.shape}, y{y.shape}")
    XtW = X.T * W
    A = XtW @ X + lam * np.eye(X.shape[1])
    b = XtW @ y
    if lam == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise NumericError("X'WX is singular; use lambda > 0")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"ridge system is not positive definite ({exc}); use lambda > 0") from exc
    return scipy.linalg.cho_solve(factor, b)


def local_r2(X: np.ndarray, W: np.ndarray, y: np.ndarray, w_hat: np.ndarray) -> float | None:
    """Weighted R^2 about the weighted mean of ``y``; ``None`` when that variance vanishes."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    y_bar = float(np.sum(W * y) / np.sum(W))
    ss_tot = float(np.sum(W * (y - y_bar) ** 2))
    if ss_tot / float(np.sum(W)) < R2_MIN_VARIANCE:
        return None
    resid = y - X @ np.asarray(w_hat, dtype=np.float64)
    return 1.0 - float(np.sum(W * resid**2)) / ss_tot


def reinfer(delta_hat: float, equal_consensus: float, epsilon: float, theta: float) -> Label:
    """Equal when ``|delta| < epsilon`` or ``c_eq > theta``; otherwise the sign of ``delta``.

    A margin of exactly zero has no sign and is also equal (only reachable with ``epsilon = 0``).
    """
    if abs(delta_hat) < epsilon or equal_consensus > theta or delta_hat == 0:
        return Label.EQUAL
    return Label.LEFT if delta_hat > 0 else Label.RIGHT


@dataclass(frozen=True)
class CalibrationResult:
    pair_key: tuple[str, str]
    delta_hat: float
    weights: np.ndarray
    r2: float | None
    equal_consensus: float
    predicted: Label
    neighbour_keys: list[tuple[str, str]] = field(default_factory=list)
    degenerate: bool = False
    human_label: Label | None = None

    def mirrored(self) -> CalibrationResult:
        return CalibrationResult(
            pair_key=(self.pair_key[1], self.pair_key[0]),
            delta_hat=-self.delta_hat,
            weights=self.weights,
            r2=self.r2,
            equal_consensus=self.equal_consensus,
            predicted=self.predicted.flip(),
            neighbour_keys=[(b, a) for a, b in self.neighbour_keys],
            degenerate=self.degenerate,
            human_label=None if self.human_label is None else self.human_label.flip(),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "left_id": self.pair_key[0],
            "right_id": self.pair_key[1],
            "delta_hat": self.delta_hat,
            "r2": self.r2,
            "equal_consensus": self.equal_consensus,
            "predicted": self.predicted.value,
            "human_label": None if self.human_label is None else self.human_label.value,
            "degenerate": self.degenerate,
            "neighbour_keys": [list(k) for k in self.neighbour_keys],
            "weights": [float(w) for w in self.weights],
        }


def calibrate_pair(
    pair: ScoredPair, embeddings: Mapping[str, np.ndarray], manifold: Manifold, cfg: HybridConfig | None = None
) -> CalibrationResult:
    """Calibrated margin, local weights, local R^2 and three-way label for one pool pair."""
    cfg = cfg or HybridConfig()
    for image_id in pair.key:
        if image_id not in embeddings:
            raise CompositionError(f"pair {pair.left_id}/{pair.right_id}: no embedding for {image_id!r}")
    q = hybrid_diff(embeddings[pair.left_id], embeddings[pair.right_id], pair.scores.scores_a,
                    pair.scores.scores_b, cfg.alpha)
    n = len(pair.scores.scores_a)
    if manifold.sem.shape[1] != n:
        raise CompositionError(f"manifold has {manifold.sem.shape[1]} dimensions, query has {n}")
    orientation = _orientation(q)
    if orientation == 0:
        return CalibrationResult(pair.key, 0.0, np.zeros(n), None, 0.0, Label.EQUAL, [], True, pair.label)
    if orientation < 0:
        # (A,B) and (B,A) share one evaluation, so mirror symmetry is exact.
        return calibrate_pair(pair.swapped(), embeddings, manifold, cfg).mirrored()

    idx, sims = knn_indices(q, manifold, cfg.K)
    w = kernel_weights(sims, cfg.tau_kernel)
    X = manifold.sem[idx]
    y = manifold.y[idx]
    w_hat = ridge_solve(X, w, y, cfg.lam)
    sem_q = (np.asarray(pair.scores.scores_a) - np.asarray(pair.scores.scores_b)) / 10.0
    delta = float(w_hat @ sem_q)
    c_eq = float(np.count_nonzero(manifold.is_equal[idx])) / len(idx)
    return CalibrationResult(
        pair_key=pair.key,
        delta_hat=delta,
        weights=w_hat,
        r2=local_r2(X, w, y, w_hat),
        equal_consensus=c_eq,
        predicted=reinfer(delta, c_eq, cfg.epsilon, cfg.theta),
        neighbour_keys=[manifold.points[i].pair_key for i in idx],
        degenerate=False,
        human_label=pair.label,
    )


def calibrate_all(
    pairs: Iterable[ScoredPair], embeddings: Mapping[str, np.ndarray], manifold: Manifold,
    cfg: HybridConfig | None = None,
) -> list[CalibrationResult]:
    return [calibrate_pair(p, embeddings, manifold, cfg) for p in pairs]


def apply_selection(results: Sequence[CalibrationResult], selection_ratio: float) -> list[CalibrationResult]:
    """Keep the ``ceil(ratio * N)`` most confident results (largest ``|delta_hat|``), in input order."""
    if not 0.0 < selection_ratio <= 1.0:
        raise ParameterError(f"selection_ratio must lie in (0, 1], got {selection_ratio}")
    if selection_ratio == 1.0:
        return list(results)
    keep = math.ceil(selection_ratio * len(results) - 1e-9)
    ranked = sorted(range(len(results)), key=lambda i: (-abs(results[i].delta_hat), results[i].pair_key))
    chosen = set(ranked[:keep])
    return [r for i, r in enumerate(results) if i in chosen]


@dataclass(frozen=True)
class WeightStat:
    dimension: str
    mean: float
    std: float
    cv: float | None


def weight_statistics(results: Sequence[CalibrationResult], names: Sequence[str]) -> list[WeightStat]:
    """Per-dimension mean, population std and CV of local weights, sorted by ``|mean|``.

    Degenerate results carry no fitted weights and are skipped. CV is
    ``None`` when ``|mean| < 1e-12``.
    """
    fitted = [r for r in results if not r.degenerate]
    if len(fitted) < 2:
        raise ParameterError(f"weight statistics need at least 2 results, got {len(fitted)}")
    W = np.stack([np.asarray(r.weights, dtype=np.float64) for r in fitted])
    if W.shape[1] != len(names):
        raise ParameterError(f"{len(names)} names for {W.shape[1]} weights")
    mean = W.mean(axis=0)
    std = W.std(axis=0)
    stats = [
        WeightStat(name, float(m), float(s), None if abs(m) < CV_MIN_MEAN else float(s / abs(m)))
        for name, m, s in zip(names, mean, std)
    ]
    return sorted(stats, key=lambda st: -abs(st.mean))


def report_lines(results: Iterable[CalibrationResult]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in results)

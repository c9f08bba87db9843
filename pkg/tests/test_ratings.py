import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from prefcal.dataio import ComparisonRecord
from prefcal.errors import NumericError, ParameterError
from prefcal.labels import Label
from prefcal.ratings import Rating, norm_cdf, RatingConfig, rate_all, ratings_csv, read_ratings, update_pair, write_ratings

CFG = RatingConfig()
PRIOR = CFG.prior


def reference_update(a, b, outcome, cfg=CFG):
    """Independent two-player update written against scipy's normal distribution."""
    if outcome == "right":
        nb, na = reference_update(b, a, "left", cfg)
        return na, nb
    c2 = 2 * cfg.beta**2 + a[1] ** 2 + b[1] ** 2
    c = math.sqrt(c2)
    eps = stats.norm.ppf((1 + cfg.draw_probability) / 2)
    t = (a[0] - b[0]) / c
    if outcome == "left":
        x = t - eps
        v = stats.norm.pdf(x) / stats.norm.cdf(x)
        w = v * (v + x)
    else:
        z = stats.norm.cdf(eps - t) - stats.norm.cdf(-eps - t)
        v = (stats.norm.pdf(-eps - t) - stats.norm.pdf(eps - t)) / z
        w = v**2 + ((eps - t) * stats.norm.pdf(eps - t) + (eps + t) * stats.norm.pdf(eps + t)) / z
    mu_a = a[0] + a[1] ** 2 / c * v
    mu_b = b[0] - b[1] ** 2 / c * v
    s_a = a[1] * math.sqrt(1 - a[1] ** 2 / c2 * w)
    s_b = b[1] * math.sqrt(1 - b[1] ** 2 / c2 * w)
    return (mu_a, s_a), (mu_b, s_b)


def rec(a, b, label):
    return ComparisonRecord(a, b, "safety", Label(label), 3, 1.0)


ratings_st = st.builds(Rating, st.floats(-50, 100), st.floats(0.5, 10))


class TestUpdatePair:
    def test_symmetric_draw(self):
        a, b = update_pair(PRIOR, PRIOR, "equal", CFG)
        assert a.mu == 25.0 and b.mu == 25.0
        assert a.sigma == b.sigma < 8.33

    def test_antisymmetric_win(self):
        a, b = update_pair(PRIOR, PRIOR, "left", CFG)
        assert a.mu > 25 > b.mu
        assert a.mu - 25 == 25 - b.mu

    def test_win_then_loss_matches_reference(self):
        a, b = update_pair(PRIOR, PRIOR, "left", CFG)
        a, b = update_pair(a, b, "right", CFG)
        ra, rb = reference_update((25, 8.33), (25, 8.33), "left")
        ra, rb = reference_update(ra, rb, "right")
        assert a.mu == pytest.approx(ra[0], abs=1e-9)
        assert b.mu == pytest.approx(rb[0], abs=1e-9)
        # The loser of the second game had the smaller sigma, so the reversal
        # does not fully cancel; the gap is well above 0.5.
        assert abs(a.mu - b.mu) == pytest.approx(abs(ra[0] - rb[0]), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(ratings_st, ratings_st, st.sampled_from(["left", "right", "equal"]))
    def test_matches_reference(self, a, b, outcome):
        # Keep away from the far tails where the naive reference formula underflows.
        assume(abs(a.mu - b.mu) < 25)
        na, nb = update_pair(a, b, outcome, CFG)
        ra, rb = reference_update((a.mu, a.sigma), (b.mu, b.sigma), outcome)
        for got, want in ((na, ra), (nb, rb)):
            assert got.mu == pytest.approx(want[0], rel=1e-7, abs=1e-7)
            assert got.sigma == pytest.approx(want[1], rel=1e-7, abs=1e-7)

    @settings(max_examples=200, deadline=None)
    @given(ratings_st, ratings_st, st.sampled_from(["left", "right", "equal"]))
    def test_label_antisymmetry(self, a, b, outcome):
        na, nb = update_pair(a, b, outcome, CFG)
        sb, sa = update_pair(b, a, Label(outcome).flip(), CFG)
        assert (na, nb) == (sa, sb)

    @settings(max_examples=200, deadline=None)
    @given(ratings_st, ratings_st, st.sampled_from(["left", "right"]))
    def test_winner_never_loses_mu(self, a, b, outcome):
        na, nb = update_pair(a, b, outcome, CFG)
        winner, loser = ((a, na), (b, nb)) if outcome == "left" else ((b, nb), (a, na))
        assert winner[1].mu >= winner[0].mu
        assert loser[1].mu <= loser[0].mu
        assert na.sigma <= a.sigma and nb.sigma <= b.sigma

    def test_non_finite(self):
        bad = object.__new__(Rating)
        object.__setattr__(bad, "mu", float("nan"))
        object.__setattr__(bad, "sigma", 1.0)
        with pytest.raises(NumericError):
            update_pair(bad, PRIOR, "left", CFG)
        with pytest.raises(NumericError):
            Rating(float("inf"), 1.0)

    def test_draw_margin_monte_carlo(self):
        rng = np.random.default_rng(0)
        c = math.sqrt(2 * CFG.beta**2 + 2 * 8.33**2)
        eps = CFG.draw_margin_units * c
        perf = rng.normal(25, 8.33, (2, 200_000)) + rng.normal(0, CFG.beta, (2, 200_000))
        rate = float(np.mean(np.abs(perf[0] - perf[1]) < eps))
        assert abs(rate - CFG.draw_probability) <= 0.02


class TestConfig:
    def test_defaults(self):
        assert (CFG.mu0, CFG.sigma0, CFG.beta, CFG.draw_probability, CFG.passes) == (25.0, 8.33, 4.17, 0.10, 3)

    @pytest.mark.parametrize("kwargs", [{"draw_probability": 0.0}, {"draw_probability": 1.0}, {"beta": 0.0},
                                        {"passes": 0}, {"sigma0": -1.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            RatingConfig(**kwargs)


class TestRateAll:
    def test_single_comparison(self):
        out = rate_all([rec("x", "y", "left")])
        assert set(out) == {"x", "y"} and out["x"].mu > out["y"].mu

    def test_empty(self):
        with pytest.raises(ParameterError):
            rate_all([])

    def test_unseen_images_absent(self):
        out = rate_all([rec("x", "y", "left")])
        assert "z" not in out

    def test_order_independent_input(self):
        comps = [rec("a", "b", "left"), rec("b", "c", "right"), rec("a", "c", "equal"), rec("c", "d", "left")]
        assert rate_all(comps) == rate_all(list(reversed(comps)))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("abcdef"), st.sampled_from("abcdef"),
                              st.sampled_from(["left", "right", "equal"])), min_size=1, max_size=40))
    def test_sigma_bounded_by_prior(self, games):
        comps = [rec(a, b, w) for a, b, w in games if a != b]
        if not comps:
            return
        for r in rate_all(comps).values():
            assert 0 < r.sigma < CFG.sigma0

    def test_csv_round_trip(self, tmp_path):
        out = rate_all([rec("x", "y", "left"), rec("y", "z", "equal")])
        write_ratings(tmp_path / "r.csv", out)
        assert read_ratings(tmp_path / "r.csv") == out
        assert ratings_csv(out).splitlines()[0] == "image_id,mu,sigma"


@given(st.floats(-30, 30))
def test_norm_cdf_accuracy(x):
    want = stats.norm.cdf(x)
    assert abs(norm_cdf(x) - want) <= 1e-7 * want + 1e-300

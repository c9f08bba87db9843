import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefcal.errors import EvaluationError
from prefcal.evaluation import (
    EvalReport,
    accuracy,
    cohens_kappa,
    dimension_power,
    evaluate,
    format_power,
    format_table,
    macro_f1,
)

L, R, E = "left", "right", "equal"
labels_st = st.lists(st.sampled_from([L, R, E]), min_size=1, max_size=40)


class TestAccuracy:
    def test_perfect(self):
        assert accuracy([L, R, E], [L, R, E]) == 1.0

    def test_excl_equal(self):
        assert accuracy([L, L, E], [L, R, E], exclude_equal=True) == 0.5

    def test_incl_equal(self):
        assert accuracy([L, L, E], [L, R, E]) == pytest.approx(2 / 3, abs=1e-15)

    def test_model_equal_is_error(self):
        assert accuracy([E, E], [L, R], exclude_equal=True) == 0.0

    def test_empty_after_exclusion(self):
        with pytest.raises(EvaluationError):
            accuracy([L], [E], exclude_equal=True)

    def test_misaligned(self):
        with pytest.raises(EvaluationError):
            accuracy([L], [L, R])


class TestKappa:
    def test_perfect(self):
        assert cohens_kappa([L, R, E, L], [L, R, E, L]) == 1.0

    def test_inverse(self):
        assert cohens_kappa([R, R, L, L], [L, L, R, R]) == -1.0

    def test_single_class_undefined(self):
        assert cohens_kappa([L, L], [L, L]) is None

    def test_random_is_near_zero(self):
        rng = random.Random(0)
        labels = [L] * 5000 + [R] * 5000
        preds = [rng.choice([L, R]) for _ in labels]
        assert abs(cohens_kappa(preds, labels)) <= 0.03

    def test_hand_value(self):
        # Confusion (rows human, cols model) over L,R: [[3,1],[2,4]].
        labels = [L] * 4 + [R] * 6
        preds = [L, L, L, R] + [L, L, R, R, R, R]
        p_o, p_e = 0.7, 0.4 * 0.5 + 0.6 * 0.5
        assert cohens_kappa(preds, labels) == pytest.approx((p_o - p_e) / (1 - p_e), abs=1e-12)

    @given(labels_st)
    def test_self_agreement(self, ys):
        k = cohens_kappa(ys, ys)
        assert k is None if len(set(ys)) < 2 else k == pytest.approx(1.0, abs=1e-12)


class TestMacroF1:
    def test_perfect(self):
        assert macro_f1([L, R, E], [L, R, E]) == 1.0

    def test_half(self):
        assert macro_f1([L, R, L, R], [L, L, R, R]) == pytest.approx(0.5, abs=1e-15)

    def test_never_predicted_class(self):
        # left F1 = 2*2/(4+1) = 0.8, right F1 = 0 (never predicted).
        assert macro_f1([L, L, L], [L, L, R]) == pytest.approx(0.4, abs=1e-15)

    def test_absent_class_excluded(self):
        assert macro_f1([L, R, E], [L, R, R]) == pytest.approx((1.0 + 2 / 3) / 2, abs=1e-15)


class TestDimensionPower:
    def test_always_agreeing(self):
        a, b = [[5, 5], [1, 5]], [[3, 5], [4, 5]]
        assert dimension_power(a, b, [L, R], ["x", "y"]) == {"x": 1.0, "y": 0.0}

    def test_planted_seventy_percent(self):
        labels = [L] * 10 + [R] * 10
        a = [[6] if i < 7 else [4] for i in range(10)] + [[4] if i < 7 else [6] for i in range(10)]
        b = [[5]] * 20
        assert dimension_power(a, b, labels, ["d"]) == {"d": 0.7}

    def test_equal_pairs_dropped(self):
        assert dimension_power([[6], [1]], [[5], [9]], [L, E], ["d"]) == {"d": 1.0}

    def test_no_non_equal(self):
        with pytest.raises(EvaluationError):
            dimension_power([[1]], [[2]], [E], ["d"])


class TestReport:
    def test_counts_and_json(self):
        rep = evaluate([L, L, E, R], [L, R, E, R], {"d": 0.5}, "safety", "calibrated")
        assert (rep.n_total, rep.n_excl_equal) == (4, 3)
        assert rep.acc_excl == pytest.approx(2 / 3)
        back = json.loads(rep.to_json())
        assert back["per_dimension_power"] == {"d": 0.5} and back["method"] == "calibrated"

    def test_all_equal_labels(self):
        rep = evaluate([E, L], [E, E])
        assert rep.acc_excl is None and rep.kappa_excl is None

    def test_table_and_power(self):
        rep = evaluate([L, R], [L, R], category="lively", method="raw")
        table = format_table([rep])
        assert "lively" in table and "100.0" in table
        assert format_power({"b": 0.5, "a": 0.75}).splitlines()[0].startswith("a")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from([L, R, E]), st.sampled_from([L, R, E])), min_size=1, max_size=30),
           st.randoms())
    def test_permutation_invariance(self, rows, rnd):
        shuffled = list(rows)
        rnd.shuffle(shuffled)
        a = evaluate([p for p, _ in rows], [y for _, y in rows])
        b = evaluate([p for p, _ in shuffled], [y for _, y in shuffled])
        for field in ("acc_incl", "acc_excl", "kappa_incl", "kappa_excl", "macro_f1"):
            x, y = getattr(a, field), getattr(b, field)
            assert (x is None and y is None) or x == pytest.approx(y, abs=1e-12)
        assert a.n_excl_equal == b.n_excl_equal
        if a.acc_excl is not None:
            assert 0 <= a.acc_excl <= 1

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefcal.errors import (
    CardinalityError,
    CompositionError,
    ConsensusSamplingError,
    DimensionParseError,
    DuplicateNameError,
    MalformedDimensionError,
    MissingFieldError,
    NoJsonFoundError,
    ParameterError,
)
from prefcal.mining import (
    PCA,
    ConsensusConfig,
    ConsensusSet,
    Dimension,
    DimensionSet,
    build_extraction_prompt,
    build_mutation_prompt,
    extract_json_object,
    parse_dimension_response,
    pca_fit_transform,
    sample_consensus,
)
from prefcal.prompts import render
from prefcal.ratings import Rating

GOLDEN = Path(__file__).parent / "golden"
WEALTHY = ["Façade Quality", "Vegetation Maintenance", "Pavement Integrity", "Vehicle Quality",
           "Building Modernity", "Infrastructure Condition", "Street Cleanliness", "Lighting Quality"]


def dims_json(names):
    return json.dumps({"dimensions": [
        {"name": n, "description": f"{n} level", "high_indicator": "more", "low_indicator": "less"}
        for n in names]})


def banded_ratings(n=100, seed=0):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0, 50, n)
    sigma = np.where(np.arange(n) % 2 == 0, 1.0, 3.0) + rng.uniform(0, 0.1, n)
    return {f"img{i:03d}": Rating(float(m), float(s)) for i, (m, s) in enumerate(zip(mu, sigma))}


class TestConsensus:
    def test_identical_sigma_excludes_all(self):
        ratings = {f"i{k}": Rating(float(k), 2.0) for k in range(40)}
        with pytest.raises(ConsensusSamplingError) as info:
            sample_consensus(ratings, "safety")
        assert info.value.n_high == info.value.n_low == 0

    def test_banded_against_brute_force(self):
        ratings = banded_ratings()
        cs = sample_consensus(ratings, "safety")
        mus = sorted(r.mu for r in ratings.values())
        sigmas = sorted(r.sigma for r in ratings.values())
        q3 = float(np.quantile(mus, 0.75))
        q1 = float(np.quantile(mus, 0.25))
        med = (sigmas[49] + sigmas[50]) / 2
        high = sorted((i for i, r in ratings.items() if r.mu > q3 and r.sigma < med),
                      key=lambda i: -ratings[i].mu)[:5]
        low = sorted((i for i, r in ratings.items() if r.mu < q1 and r.sigma < med),
                     key=lambda i: ratings[i].mu)[:5]
        assert cs.high == high and cs.low == low
        assert len(cs.high) == len(cs.low) == 5
        assert all(ratings[i].sigma < 1.2 for i in cs.image_ids)

    def test_insufficient_reports_counts(self):
        ratings = banded_ratings(20)
        with pytest.raises(ConsensusSamplingError, match="qualified"):
            sample_consensus(ratings, "safety", ConsensusConfig(n_per_group=5))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(0.5, 5)), min_size=12, max_size=60),
           st.integers(1, 3))
    def test_strict_inequalities(self, rows, n_per_group):
        ratings = {f"i{k:02d}": Rating(m, s) for k, (m, s) in enumerate(rows)}
        try:
            cs = sample_consensus(ratings, "lively", ConsensusConfig(n_per_group=n_per_group))
        except ConsensusSamplingError:
            return
        for i in cs.high:
            assert ratings[i].mu > cs.tau_high and ratings[i].sigma < cs.sigma_med
        for i in cs.low:
            assert ratings[i].mu < cs.tau_low and ratings[i].sigma < cs.sigma_med
        assert not set(cs.high) & set(cs.low)


class TestPCA:
    def test_exact_subspace_reconstruction(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 768))
        p = PCA(8).fit(X)
        rec = p.inverse_transform(p.transform(X))
        assert np.linalg.norm(rec - X) / np.linalg.norm(X) < 1e-8

    def test_full_rank_preserves_variance(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 6))
        Z = pca_fit_transform(X, k=6)
        assert Z.var(axis=0, ddof=1).sum() == pytest.approx(X.var(axis=0, ddof=1).sum(), rel=1e-12)

    def test_explained_variance_matches_eigh(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(50, 768))
        p = PCA(8).fit(X)
        # Gram-matrix route: the nonzero eigenvalues of Xc Xc^T equal those of Xc^T Xc.
        Xc = X - X.mean(axis=0)
        eig = np.sort(np.linalg.eigvalsh(Xc @ Xc.T))[::-1][:8] / 49
        np.testing.assert_allclose(p.explained_variance, eig, rtol=1e-6)

    def test_reconstruction_error_non_increasing(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(40, 20))
        errs = []
        for k in range(1, 21):
            p = PCA(k).fit(X)
            errs.append(np.linalg.norm(p.inverse_transform(p.transform(X)) - X))
        assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))

    def test_too_few_samples(self):
        with pytest.raises(ParameterError):
            pca_fit_transform(np.zeros((5, 768)), k=8)


def fixed_consensus():
    ids = [f"h{i}" for i in range(5)] + [f"l{i}" for i in range(5)]
    ratings = {i: Rating(40.0 - k * 1.5, 2.0) for k, i in enumerate(ids)}
    pca = {i: np.linspace(-1, 1, 8) * (k + 1) / 7 for k, i in enumerate(ids)}
    cs = ConsensusSet("wealthy", ids[:5], ids[5:], 35.0, 30.0, 2.5)
    return cs, ratings, pca


class TestPrompts:
    def test_golden_extraction_prompt(self):
        cs, ratings, pca = fixed_consensus()
        text = build_extraction_prompt(cs, ratings, pca, "wealthy")
        assert text == (GOLDEN / "extraction_wealthy.txt").read_text(encoding="utf-8")

    def test_category_appears_twice(self):
        cs, ratings, pca = fixed_consensus()
        text = build_extraction_prompt(cs, ratings, pca, "wealthy")
        assert text.count('"wealthy"') == 2

    def test_empty_high_list(self):
        cs, ratings, pca = fixed_consensus()
        empty = ConsensusSet("wealthy", [], cs.low, 0, 0, 0)
        with pytest.raises(CompositionError):
            build_extraction_prompt(empty, ratings, pca, "wealthy")

    def test_missing_pca_names_image(self):
        cs, ratings, pca = fixed_consensus()
        del pca["l3"]
        with pytest.raises(CompositionError, match="l3"):
            build_extraction_prompt(cs, ratings, pca, "wealthy")

    def test_elite_block_and_mutation(self):
        cs, ratings, pca = fixed_consensus()
        elite = parse_dimension_response(dims_json(WEALTHY), "wealthy")
        text = build_extraction_prompt(cs, ratings, pca, "wealthy", elite=elite)
        assert "Lighting Quality" in text
        mut = build_mutation_prompt(elite, ["Vehicle Quality"])
        assert "- Vehicle Quality" in mut and "Façade Quality" in mut

    def test_render_single_pass(self):
        assert render("{a} {b}", {"a": "{b}", "b": "x"}) == "{b} x"
        assert render("{keep}", {}) == "{keep}"


class TestParse:
    def test_wealthy_eight(self):
        ds = parse_dimension_response(dims_json(WEALTHY), "wealthy")
        assert len(ds) == 8 and ds.names == WEALTHY

    def test_four_is_cardinality_error(self):
        with pytest.raises(CardinalityError):
            parse_dimension_response(dims_json(WEALTHY[:4]), "wealthy")

    def test_eleven_is_cardinality_error(self):
        with pytest.raises(CardinalityError):
            parse_dimension_response(dims_json([f"D{i}" for i in range(11)]), "wealthy")

    def test_fenced_equals_bare(self):
        bare = parse_dimension_response(dims_json(WEALTHY), "wealthy")
        fenced = parse_dimension_response("Here you go:\n```json\n" + dims_json(WEALTHY) + "\n```\nDone.",
                                          "wealthy")
        assert fenced == bare

    def test_prose_around_json(self):
        ds = parse_dimension_response("Sure! " + dims_json(WEALTHY[:5]) + " Hope this helps {", "wealthy")
        assert len(ds) == 5

    def test_error_variants(self):
        with pytest.raises(NoJsonFoundError):
            parse_dimension_response("no json here", "wealthy")
        with pytest.raises(DuplicateNameError):
            parse_dimension_response(dims_json(WEALTHY[:5] + [" vehicle QUALITY "]), "wealthy")
        doc = json.loads(dims_json(WEALTHY[:5]))
        del doc["dimensions"][2]["low_indicator"]
        with pytest.raises(MissingFieldError):
            parse_dimension_response(json.dumps(doc), "wealthy")
        with pytest.raises(MalformedDimensionError):
            parse_dimension_response('{"dimensions": "many"}', "wealthy")

    def test_names_trimmed_case_preserved(self):
        names = ["  Tree Canopy ", "Litter", "Graffiti", "Sidewalks", "Lights"]
        ds = parse_dimension_response(dims_json(names), "safety")
        assert ds.names[0] == "Tree Canopy"

    @settings(max_examples=300, deadline=None)
    @given(st.text())
    def test_total(self, text):
        try:
            ds = parse_dimension_response(text, "safety")
        except DimensionParseError:
            return
        assert 5 <= len(ds) <= 10

    def test_json_round_trip_and_digest(self):
        ds = parse_dimension_response(dims_json(WEALTHY), "wealthy", provenance="trial 3")
        back = DimensionSet.from_dict(json.loads(ds.to_json()))
        assert back == ds
        assert back.with_provenance("manual").digest() == ds.digest()

    def test_extract_prefers_required_key(self):
        text = '{"note": 1} then {"dimensions": []}'
        assert extract_json_object(text, "dimensions") == {"dimensions": []}

    def test_empty_dimension_name(self):
        with pytest.raises(MissingFieldError):
            Dimension(" ", "d", "h", "l")

import io
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefcal.dataio import (
    CLIP_DIM,
    ComparisonRecord,
    DatasetSplit,
    ImageRecord,
    Schema,
    consensus_filter,
    load_embeddings,
    parse_comparisons,
    sample_and_split,
    write_embeddings,
)
from prefcal.errors import IngestionError, ParameterError
from prefcal.labels import Label

HEADER = "left_id,right_id,category,winner\n"


def rec(a, b, label="left", votes=3, agreement=1.0, category="safety"):
    return ComparisonRecord(a, b, category, Label(label), votes, agreement)


def many_records(n, category="safety"):
    return [rec(f"a{i:04d}", f"b{i:04d}", category=category) for i in range(n)]


class TestParse:
    def test_empty_stream(self):
        result = parse_comparisons(b"")
        assert result.records == [] and result.rejects == []

    def test_majority_aggregation(self):
        text = HEADER + "x,y,safety,left\nx,y,safety,left\nx,y,safety,right\n"
        (r,) = parse_comparisons(text.encode()).records
        assert (r.left_id, r.right_id, r.vote_count, r.label) == ("x", "y", 3, Label.LEFT)
        assert r.agreement == pytest.approx(2 / 3, abs=1e-15)

    def test_schema_maps_tie_to_equal(self):
        schema = Schema(outcome="choice", outcome_map={"left": "left", "right": "right", "tie": "equal"})
        text = "left_id,right_id,category,choice\nx,y,safety,tie\n"
        (r,) = parse_comparisons(text, schema).records
        assert r.label is Label.EQUAL

    def test_custom_columns_and_category_tokens(self):
        schema = Schema(left="img_a", right="img_b", category="study", outcome="vote",
                        category_map={"safer": "safety"})
        text = "img_a,img_b,study,vote\np,q,SAFER,right\n"
        (r,) = parse_comparisons(text, schema).records
        assert (r.category, r.label) == ("safety", Label.RIGHT)

    def test_rejects_reported_with_line_numbers(self):
        text = HEADER + "x,y,safety,left\nx,y,greenness,left\nx,x,safety,left\nx,y,safety,draw\nx,y\n"
        result = parse_comparisons(text)
        assert [r.vote_count for r in result.records] == [1]
        assert [line for line, _ in result.rejects] == [3, 4, 5, 6]
        report = result.rejects_report()
        assert report.startswith("3: unknown category 'greenness'\n")
        assert len(report.splitlines()) == 4

    def test_reversed_pairs_not_merged(self):
        text = HEADER + "x,y,safety,left\ny,x,safety,left\n"
        assert len(parse_comparisons(text).records) == 2

    def test_missing_header_column(self):
        with pytest.raises(IngestionError, match="winner"):
            parse_comparisons("left_id,right_id,category\nx,y,safety\n")

    def test_non_utf8(self):
        with pytest.raises(IngestionError):
            parse_comparisons(HEADER.encode() + b"\xff\xfe,y,safety,left\n")

    def test_reads_binary_stream(self):
        stream = io.BytesIO((HEADER + "x,y,safety,equal\n").encode())
        assert parse_comparisons(stream).records[0].label is Label.EQUAL

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd"),
                              st.sampled_from(["left", "right", "equal"])), min_size=1, max_size=30),
           st.randoms())
    def test_order_invariance(self, votes, rnd):
        rows = [f"{a},{b},safety,{w}\n" for a, b, w in votes]
        shuffled = list(rows)
        rnd.shuffle(shuffled)
        first = parse_comparisons(HEADER + "".join(rows))
        second = parse_comparisons(HEADER + "".join(shuffled))
        assert set(first.records) == set(second.records)


class TestRecords:
    def test_invariants(self):
        with pytest.raises(ParameterError):
            rec("x", "x")
        with pytest.raises(ParameterError):
            rec("x", "y", agreement=0.0)
        with pytest.raises(ParameterError):
            rec("x", "y", votes=0)

    def test_pair_identity_ignores_orientation(self):
        assert rec("x", "y").pair_identity == rec("y", "x", "right").pair_identity

    def test_round_trip(self):
        r = rec("x", "y", "equal", 4, 0.75)
        assert ComparisonRecord.from_dict(r.to_dict()) == r
        split = DatasetSplit([r], [rec("p", "q")], 42, 0.5)
        assert DatasetSplit.from_dict(split.to_dict()) == split

    def test_image_record_lengths(self):
        ImageRecord("a", np.zeros(CLIP_DIM), np.zeros(8))
        with pytest.raises(ParameterError):
            ImageRecord("a", np.zeros(512))
        with pytest.raises(ParameterError):
            ImageRecord("a", np.zeros(CLIP_DIM), np.zeros(7))


class TestConsensusFilter:
    def test_too_few_votes_excluded(self):
        assert consensus_filter([rec("x", "y", votes=2)], min_votes=3) == []

    def test_two_to_one_majority_kept(self):
        r = rec("x", "y", votes=3, agreement=2 / 3)
        assert consensus_filter([r], 3, 0.5) == [r]

    def test_exact_split_dropped(self):
        assert consensus_filter([rec("x", "y", votes=4, agreement=0.5)], 3, 0.5) == []

    def test_unanimous_single_votes_identity(self):
        records = [rec(f"a{i}", f"b{i}", votes=1) for i in range(5)]
        assert consensus_filter(records, 1, 0.5) == records

    def test_bad_parameters(self):
        with pytest.raises(ParameterError):
            consensus_filter([], 0, 0.5)
        with pytest.raises(ParameterError):
            consensus_filter([], 3, 0.4)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 6), st.sampled_from([0.4, 0.5, 0.6, 2 / 3, 1.0])), max_size=20),
           st.integers(1, 5), st.sampled_from([0.5, 0.6, 0.75]))
    def test_idempotent_and_order_preserving(self, specs, min_votes, min_agreement):
        records = [rec(f"a{i}", f"b{i}", votes=v, agreement=a) for i, (v, a) in enumerate(specs)]
        once = consensus_filter(records, min_votes, min_agreement)
        assert consensus_filter(once, min_votes, min_agreement) == once
        positions = [records.index(r) for r in once]
        assert positions == sorted(positions)


class TestSplit:
    def test_default_sizes(self):
        split = sample_and_split(many_records(300), 288, 0.7, 42)
        assert len(split.reference) in (201, 202)
        assert len(split.reference) + len(split.pool) == 288

    def test_deterministic(self):
        records = many_records(50)
        a = sample_and_split(records, 40, 0.7, 42)
        b = sample_and_split(list(reversed(records)), 40, 0.7, 42)
        assert a.to_dict() == b.to_dict()

    def test_half_split_disjoint(self):
        split = sample_and_split(many_records(10), 10, 0.5, 7)
        assert len(split.reference) == len(split.pool) == 5
        assert not {r.pair_identity for r in split.reference} & {r.pair_identity for r in split.pool}

    def test_oversized_sample(self):
        with pytest.raises(ParameterError, match="11.*10"):
            sample_and_split(many_records(10), 11, 0.5, 0)

    def test_bad_ratio(self):
        with pytest.raises(ParameterError):
            sample_and_split(many_records(10), 5, 1.0, 0)

    def test_reversed_duplicates_share_a_side(self):
        records = []
        for i in range(20):
            records.append(rec(f"a{i}", f"b{i}"))
            records.append(rec(f"b{i}", f"a{i}", "right"))
        split = sample_and_split(records, 40, 0.5, 3)
        assert not {r.pair_identity for r in split.reference} & {r.pair_identity for r in split.pool}

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.floats(0.05, 0.95))
    def test_disjoint_for_any_seed(self, seed, n, ratio):
        records = many_records(60)
        rnd = random.Random(seed)
        for _ in range(10):
            i = rnd.randrange(60)
            records.append(rec(records[i].right_id, records[i].left_id, "right"))
        split = sample_and_split(records, n, ratio, seed)
        assert len(split.reference) + len(split.pool) == n
        assert not {r.pair_identity for r in split.reference} & {r.pair_identity for r in split.pool}


class TestEmbeddings:
    def _emb(self, n=3):
        rng = np.random.default_rng(0)
        return {f"img{i}": rng.normal(size=CLIP_DIM) for i in range(n)}

    def test_text_round_trip(self, tmp_path):
        emb = self._emb()
        write_embeddings(tmp_path / "e.txt", emb)
        back = load_embeddings(tmp_path / "e.txt")
        assert sorted(back) == sorted(emb)
        for k in emb:
            np.testing.assert_array_equal(back[k], emb[k])

    def test_npz_round_trip(self, tmp_path):
        emb = self._emb()
        write_embeddings(tmp_path / "e.npz", emb, fmt="npz")
        back = load_embeddings(tmp_path / "e.npz", fmt="npz")
        for k in emb:
            np.testing.assert_array_equal(back[k], emb[k])

    def test_comma_separated(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("img0," + ",".join(["0.5"] * CLIP_DIM) + "\n")
        assert load_embeddings(p)["img0"].shape == (CLIP_DIM,)

    def test_wrong_length(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("img0 " + " ".join(["1"] * 10) + "\n")
        with pytest.raises(IngestionError, match="768"):
            load_embeddings(p)

    def test_duplicate_id(self, tmp_path):
        p = tmp_path / "e.txt"
        line = "img0 " + " ".join(["1"] * CLIP_DIM) + "\n"
        p.write_text(line + line)
        with pytest.raises(IngestionError, match="duplicate"):
            load_embeddings(p)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ParameterError):
            load_embeddings(tmp_path / "x", fmt="parquet")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            load_embeddings(tmp_path / "absent.txt")

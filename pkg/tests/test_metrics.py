import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radpipe.errors import UnknownStrataError
from radpipe.metrics import (
    EvalRecord,
    bleu4,
    bleu4_sentence_smoothed,
    bootstrap_ci,
    evaluate_records,
    exact_match,
    meteor,
    question_len_bucket,
    rouge_l,
    stratified_report,
    token_f1,
    vqa_accuracy,
)

import oracles

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden_metrics.json").read_text())

word = st.sampled_from("the a lung mass clear effusion heart normal left right no".split())
sentence = st.lists(word, min_size=0, max_size=8).map(" ".join)


class TestGoldenVectors:
    @pytest.mark.parametrize("row", GOLDEN["rows"], ids=lambda r: r["prediction"][:24])
    def test_per_record_metrics_match_oracles(self, row):
        pred, refs = row["prediction"], row["references"]
        assert rouge_l(pred, refs) == pytest.approx(row["rougel"], abs=1e-9)
        assert meteor(pred, refs) == pytest.approx(row["meteor"], abs=1e-9)
        best_f1 = max(token_f1(pred, r) for r in refs)
        assert best_f1 == pytest.approx(row["token_f1"], abs=1e-9)
        assert exact_match(pred, refs) == pytest.approx(row["accuracy"], abs=1e-9)

    def test_corpus_bleu_matches_oracle(self):
        corpus = [(r["prediction"], r["references"]) for r in GOLDEN["rows"]]
        assert bleu4(corpus) == pytest.approx(GOLDEN["corpus_bleu4"], abs=1e-9)

    def test_hand_derived_anchors(self):
        assert rouge_l("the cat", ["the cat sat"]) == pytest.approx(0.8, abs=1e-12)
        assert meteor("b a", "a b") == pytest.approx(0.5, abs=1e-12)


class TestAccuracy:
    def test_normalization(self):
        assert exact_match("Yes.", ["yes"]) == 1.0
        assert exact_match("The left lung", ["left lung"]) == 1.0
        assert exact_match("left lung", ["right lung"]) == 0.0

    def test_fraction(self):
        records = [
            EvalRecord(str(i), p, (r,))
            for i, (p, r) in enumerate([("a", "a"), ("b", "b"), ("c", "c"), ("x", "y")])
        ]
        assert vqa_accuracy(records) == 0.75


class TestTokenF1:
    def test_hand_case(self):
        assert token_f1("left lung", "left lower lung") == pytest.approx(0.8)

    def test_identical(self):
        assert token_f1("a b c", "a b c") == 1.0

    def test_empty_conventions(self):
        assert token_f1("", "") == 1.0
        assert token_f1("", "x") == 0.0
        assert token_f1("x", "") == 0.0


class TestBleu:
    def test_perfect(self):
        corpus = [("the lungs are clear today", ["the lungs are clear today"])] * 3
        assert bleu4(corpus) == 1.0

    def test_disjoint_zero(self):
        assert bleu4([("a b c", ["x y z"])]) == 0.0

    def test_permutation_invariance(self):
        rows = [(r["prediction"], r["references"]) for r in GOLDEN["rows"]]
        assert bleu4(rows) == bleu4(list(reversed(rows)))

    def test_smoothed_sentence_variant_in_range(self):
        assert 0.0 <= bleu4_sentence_smoothed("a b c", ["a b d"]) <= 1.0


class TestRouge:
    def test_identical(self):
        assert rouge_l("a b c", ["a b c"]) == 1.0

    def test_disjoint(self):
        assert rouge_l("a b", ["x y"]) == 0.0

    def test_reversal_symmetry(self):
        a = "the small mass is visible here"
        b = "a mass visible in the image"
        ra = " ".join(reversed(a.split()))
        rb = " ".join(reversed(b.split()))
        assert rouge_l(a, [b]) == pytest.approx(rouge_l(ra, [rb]), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(pred=sentence, ref=sentence)
    def test_matches_dp_oracle(self, pred, ref):
        assert rouge_l(pred, [ref]) == pytest.approx(oracles.rouge_l_oracle(pred, ref), abs=1e-12)


class TestMeteor:
    def test_identical_six_tokens(self):
        score = meteor("a b c d e f", "a b c d e f")
        assert score == pytest.approx(1.0 - 0.5 / 216, abs=1e-9)

    def test_disjoint(self):
        assert meteor("a b", "x y") == 0.0

    @settings(max_examples=60, deadline=None)
    @given(pred=sentence, ref=sentence)
    def test_matches_alignment_oracle(self, pred, ref):
        assert meteor(pred, ref) == pytest.approx(oracles.meteor_oracle(pred, ref), abs=1e-12)


class TestBootstrap:
    def test_constant_data_zero_width(self):
        lo, hi = bootstrap_ci([0.5] * 20, 1000, seed=1)
        assert lo == hi == 0.5

    def test_seed_deterministic(self):
        values = [0.0, 1.0, 1.0, 0.0, 1.0]
        assert bootstrap_ci(values, 1000, 7) == bootstrap_ci(values, 1000, 7)

    def test_width_shrinks_with_n(self):
        rng = np.random.default_rng(0)
        widths_small, widths_big = [], []
        for seed in range(20):
            base = rng.normal(0.5, 0.2, size=30)
            big = np.tile(base, 10)
            lo, hi = bootstrap_ci(base, 500, seed)
            widths_small.append(hi - lo)
            lo, hi = bootstrap_ci(big, 500, seed)
            widths_big.append(hi - lo)
        assert np.median(widths_big) < np.median(widths_small)


class TestStratified:
    def records(self):
        return [
            EvalRecord("1", "yes", ("yes",), {"image_count": 1, "question_len": 4, "organ": "chest"}),
            EvalRecord("2", "no", ("yes",), {"image_count": 1, "question_len": 7, "organ": "chest"}),
            EvalRecord("3", "yes", ("yes",), {"image_count": 2, "question_len": 12, "organ": "breast"}),
        ]

    def test_bucket_counts(self):
        report = stratified_report(self.records(), ("accuracy",), "image_count",
                                   n_resamples=50, seed=0)
        assert report.strata["1"]["n"] == 2
        assert report.strata["2"]["n"] == 1

    def test_question_length_buckets(self):
        assert question_len_bucket(4) == "1-5"
        assert question_len_bucket(10) == "6-10"
        assert question_len_bucket(15) == "11-15"
        assert question_len_bucket(30) == "16+"

    def test_overall_is_weighted_mean_of_buckets(self):
        records = self.records()
        report = stratified_report(records, ("accuracy",), "image_count",
                                   n_resamples=50, seed=0)
        total = sum(
            info["metrics"]["accuracy"]["point"] * info["n"]
            for info in report.strata.values()
        )
        assert report.metrics["accuracy"]["point"] == pytest.approx(total / len(records))

    def test_unknown_strata(self):
        with pytest.raises(UnknownStrataError):
            stratified_report(self.records(), ("accuracy",), "hospital")

    def test_empty_bucket_omitted(self):
        report = stratified_report(self.records(), ("accuracy",), "modality",
                                   n_resamples=50, seed=0)
        assert report.strata == {}


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(pred=sentence, ref=sentence)
    def test_metrics_in_unit_interval(self, pred, ref):
        for value in (rouge_l(pred, [ref]), meteor(pred, ref), token_f1(pred, ref)):
            assert 0.0 <= value <= 1.0

    def test_identical_corpus_scores_one(self):
        texts = ["lungs are clear with no mass", "there is a pleural effusion today"]
        records = [EvalRecord(str(i), t, (t,)) for i, t in enumerate(texts)]
        report = evaluate_records(records, ("accuracy", "token_f1", "bleu4", "rougel"),
                                  n_resamples=50, seed=0)
        for name in ("accuracy", "token_f1", "bleu4", "rougel"):
            assert report.metrics[name]["point"] == 1.0

    def test_ci_brackets_are_ordered(self):
        records = [EvalRecord(str(i), "a", ("a" if i % 2 else "b",)) for i in range(10)]
        report = evaluate_records(records, ("accuracy",), n_resamples=200, seed=3)
        m = report.metrics["accuracy"]
        assert m["ci_low"] <= m["ci_high"]

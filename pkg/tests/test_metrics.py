"""Set-overlap metrics, dosage error, and the mean-dosage baseline."""

import numpy as np
import pytest

import helpers_ref as ref
from herbrx.corpus import Corpus, EmptyCorpus, generate_synthetic, SynthSpec
from herbrx.metrics import (
    DosageBaseline,
    EvalReport,
    PairCountMismatch,
    build_baseline,
    evaluate_pairs,
    format_report_table,
    herb_set_scores,
    score_pair,
)
from herbrx.prescription import Prescription
from conftest import make_record

HERB_POOL = [f"herb{i}" for i in range(12)]
FLAT_BASELINE = DosageBaseline(mean_grams={}, global_mean=6.0)


def rx(pairs):
    return Prescription.from_pairs(pairs)


def random_rx(rng, pool=HERB_POOL, low=1, high=8):
    n = int(rng.integers(low, high))
    herbs = rng.choice(pool, size=n, replace=False)
    return rx([(str(h), float(rng.integers(1, 40)) / 2.0) for h in herbs])


class TestWorkedExample:
    def test_exact_fractions(self):
        truth = rx([("a", 3.0), ("b", 6.0), ("c", 9.0), ("d", 4.5)])
        pred = rx([("a", 3.0), ("b", 6.0), ("e", 10.0)])
        report = evaluate_pairs([truth], [pred], FLAT_BASELINE)
        assert report.precision == 2 / 3
        assert report.recall == 1 / 2
        assert report.f1 == 4 / 7

    def test_herb_set_scores_formulae(self):
        assert herb_set_scores(2, 1, 2) == (2 / 3, 1 / 2, 4 / 7)
        assert herb_set_scores(0, 0, 0) == (0.0, 0.0, 0.0)
        assert herb_set_scores(0, 3, 2) == (0.0, 0.0, 0.0)
        assert herb_set_scores(5, 0, 0) == (1.0, 1.0, 1.0)


class TestScorePair:
    def test_perfect_match(self):
        truth = rx([("a", 3.0), ("b", 6.0)])
        counts = score_pair(truth, truth, FLAT_BASELINE)
        assert (counts.tp, counts.fp, counts.fn) == (2, 0, 0)
        assert counts.sq_err == 0.0

    def test_missing_prediction_counts_all_missed(self):
        truth = rx([("a", 3.0), ("b", 6.0), ("c", 9.0)])
        counts = score_pair(truth, None, FLAT_BASELINE)
        assert (counts.tp, counts.fp, counts.fn) == (0, 0, 3)
        assert counts.sq_err == counts.sq_err_baseline == 0.0

    def test_dosage_error_is_squared_relative(self):
        truth = rx([("a", 4.0)])
        pred = rx([("a", 5.0)])
        counts = score_pair(truth, pred, FLAT_BASELINE)
        assert counts.sq_err == pytest.approx((1.0 / 4.0) ** 2, abs=1e-15)
        assert counts.sq_err_baseline == pytest.approx((2.0 / 4.0) ** 2, abs=1e-15)

    def test_unmatched_herbs_contribute_no_dosage_error(self):
        truth = rx([("a", 4.0), ("b", 2.0)])
        pred = rx([("a", 4.0), ("z", 99.0)])
        counts = score_pair(truth, pred, FLAT_BASELINE)
        assert counts.sq_err == 0.0
        assert (counts.tp, counts.fp, counts.fn) == (1, 1, 1)


class TestAgainstBruteForce:
    def test_thousand_random_pairs(self, rng):
        """Pooled report equals the direct-loop reference to 1e-9."""
        truths, preds, pairs = [], [], []
        for _ in range(1000):
            truth = random_rx(rng)
            roll = rng.random()
            if roll < 0.1:
                pred = None
            elif roll < 0.3:
                pred = truth
            else:
                pred = random_rx(rng)
            truths.append(truth)
            preds.append(pred)
            pairs.append(
                (
                    [(i.herb, i.grams) for i in truth.items],
                    None if pred is None else [(i.herb, i.grams) for i in pred.items],
                )
            )
        means = {h: 5.0 + 0.5 * i for i, h in enumerate(HERB_POOL[:8])}
        baseline = DosageBaseline(mean_grams=means, global_mean=7.5)
        report = evaluate_pairs(truths, preds, baseline)
        p, r, f1, nmse, nmse_base = ref.brute_corpus_eval(pairs, means, 7.5)
        assert report.precision == pytest.approx(p, abs=1e-9)
        assert report.recall == pytest.approx(r, abs=1e-9)
        assert report.f1 == pytest.approx(f1, abs=1e-9)
        assert report.nmse == pytest.approx(nmse, abs=1e-9)
        assert report.nmse_baseline == pytest.approx(nmse_base, abs=1e-9)

    def test_tallies_match_brute_counts(self, rng):
        truth = random_rx(rng)
        pred = random_rx(rng)
        counts = score_pair(truth, pred, FLAT_BASELINE)
        fn, fp, errors = ref.brute_pair_scores(
            [(i.herb, i.grams) for i in truth.items],
            [(i.herb, i.grams) for i in pred.items],
        )
        assert (counts.fn, counts.fp, counts.tp) == (fn, fp, len(errors))
        assert counts.sq_err == pytest.approx(sum(errors), abs=1e-12)


class TestOrderInvariance:
    def test_report_bit_identical_under_item_permutation(self, rng):
        truths, preds = [], []
        for _ in range(40):
            truths.append(random_rx(rng))
            preds.append(random_rx(rng) if rng.random() > 0.1 else None)
        baseline = DosageBaseline(
            mean_grams={h: 6.0 + i for i, h in enumerate(HERB_POOL)}, global_mean=8.0
        )
        first = evaluate_pairs(truths, preds, baseline)

        def shuffled(rx_obj):
            if rx_obj is None:
                return None
            items = list(rx_obj.items)
            rng.shuffle(items)
            return rx([(i.herb, i.grams) for i in items])

        second = evaluate_pairs(
            [shuffled(t) for t in truths], [shuffled(p) for p in preds], baseline
        )
        assert first == second  # dataclass equality: every float bit-identical


class TestEdgeCases:
    def test_zero_matches_reports_absent_nmse(self):
        truth = rx([("a", 3.0)])
        pred = rx([("b", 3.0)])
        report = evaluate_pairs([truth], [pred], FLAT_BASELINE)
        assert report.nmse is None and report.nmse_baseline is None
        assert report.n_zero_match_pairs == 1
        assert report.f1 == 0.0

    def test_counts_empty_predictions(self):
        truth = rx([("a", 3.0)])
        report = evaluate_pairs([truth, truth], [None, truth], FLAT_BASELINE)
        assert report.n_empty_predictions == 1
        assert report.n_zero_match_pairs == 1

    def test_length_mismatch_rejected(self):
        truth = rx([("a", 3.0)])
        with pytest.raises(PairCountMismatch):
            evaluate_pairs([truth], [], FLAT_BASELINE)

    def test_empty_corpus_rejected(self):
        with pytest.raises(EmptyCorpus):
            evaluate_pairs([], [], FLAT_BASELINE)


class TestBaseline:
    def test_means_match_hand_computation(self):
        records = [
            make_record("x", [("ginger", 3.0), ("licorice", 6.0)]),
            make_record("y", [("ginger", 9.0)]),
        ]
        baseline = build_baseline(Corpus(records=tuple(records)))
        assert baseline.mean_grams["ginger"] == pytest.approx(6.0)
        assert baseline.mean_grams["licorice"] == pytest.approx(6.0)
        assert baseline.global_mean == pytest.approx(18.0 / 3)

    def test_unseen_herb_falls_back_to_global_mean(self):
        records = [make_record("x", [("ginger", 4.0)])]
        baseline = build_baseline(Corpus(records=tuple(records)))
        assert baseline.dosage_for("never-seen") == pytest.approx(4.0)

    def test_empty_train_corpus_rejected(self):
        with pytest.raises(EmptyCorpus):
            build_baseline(Corpus(records=()))

    def test_matches_brute_means_on_synthetic_corpus(self):
        corpus, _ = generate_synthetic(SynthSpec(n_records=30, seed=5))
        baseline = build_baseline(corpus)
        totals, counts = {}, {}
        grand = []
        for record in corpus.records:
            for item in record.prescription.items:
                totals[item.herb] = totals.get(item.herb, 0.0) + item.grams
                counts[item.herb] = counts.get(item.herb, 0) + 1
                grand.append(item.grams)
        for herb, total in totals.items():
            assert baseline.mean_grams[herb] == pytest.approx(total / counts[herb])
        assert baseline.global_mean == pytest.approx(sum(grand) / len(grand))


class TestReportSerialization:
    def test_json_round_trip(self):
        truth = rx([("a", 3.0), ("b", 6.0)])
        pred = rx([("a", 4.5)])
        report = evaluate_pairs([truth], [pred], FLAT_BASELINE)
        assert EvalReport.from_json(report.to_json()) == report

    def test_table_formats_values(self):
        truth = rx([("a", 3.0), ("b", 6.0), ("c", 9.0), ("d", 4.5)])
        pred = rx([("a", 3.0), ("b", 6.0), ("e", 10.0)])
        table = format_report_table(evaluate_pairs([truth], [pred], FLAT_BASELINE))
        assert "0.6667" in table and "0.5000" in table and "0.5714" in table

    def test_table_uses_na_for_absent_nmse(self):
        truth = rx([("a", 3.0)])
        pred = rx([("b", 3.0)])
        table = format_report_table(evaluate_pairs([truth], [pred], FLAT_BASELINE))
        assert "n/a" in table

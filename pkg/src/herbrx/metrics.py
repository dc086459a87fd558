"""Evaluation: herb-set overlap scores and normalized dosage error.

Herb selection is scored as set retrieval, micro-averaged over the corpus:
precision is total true positives over total predicted items, recall over
total reference items, and F1 is ``2tp / (2tp + fp + fn)``. Dosage accuracy
is scored only on matched herbs: each contributes the squared relative error
``((w_pred - w_true) / w_true)^2``, and the corpus value is the pooled sum
divided by the total number of matches. A reference point, the baseline
error, replaces every predicted dosage with the herb's mean dosage in the
training corpus (global mean for unseen herbs); a model must beat it for its
dosages to mean anything.

Results are invariant to item order: accumulation walks herbs in sorted
order, so reordering prescription items changes nothing, bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .corpus import Corpus, EmptyCorpus
from .prescription import Prescription


class MetricsError(ValueError):
    """Base class for evaluation errors."""


class PairCountMismatch(MetricsError):
    """Reference and prediction lists differ in length."""


@dataclass(frozen=True)
class DosageBaseline:
    """Per-herb mean training dosage with a global-mean fallback."""

    mean_grams: dict[str, float]
    global_mean: float

    def dosage_for(self, herb: str) -> float:
        return self.mean_grams.get(herb, self.global_mean)


def build_baseline(train_corpus: Corpus) -> DosageBaseline:
    if not train_corpus.records:
        raise EmptyCorpus("baseline needs a non-empty training corpus")
    totals: dict[str, float] = {}
    counts: dict[str, int] = {}
    grand_total = 0.0
    grand_count = 0
    for record in train_corpus.records:
        for item in record.prescription.items:
            totals[item.herb] = totals.get(item.herb, 0.0) + item.grams
            counts[item.herb] = counts.get(item.herb, 0) + 1
            grand_total += item.grams
            grand_count += 1
    means = {herb: totals[herb] / counts[herb] for herb in sorted(totals)}
    return DosageBaseline(mean_grams=means, global_mean=grand_total / grand_count)


@dataclass(frozen=True)
class PairCounts:
    """Per-pair tallies; corpus scores are sums of these."""

    tp: int
    fp: int
    fn: int
    sq_err: float
    sq_err_baseline: float

    @property
    def n_matched(self) -> int:
        return self.tp


def score_pair(
    truth: Prescription,
    prediction: Prescription | None,
    baseline: DosageBaseline,
) -> PairCounts:
    """Tallies for one record; an absent prediction counts all herbs missed."""
    true_grams = truth.grams_by_herb()
    if prediction is None:
        return PairCounts(tp=0, fp=0, fn=len(true_grams), sq_err=0.0, sq_err_baseline=0.0)
    pred_grams = prediction.grams_by_herb()
    matched = sorted(true_grams.keys() & pred_grams.keys())
    tp = len(matched)
    sq_err = 0.0
    sq_err_baseline = 0.0
    for herb in matched:
        w_true = true_grams[herb]
        rel = (pred_grams[herb] - w_true) / w_true
        sq_err += rel * rel
        rel_base = (baseline.dosage_for(herb) - w_true) / w_true
        sq_err_baseline += rel_base * rel_base
    return PairCounts(
        tp=tp,
        fp=len(pred_grams) - tp,
        fn=len(true_grams) - tp,
        sq_err=sq_err,
        sq_err_baseline=sq_err_baseline,
    )


def herb_set_scores(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Micro P/R/F1 from pooled counts; all-zero denominators score zero."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class EvalReport:
    """Corpus-level evaluation summary."""

    n_pairs: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    n_matched: int
    nmse: float | None
    nmse_baseline: float | None
    n_empty_predictions: int
    n_zero_match_pairs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate_pairs(
    truths: list[Prescription],
    predictions: list,
    baseline: DosageBaseline,
) -> EvalReport:
    """Pool per-pair tallies into one report.

    ``predictions`` entries may be ``None`` (nothing parseable generated).
    With zero matches across the corpus the dosage errors are undefined and
    reported as absent, never as zero.
    """
    if len(truths) != len(predictions):
        raise PairCountMismatch(
            f"{len(truths)} references vs {len(predictions)} predictions"
        )
    if not truths:
        raise EmptyCorpus("cannot evaluate zero pairs")
    tp = fp = fn = 0
    sq_err = 0.0
    sq_err_baseline = 0.0
    n_empty = 0
    n_zero_match = 0
    for truth, prediction in zip(truths, predictions):
        counts = score_pair(truth, prediction, baseline)
        tp += counts.tp
        fp += counts.fp
        fn += counts.fn
        sq_err += counts.sq_err
        sq_err_baseline += counts.sq_err_baseline
        if prediction is None:
            n_empty += 1
        if counts.tp == 0:
            n_zero_match += 1
    precision, recall, f1 = herb_set_scores(tp, fp, fn)
    nmse = sq_err / tp if tp else None
    nmse_baseline = sq_err_baseline / tp if tp else None
    return EvalReport(
        n_pairs=len(truths),
        tp=tp,
        fp=fp,
        fn=fn,
        precision=precision,
        recall=recall,
        f1=f1,
        n_matched=tp,
        nmse=nmse,
        nmse_baseline=nmse_baseline,
        n_empty_predictions=n_empty,
        n_zero_match_pairs=n_zero_match,
    )


def format_report_table(report: EvalReport) -> str:
    """Fixed-width summary table, one metrics row."""

    def fmt(value: float | None) -> str:
        return "n/a" if value is None else f"{value:.4f}"

    headers = ["Precision", "Recall", "F1", "NMSE", "NMSE_base"]
    values = [
        f"{report.precision:.4f}",
        f"{report.recall:.4f}",
        f"{report.f1:.4f}",
        fmt(report.nmse),
        fmt(report.nmse_baseline),
    ]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    row = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return head + "\n" + row

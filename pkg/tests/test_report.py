"""Figure rendering: files appear, are PNGs, and are input-deterministic."""

from herbrx.corpus import SynthSpec, generate_synthetic
from herbrx.metrics import DosageBaseline, evaluate_pairs
from herbrx.prescription import Prescription
from herbrx.report import fig_eval_summary, fig_herbs_histogram, fig_training_curves
from herbrx.trainer import LogRow

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def sample_log():
    return [
        LogRow(step=s, epoch=s // 4, lr=1e-3 * (1 - s / 12), loss=4.0 * 0.8**s)
        for s in range(12)
    ]


def sample_report(zero_match=False):
    truth = Prescription.from_pairs([("a", 3.0), ("b", 6.0)])
    pred = Prescription.from_pairs([("c", 3.0)] if zero_match else [("a", 4.5)])
    baseline = DosageBaseline(mean_grams={"a": 5.0}, global_mean=6.0)
    return evaluate_pairs([truth], [pred], baseline)


class TestFigureFiles:
    def test_training_curves_writes_png(self, tmp_path):
        path = tmp_path / "curves.png"
        fig_training_curves(sample_log(), path)
        assert path.read_bytes()[:8] == PNG_MAGIC

    def test_histogram_writes_png(self, tmp_path):
        corpus, _ = generate_synthetic(SynthSpec(n_records=25, seed=2))
        path = tmp_path / "hist.png"
        fig_herbs_histogram(corpus, path)
        assert path.read_bytes()[:8] == PNG_MAGIC

    def test_eval_summary_writes_png(self, tmp_path):
        path = tmp_path / "eval.png"
        fig_eval_summary(sample_report(), path)
        assert path.read_bytes()[:8] == PNG_MAGIC

    def test_eval_summary_handles_absent_nmse(self, tmp_path):
        path = tmp_path / "eval_na.png"
        fig_eval_summary(sample_report(zero_match=True), path)
        assert path.read_bytes()[:8] == PNG_MAGIC

    def test_same_inputs_same_bytes(self, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        fig_training_curves(sample_log(), a)
        fig_training_curves(sample_log(), b)
        assert a.read_bytes() == b.read_bytes()

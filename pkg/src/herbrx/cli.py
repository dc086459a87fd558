"""Command-line interface.

Subcommands cover the whole pipeline: ``gen-data`` synthesizes a corpus,
``augment`` replays records with shuffled item order, ``stats`` summarizes a
corpus, ``train`` fine-tunes adapters, ``predict`` generates prescriptions,
and ``eval`` scores predictions against references.

Conventions shared by every command:

* ``--config FILE`` (before the subcommand) supplies ``key=value`` defaults;
  explicit flags win over the file, the file wins over built-ins.
* ``--threads N`` (before the subcommand) pins the BLAS thread count; it
  works by setting environment variables before numerical modules load, so
  it only takes effect when this process entry point is the first importer.
* Every command writes a ``*.manifest.json`` beside its primary output
  recording the resolved settings, inputs, outputs, and timing.
* Exit codes: 0 success, 1 usage error, 2 data or validation error,
  3 numerical failure.

Heavy imports happen inside handlers, after ``--threads`` is applied.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems with exit code 2; this tool uses 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


class UsageError(Exception):
    """Bad invocation discovered after argparse (missing required option)."""


class ConfigFileError(Exception):
    """The --config file is unreadable or holds unknown or bad values."""


# Built-in defaults per subcommand. ``None`` marks a required option and
# optional outputs; booleans here give config-file values their type.
_DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "n": 200,
        "herbs": 50,
        "symptom_tokens": 12,
        "symptoms_per_record": 3,
        "herbs_mean": 6.0,
        "herbs_std": 0.8,
        "seed": 0,
        "out_path": None,
    },
    "augment": {
        "k": 20,
        "seed": 0,
        "in_path": None,
        "out_path": None,
    },
    "stats": {
        "in_path": None,
        "out_path": "",
        "fig": "",
    },
    "train": {
        "corpus_path": None,
        "outdir": None,
        "d_model": 128,
        "n_layers": 4,
        "n_heads": 4,
        "d_ff": 512,
        "max_seq_len": 512,
        "rank": 16,
        "alpha": 32.0,
        "epochs": 10,
        "lr": 1e-3,
        "batch_size": 16,
        "grad_accum": 8,
        "seed": 0,
        "prompt_masking": True,
    },
    "predict": {
        "model_dir": None,
        "in_path": None,
        "out_path": None,
        "top_k": 50,
        "top_p": 0.7,
        "temperature": 0.95,
        "max_new_tokens": 128,
        "seed": 0,
        "greedy": False,
    },
    "eval": {
        "true_path": None,
        "pred_path": None,
        "train_path": None,
        "out_path": None,
        "fig": "",
    },
}

_REQUIRED: dict[str, tuple[str, ...]] = {
    "gen-data": ("out_path",),
    "augment": ("in_path", "out_path"),
    "stats": ("in_path",),
    "train": ("corpus_path", "outdir"),
    "predict": ("model_dir", "in_path", "out_path"),
    "eval": ("true_path", "pred_path", "train_path", "out_path"),
}

_FLAG_OF = {
    "out_path": "--out",
    "in_path": "--in",
    "true_path": "--true",
    "pred_path": "--pred",
    "train_path": "--train",
    "corpus_path": "--corpus",
}

_PATH_KEY_ALIASES = {"in", "out", "true", "pred", "train", "corpus"}


def _build_parser() -> _Parser:
    root = _Parser(prog="herbrx", description="Herbal prescription generation pipeline")
    root.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    root.add_argument("--config", default=None, metavar="FILE",
                      help="key=value file of option defaults for the subcommand")
    root.add_argument("--threads", type=int, default=None, metavar="N",
                      help="pin the BLAS thread count (set before numerics load)")
    sub = root.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen-data", help="synthesize a clinical corpus")
    p.add_argument("--n", type=int, help="number of records")
    p.add_argument("--herbs", type=int, help="herb inventory size")
    p.add_argument("--symptom-tokens", type=int, help="symptom vocabulary size")
    p.add_argument("--symptoms-per-record", type=int, help="symptoms per chief complaint")
    p.add_argument("--herbs-mean", type=float, help="mean herbs per prescription")
    p.add_argument("--herbs-std", type=float, help="std of herbs per prescription")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_path", help="corpus JSONL to write")

    p = sub.add_parser("augment", help="permutation-augment a corpus")
    p.add_argument("--in", dest="in_path", help="corpus JSONL to read")
    p.add_argument("--out", dest="out_path", help="augmented JSONL to write")
    p.add_argument("--k", type=int, help="copies per record")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("stats", help="summarize a corpus")
    p.add_argument("--in", dest="in_path", help="corpus JSONL to read")
    p.add_argument("--out", dest="out_path", help="also write the summary as JSON")
    p.add_argument("--fig", help="also write a prescription-size histogram PNG")

    p = sub.add_parser("train", help="fine-tune adapters on a corpus")
    p.add_argument("--corpus", dest="corpus_path", help="training corpus JSONL")
    p.add_argument("--outdir", help="directory for checkpoints, vocab, logs")
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--rank", type=int, help="adapter rank")
    p.add_argument("--alpha", type=float, help="adapter scale numerator")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--grad-accum", type=int, help="microbatches per optimizer step")
    p.add_argument("--seed", type=int, help="seed for init and data order")
    p.add_argument("--prompt-masking", action=argparse.BooleanOptionalAction,
                   default=None, help="restrict the loss to target positions")

    p = sub.add_parser("predict", help="generate prescriptions for records")
    p.add_argument("--model-dir", help="directory written by train")
    p.add_argument("--in", dest="in_path", help="records JSONL (prescription optional)")
    p.add_argument("--out", dest="out_path", help="predictions JSONL to write")
    p.add_argument("--top-k", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--greedy", action=argparse.BooleanOptionalAction, default=None,
                   help="argmax decoding (overrides top-k/top-p/temperature)")

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--true", dest="true_path", help="reference records JSONL")
    p.add_argument("--pred", dest="pred_path", help="predictions JSONL from predict")
    p.add_argument("--train", dest="train_path", help="training corpus for the dosage baseline")
    p.add_argument("--out", dest="out_path", help="evaluation report JSON to write")
    p.add_argument("--fig", help="also write a metrics chart PNG")

    return root


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config file: {exc}") from exc
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"config line {line_no} is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key in _PATH_KEY_ALIASES:
            key = f"{key}_path"
        values[key] = value.strip()
    return values


def _coerce(key: str, text: str, template) -> object:
    if isinstance(template, bool):
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigFileError(f"config key {key!r} needs a boolean, got {text!r}")
    if isinstance(template, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigFileError(f"config key {key!r} needs an integer, got {text!r}") from exc
    if isinstance(template, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigFileError(f"config key {key!r} needs a number, got {text!r}") from exc
    return text


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """Built-in defaults, overlaid by the config file, overlaid by flags."""
    defaults = dict(_DEFAULTS[command])
    if args.config:
        file_values = _parse_config_file(args.config)
        for key, text in file_values.items():
            if key == "threads":
                if args.threads is None:
                    args.threads = int(text)
                continue
            if key not in defaults:
                raise ConfigFileError(f"config key {key!r} unknown to {command!r}")
            template = defaults[key]
            if template is None or isinstance(template, str):
                defaults[key] = text
            else:
                defaults[key] = _coerce(key, text, template)
    for key in list(defaults):
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            defaults[key] = flag_value
    missing = [k for k in _REQUIRED[command] if not defaults.get(k)]
    if missing:
        flags = ", ".join(_FLAG_OF.get(k, "--" + k.replace("_", "-")) for k in missing)
        raise UsageError(f"missing required option(s): {flags}")
    return defaults


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be at least 1")
    for var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class _Run:
    """Collects inputs/outputs and writes the manifest next to the target."""

    def __init__(self, command: str, settings: dict) -> None:
        self.command = command
        self.settings = {k: v for k, v in settings.items()}
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started_at = _utc_now()
        self._t0 = time.perf_counter()

    def input(self, name: str, path) -> Path:
        self.inputs[name] = str(path)
        return Path(path)

    def output(self, name: str, path) -> Path:
        self.outputs[name] = str(path)
        return Path(path)

    def write_manifest(self, target) -> Path:
        path = Path(target)
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "settings": self.settings,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at": self.started_at,
            "finished_at": _utc_now(),
            "wall_seconds": round(time.perf_counter() - self._t0, 3),
        }
        self.outputs["manifest"] = str(path)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True)
            handle.write("\n")
        return path


# ---------------------------------------------------------------------------
# handlers


def _cmd_gen_data(eff: dict) -> int:
    from .corpus import SynthSpec, generate_synthetic, save_ground_truth, save_jsonl

    run = _Run("gen-data", eff)
    spec = SynthSpec(
        n_records=eff["n"],
        n_herbs=eff["herbs"],
        n_symptom_tokens=eff["symptom_tokens"],
        symptoms_per_record=eff["symptoms_per_record"],
        herbs_per_rx_mean=eff["herbs_mean"],
        herbs_per_rx_std=eff["herbs_std"],
        seed=eff["seed"],
    )
    corpus, truth = generate_synthetic(spec)
    out = run.output("corpus", eff["out_path"])
    save_jsonl(corpus, out)
    truth_path = run.output("ground_truth", str(out) + ".truth.json")
    save_ground_truth(truth, truth_path)
    run.write_manifest(str(out) + ".manifest.json")
    print(f"wrote {len(corpus)} records to {out}")
    return 0


def _cmd_augment(eff: dict) -> int:
    from .corpus import augment_permute, load_jsonl, save_jsonl

    run = _Run("augment", eff)
    corpus = load_jsonl(run.input("corpus", eff["in_path"]))
    augmented = augment_permute(corpus, eff["k"], eff["seed"])
    out = run.output("augmented", eff["out_path"])
    save_jsonl(augmented, out)
    run.write_manifest(str(out) + ".manifest.json")
    print(f"wrote {len(augmented)} records ({eff['k']} copies each) to {out}")
    return 0


def _cmd_stats(eff: dict) -> int:
    from dataclasses import asdict

    from .corpus import load_jsonl, stats

    run = _Run("stats", eff)
    corpus = load_jsonl(run.input("corpus", eff["in_path"]))
    summary = stats(corpus)
    rows = [
        ("records", f"{summary.n_records}"),
        ("distinct herbs", f"{summary.n_distinct_herbs}"),
        ("max herbs per prescription", f"{summary.max_herbs_per_rx}"),
        ("mean herbs per prescription", f"{summary.mean_herbs_per_rx:.2f}"),
        ("std herbs per prescription", f"{summary.std_herbs_per_rx:.2f}"),
    ]
    width = max(len(label) for label, _ in rows)
    for label, value in rows:
        print(f"{label.ljust(width)}  {value}")
    primary = eff["in_path"]
    if eff["out_path"]:
        out = run.output("summary", eff["out_path"])
        with open(out, "w", encoding="utf-8") as handle:
            json.dump(asdict(summary), handle, indent=2, sort_keys=True)
            handle.write("\n")
        primary = out
    if eff["fig"]:
        from .report import fig_herbs_histogram

        fig_herbs_histogram(corpus, run.output("figure", eff["fig"]))
    run.write_manifest(str(primary) + ".manifest.json")
    return 0


def _cmd_train(eff: dict) -> int:
    from .corpus import load_jsonl
    from .lm import ModelConfig, init_model, save_checkpoint
    from .report import fig_training_curves
    from .tokenizer import build_vocab, save_vocab
    from .trainer import TrainConfig, save_log_csv, train

    run = _Run("train", eff)
    corpus = load_jsonl(run.input("corpus", eff["corpus_path"]))
    outdir = Path(eff["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)

    vocab = build_vocab(corpus)
    save_vocab(vocab, run.output("vocab", outdir / "vocab.json"))

    model_config = ModelConfig(
        vocab_size=len(vocab),
        d_model=eff["d_model"],
        n_layers=eff["n_layers"],
        n_heads=eff["n_heads"],
        d_ff=eff["d_ff"],
        max_seq_len=eff["max_seq_len"],
        lora_rank=eff["rank"],
        lora_alpha=eff["alpha"],
    )
    params = init_model(model_config, eff["seed"])
    train_config = TrainConfig(
        epochs=eff["epochs"],
        base_lr=eff["lr"],
        batch_size=eff["batch_size"],
        grad_accum_steps=eff["grad_accum"],
        seed=eff["seed"],
        loss_masking=eff["prompt_masking"],
    )

    def checkpoint_epoch(epoch: int, current) -> None:
        path = outdir / f"adapters_epoch{epoch:02d}.ckpt"
        save_checkpoint(path, current, include_base=False)
        run.output(f"adapters_epoch{epoch:02d}", path)

    result = train(params, corpus, vocab, train_config, on_epoch_end=checkpoint_epoch)

    save_checkpoint(run.output("model", outdir / "model.ckpt"), result.params)
    save_checkpoint(
        run.output("adapters", outdir / "adapters.ckpt"),
        result.params,
        include_base=False,
    )
    save_log_csv(result.log, run.output("log", outdir / "train_log.csv"))
    fig_training_curves(result.log, run.output("curves", outdir / "train_curves.png"))
    run.write_manifest(outdir / "manifest.json")
    print(
        f"trained {train_config.epochs} epochs, {len(result.log)} optimizer steps, "
        f"final loss {result.log[-1].loss:.4f}"
    )
    return 0


def _load_prompt_records(path):
    """Records for prediction; the prescription field is optional here."""
    from .prescription import ClinicalRecord, Prescription, PrescriptionItem

    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {line_no}: invalid JSON: {exc}") from exc
            for name in ("chief_complaint", "history", "tongue"):
                if not isinstance(obj.get(name), str):
                    raise ValueError(f"line {line_no}: missing text field {name!r}")
            placeholder = Prescription((PrescriptionItem("unspecified", 1.0),))
            records.append(
                ClinicalRecord(
                    chief_complaint=obj["chief_complaint"],
                    history=obj["history"],
                    tongue=obj["tongue"],
                    prescription=placeholder,
                )
            )
    return records


def _cmd_predict(eff: dict) -> int:
    from .lm import load_model
    from .sampler import SamplerConfig, predict_many
    from .tokenizer import load_vocab

    run = _Run("predict", eff)
    model_dir = Path(eff["model_dir"])
    params = load_model(run.input("model", model_dir / "model.ckpt"))
    vocab = load_vocab(run.input("vocab", model_dir / "vocab.json"))
    records = _load_prompt_records(run.input("records", eff["in_path"]))
    if not records:
        raise ValueError("no records to predict for")

    if eff["greedy"]:
        config = SamplerConfig.greedy(max_new_tokens=eff["max_new_tokens"])
    else:
        config = SamplerConfig(
            top_k=eff["top_k"],
            top_p=eff["top_p"],
            temperature=eff["temperature"],
            max_new_tokens=eff["max_new_tokens"],
            seed=eff["seed"],
        )
    outcomes = predict_many(params, vocab, records, config)

    out = run.output("predictions", eff["out_path"])
    with open(out, "w", encoding="utf-8") as handle:
        for outcome in outcomes:
            items = None
            if outcome.prescription is not None:
                items = [
                    {"herb": item.herb, "grams": item.grams}
                    for item in outcome.prescription.items
                ]
            handle.write(
                json.dumps(
                    {
                        "text": outcome.text,
                        "items": items,
                        "warnings": list(outcome.warnings),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    run.write_manifest(str(out) + ".manifest.json")
    n_parsed = sum(1 for o in outcomes if o.prescription is not None)
    print(f"wrote {len(outcomes)} predictions ({n_parsed} parseable) to {out}")
    return 0


def _load_predictions(path):
    from .prescription import Prescription

    predictions = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {line_no}: invalid JSON: {exc}") from exc
            items = obj.get("items")
            if items is None:
                predictions.append(None)
                continue
            predictions.append(
                Prescription.from_pairs((it["herb"], it["grams"]) for it in items)
            )
    return predictions


def _cmd_eval(eff: dict) -> int:
    from .corpus import load_jsonl
    from .metrics import build_baseline, evaluate_pairs, format_report_table

    run = _Run("eval", eff)
    truths = load_jsonl(run.input("references", eff["true_path"]))
    predictions = _load_predictions(run.input("predictions", eff["pred_path"]))
    train_corpus = load_jsonl(run.input("train_corpus", eff["train_path"]))
    baseline = build_baseline(train_corpus)
    report = evaluate_pairs(
        [record.prescription for record in truths.records], predictions, baseline
    )
    out = run.output("report", eff["out_path"])
    with open(out, "w", encoding="utf-8") as handle:
        handle.write(report.to_json())
    if eff["fig"]:
        from .report import fig_eval_summary

        fig_eval_summary(report, run.output("figure", eff["fig"]))
    run.write_manifest(str(out) + ".manifest.json")
    print(format_report_table(report))
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "augment": _cmd_augment,
    "stats": _cmd_stats,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
}


def _exit_code_for(exc: Exception) -> int:
    """Map an exception to the documented exit code (2 data, 3 numeric)."""
    from .autodiff import NonFiniteInput
    from .trainer import NonFiniteLoss

    if isinstance(exc, (NonFiniteLoss, NonFiniteInput, FloatingPointError, OverflowError)):
        return 3
    return 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_threads(args.threads)
        eff = _resolve(args.command, args)
    except UsageError as exc:
        print(f"herbrx {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ConfigFileError as exc:
        print(f"herbrx: error: {exc}", file=sys.stderr)
        return 2
    try:
        return _HANDLERS[args.command](eff)
    except Exception as exc:  # noqa: BLE001 - the boundary maps to exit codes
        code = _exit_code_for(exc)
        print(f"herbrx {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

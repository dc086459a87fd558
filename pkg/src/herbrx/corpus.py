"""Clinical-record corpora: JSONL persistence, statistics, splits, synthesis.

The synthetic generator builds a corpus with a recoverable structure: each
symptom token owns a fixed set of herbs with fixed dosages, a record's chief
complaint lists a few symptom tokens, and its prescription is the union of
their herb sets, trimmed or padded to a sampled size. Padding herbs take a
herb-specific default dosage drawn independently of any symptom assignment,
so a dosage-mean baseline is beatable by a model that reads the symptoms.

Permutation augmentation replays each record K times with the prescription
items in independently shuffled orders, teaching an autoregressive model that
item order carries no meaning.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from string import ascii_lowercase

import numpy as np

from .prescription import (
    ClinicalRecord,
    Prescription,
    PrescriptionError,
    PrescriptionItem,
)


class CorpusError(ValueError):
    """Base class for corpus-level errors."""


class SchemaError(CorpusError):
    """A JSONL line is not a well-formed record object."""

    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class InvariantViolation(CorpusError):
    """A JSONL line parsed but violates a domain invariant."""

    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyCorpus(CorpusError):
    """An operation needs at least one record."""


class SpecInfeasible(CorpusError):
    """Synthesis parameters cannot produce a valid corpus."""


@dataclass(frozen=True)
class Corpus:
    """An immutable sequence of clinical records with a derived herb vocabulary."""

    records: tuple[ClinicalRecord, ...]
    herb_vocabulary: frozenset[str] = field(init=False)

    def __post_init__(self) -> None:
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        herbs = frozenset(
            item.herb for record in records for item in record.prescription.items
        )
        object.__setattr__(self, "herb_vocabulary", herbs)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class CorpusStats:
    """Summary row: record count, distinct herbs, prescription-size stats."""

    n_records: int
    n_distinct_herbs: int
    max_herbs_per_rx: int
    mean_herbs_per_rx: float
    std_herbs_per_rx: float


def stats(corpus: Corpus) -> CorpusStats:
    """Compute summary statistics; std is the population standard deviation."""
    if not corpus.records:
        raise EmptyCorpus("cannot summarize an empty corpus")
    counts = [len(record.prescription) for record in corpus.records]
    return CorpusStats(
        n_records=len(counts),
        n_distinct_herbs=len(corpus.herb_vocabulary),
        max_herbs_per_rx=max(counts),
        mean_herbs_per_rx=statistics.fmean(counts),
        std_herbs_per_rx=statistics.pstdev(counts),
    )


def _record_to_dict(record: ClinicalRecord) -> dict:
    return {
        "chief_complaint": record.chief_complaint,
        "history": record.history,
        "tongue": record.tongue,
        "prescription": [
            {"herb": item.herb, "grams": item.grams}
            for item in record.prescription.items
        ],
    }


def _record_from_dict(obj: dict, line_no: int) -> ClinicalRecord:
    if not isinstance(obj, dict):
        raise SchemaError(line_no, f"expected an object, got {type(obj).__name__}")
    for name in ("chief_complaint", "history", "tongue"):
        if name not in obj:
            raise SchemaError(line_no, f"missing field {name!r}")
        if not isinstance(obj[name], str):
            raise SchemaError(line_no, f"field {name!r} must be a string")
    if "prescription" not in obj:
        raise SchemaError(line_no, "missing field 'prescription'")
    raw_items = obj["prescription"]
    if not isinstance(raw_items, list):
        raise SchemaError(line_no, "field 'prescription' must be a list")
    pairs = []
    for raw in raw_items:
        if not isinstance(raw, dict) or "herb" not in raw or "grams" not in raw:
            raise SchemaError(line_no, f"bad prescription item {raw!r}")
        pairs.append((raw["herb"], raw["grams"]))
    try:
        prescription = Prescription.from_pairs(pairs)
        return ClinicalRecord(
            chief_complaint=obj["chief_complaint"],
            history=obj["history"],
            tongue=obj["tongue"],
            prescription=prescription,
        )
    except (PrescriptionError, ValueError) as exc:
        raise InvariantViolation(line_no, str(exc)) from exc


def load_jsonl(path) -> Corpus:
    """Load one record per line; empty files give an empty corpus."""
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, f"invalid JSON: {exc}") from exc
            records.append(_record_from_dict(obj, line_no))
    return Corpus(tuple(records))


def save_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in corpus.records:
            handle.write(json.dumps(_record_to_dict(record), sort_keys=True) + "\n")


def split(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Deterministic disjoint train/test partition preserving record order."""
    if not corpus.records:
        raise EmptyCorpus("cannot split an empty corpus")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(corpus.records)
    n_test = int(round(n * test_fraction))
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(int(i) for i in order[:n_test])
    train = tuple(r for i, r in enumerate(corpus.records) if i not in test_idx)
    test = tuple(r for i, r in enumerate(corpus.records) if i in test_idx)
    return Corpus(train), Corpus(test)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for synthetic corpus generation."""

    n_records: int = 200
    n_herbs: int = 50
    n_symptom_tokens: int = 12
    symptoms_per_record: int = 3
    herbs_per_rx_mean: float = 6.0
    herbs_per_rx_std: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_records < 1:
            raise SpecInfeasible("n_records must be at least 1")
        if self.n_herbs < 1 or self.n_symptom_tokens < 1:
            raise SpecInfeasible("need at least one herb and one symptom token")
        if not 1 <= self.symptoms_per_record <= self.n_symptom_tokens:
            raise SpecInfeasible(
                "symptoms_per_record must be between 1 and n_symptom_tokens"
            )
        if not self.herbs_per_rx_mean > 0 or self.herbs_per_rx_std < 0:
            raise SpecInfeasible("herb count distribution must have positive mean")
        if round(self.herbs_per_rx_mean) > self.n_herbs:
            raise SpecInfeasible("herbs_per_rx_mean exceeds the herb inventory")


# Dosage values live on a small grid of common gram amounts, all with at most
# one fractional digit.
DOSE_GRID = (3.0, 4.5, 6.0, 9.0, 10.0, 12.0, 15.0)


def _letters(index: int) -> str:
    """0 -> 'a', 25 -> 'z', 26 -> 'aa', deterministic and letter-only."""
    out = []
    index += 1
    while index > 0:
        index, rem = divmod(index - 1, 26)
        out.append(ascii_lowercase[rem])
    return "".join(reversed(out))


_SEVERITIES = ("acute", "chronic")


@dataclass(frozen=True)
class GroundTruth:
    """The generator's hidden map, saved beside the corpus for inspection."""

    herbs: tuple[str, ...]
    symptoms: tuple[str, ...]
    symptom_herbs: dict  # symptom -> list of herb names
    dose_variants: dict  # herb -> {"acute": grams, "chronic": grams}


def generate_synthetic(spec: SynthSpec) -> tuple[Corpus, GroundTruth]:
    """Generate a corpus whose prescriptions are predictable from the prompt.

    Herb selection: each symptom token owns a fixed herb set (dealt from one
    shuffled deck, so sets are disjoint whenever the inventory allows). A
    record draws ``symptoms_per_record`` distinct symptoms; its prescription
    is the union of their herb sets in drawn order, trimmed to or padded up
    to a sampled herb count (padding comes from the unused inventory).

    Dosage: every herb has two distinct gram values; the record's severity
    word, written into the history field, selects which one every included
    herb uses. A per-herb mean thus sits between the two variants and cannot
    match either, while a model that reads the history can.
    """
    herbs = tuple(f"herb{_letters(i)}" for i in range(spec.n_herbs))
    symptoms = tuple(f"sym{_letters(j)}" for j in range(spec.n_symptom_tokens))

    herbs_per_symptom = max(1, round(spec.herbs_per_rx_mean / spec.symptoms_per_record))
    if herbs_per_symptom > spec.n_herbs:
        raise SpecInfeasible("each symptom needs more herbs than the inventory has")

    map_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    deck = [herbs[i] for i in map_rng.permutation(spec.n_herbs)]
    symptom_herbs: dict[str, list[str]] = {}
    cursor = 0
    for symptom in symptoms:
        assigned = []
        for _ in range(herbs_per_symptom):
            if cursor >= len(deck):
                cursor = 0
            assigned.append(deck[cursor])
            cursor += 1
        symptom_herbs[symptom] = assigned
    dose_variants: dict[str, dict[str, float]] = {}
    for herb in herbs:
        a = int(map_rng.integers(len(DOSE_GRID)))
        b = (a + 1 + int(map_rng.integers(len(DOSE_GRID) - 1))) % len(DOSE_GRID)
        dose_variants[herb] = {
            "acute": DOSE_GRID[a],
            "chronic": DOSE_GRID[b],
        }

    records = []
    for i in range(spec.n_records):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1, i)))
        chosen = rng.choice(spec.n_symptom_tokens, size=spec.symptoms_per_record, replace=False)
        chosen_symptoms = [symptoms[int(j)] for j in chosen]
        severity = _SEVERITIES[int(rng.integers(2))]

        included: list[str] = []
        in_union: set[str] = set()
        for symptom in chosen_symptoms:
            for herb in symptom_herbs[symptom]:
                if herb not in in_union:
                    in_union.add(herb)
                    included.append(herb)

        count = int(np.clip(round(rng.normal(spec.herbs_per_rx_mean, spec.herbs_per_rx_std)), 1, spec.n_herbs))
        if count < len(included):
            keep = sorted(int(k) for k in rng.choice(len(included), size=count, replace=False))
            included = [included[k] for k in keep]
        elif count > len(included):
            pool = sorted(set(herbs) - in_union)
            extra = rng.choice(len(pool), size=count - len(included), replace=False)
            included.extend(pool[int(k)] for k in sorted(int(k) for k in extra))

        records.append(
            ClinicalRecord(
                chief_complaint=" ".join(chosen_symptoms),
                history=severity,
                tongue="pale",
                prescription=Prescription(
                    tuple(
                        PrescriptionItem(h, dose_variants[h][severity])
                        for h in included
                    )
                ),
            )
        )

    truth = GroundTruth(
        herbs=herbs,
        symptoms=symptoms,
        symptom_herbs=symptom_herbs,
        dose_variants=dose_variants,
    )
    return Corpus(tuple(records)), truth


def save_ground_truth(truth: GroundTruth, path) -> None:
    obj = {
        "herbs": list(truth.herbs),
        "symptoms": list(truth.symptoms),
        "symptom_herbs": truth.symptom_herbs,
        "dose_variants": truth.dose_variants,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(obj, handle, indent=2, sort_keys=True)
        handle.write("\n")


def augment_permute(corpus: Corpus, k: int, seed: int) -> Corpus:
    """Replay each record ``k`` times with independently shuffled item order.

    Copy ``j`` of record ``i`` uses its own seeded stream, so the output is
    reproducible and unaffected by corpus size or iteration order. The k
    copies of each record are adjacent in the result. ``k = 1`` still
    shuffles once, which preserves the multiset of items of every record.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not corpus.records:
        raise EmptyCorpus("cannot augment an empty corpus")
    out = []
    for i, record in enumerate(corpus.records):
        items = record.prescription.items
        for j in range(k):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, j)))
            order = rng.permutation(len(items))
            shuffled = tuple(items[int(p)] for p in order)
            out.append(
                ClinicalRecord(
                    chief_complaint=record.chief_complaint,
                    history=record.history,
                    tongue=record.tongue,
                    prescription=Prescription(shuffled),
                )
            )
    return Corpus(tuple(out))

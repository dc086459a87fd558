"""Domain types for herbal prescriptions and the text forms they travel in.

A prescription is an ordered set of (herb, dosage) items. The canonical text
form is ``"<herb> <grams>g"`` items joined by ``", "``; dosages carry at most
one fractional digit and drop a trailing ``.0``. Prompts follow a fixed
single-line template ending in ``"\\nPrescription:"`` so a language model can
complete the prescription after the marker.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass


class PrescriptionError(ValueError):
    """Base class for prescription construction and parsing errors."""


class MalformedItem(PrescriptionError):
    """An item does not match the ``<herb> <grams>g`` form."""


class DuplicateHerb(PrescriptionError):
    """The same herb appears more than once in one prescription."""


class EmptyPrescription(PrescriptionError):
    """A prescription must contain at least one item."""


# Herb names may contain interior spaces but no delimiter characters,
# since commas and newlines separate items and records in text form.
_FORBIDDEN_IN_HERB = (",", "\n")

# Canonical dosage text: integer part without leading zeros, optionally one
# nonzero fractional digit (serialize drops ".0"). "0" alone is excluded
# because dosages are positive.
_STRICT_GRAMS_RE = re.compile(r"^(?:[1-9]\d*|(?:0|[1-9]\d*)\.[1-9])$")
_LENIENT_GRAMS_RE = re.compile(r"^\d+(?:\.\d+)?$")


def _validate_grams(grams: float) -> None:
    if not isinstance(grams, (int, float)) or isinstance(grams, bool):
        raise MalformedItem(f"dosage must be a number, got {type(grams).__name__}")
    if not math.isfinite(grams) or grams <= 0:
        raise MalformedItem(f"dosage must be a positive finite number, got {grams!r}")
    if abs(grams * 10 - round(grams * 10)) > 1e-6:
        raise MalformedItem(f"dosage must not need more than one fractional digit, got {grams!r}")


def _validate_herb(herb: str) -> None:
    if not isinstance(herb, str) or not herb:
        raise MalformedItem(f"herb name must be a non-empty string, got {herb!r}")
    if herb != herb.strip():
        raise MalformedItem(f"herb name has leading or trailing whitespace: {herb!r}")
    for ch in _FORBIDDEN_IN_HERB:
        if ch in herb:
            raise MalformedItem(f"herb name contains delimiter {ch!r}: {herb!r}")


def format_grams(grams: float) -> str:
    """Render a dosage with at most one fractional digit, dropping ``.0``.

    >>> format_grams(9.0), format_grams(4.5)
    ('9', '4.5')
    """
    tenths = round(grams * 10)
    whole, frac = divmod(tenths, 10)
    return str(whole) if frac == 0 else f"{whole}.{frac}"


@dataclass(frozen=True)
class PrescriptionItem:
    """One herb with its dosage in grams."""

    herb: str
    grams: float

    def __post_init__(self) -> None:
        _validate_herb(self.herb)
        _validate_grams(self.grams)
        object.__setattr__(self, "grams", float(self.grams))

    def render(self) -> str:
        return f"{self.herb} {format_grams(self.grams)}g"


@dataclass(frozen=True)
class Prescription:
    """An ordered collection of items, one per distinct herb."""

    items: tuple[PrescriptionItem, ...]

    def __post_init__(self) -> None:
        items = tuple(self.items)
        object.__setattr__(self, "items", items)
        if not items:
            raise EmptyPrescription("a prescription needs at least one item")
        seen: set[str] = set()
        for item in items:
            if item.herb in seen:
                raise DuplicateHerb(f"herb appears twice: {item.herb!r}")
            seen.add(item.herb)

    @classmethod
    def from_pairs(cls, pairs) -> "Prescription":
        return cls(tuple(PrescriptionItem(herb, grams) for herb, grams in pairs))

    def __len__(self) -> int:
        return len(self.items)

    def herbs(self) -> tuple[str, ...]:
        return tuple(item.herb for item in self.items)

    def herb_set(self) -> frozenset[str]:
        return frozenset(item.herb for item in self.items)

    def grams_by_herb(self) -> dict[str, float]:
        return {item.herb: item.grams for item in self.items}


@dataclass(frozen=True)
class ClinicalRecord:
    """One visit: free-text findings plus the prescription given for them."""

    chief_complaint: str
    history: str
    tongue: str
    prescription: Prescription

    def __post_init__(self) -> None:
        if not isinstance(self.chief_complaint, str) or not self.chief_complaint.strip():
            raise ValueError("chief_complaint must be a non-empty string")
        for name in ("history", "tongue"):
            if not isinstance(getattr(self, name), str):
                raise ValueError(f"{name} must be a string")


def serialize(prescription: Prescription) -> str:
    """Canonical text form: ``"herb 9g, other 4.5g"``."""
    return ", ".join(item.render() for item in prescription.items)


def _parse_item_strict(text: str) -> PrescriptionItem:
    head, sep, tail = text.rpartition(" ")
    if not sep or not head:
        raise MalformedItem(f"item is not '<herb> <grams>g': {text!r}")
    if not tail.endswith("g"):
        raise MalformedItem(f"dosage missing 'g' suffix: {text!r}")
    number = tail[:-1]
    if not _STRICT_GRAMS_RE.match(number):
        raise MalformedItem(f"dosage is not a canonical positive number: {text!r}")
    return PrescriptionItem(head, float(number))


def parse_strict(text: str) -> Prescription:
    """Exact inverse of :func:`serialize`; raises on any deviation."""
    if not text:
        raise EmptyPrescription("empty prescription text")
    return Prescription(tuple(_parse_item_strict(part) for part in text.split(", ")))


def parse_lenient(text: str) -> tuple[Prescription | None, list[str]]:
    """Salvage well-formed items from model output.

    Splits on commas, trims whitespace, keeps items matching
    ``<herb> <grams>g`` with a positive one-fractional-digit dosage, and drops
    the rest with one warning each. Duplicate herbs keep the first occurrence.
    Returns ``(None, warnings)`` when nothing survives.
    """
    warnings: list[str] = []
    items: list[PrescriptionItem] = []
    seen: set[str] = set()
    for raw in text.split(","):
        part = raw.strip()
        if not part:
            if raw or text:
                warnings.append(f"skipped empty item in {text!r}")
            continue
        head, sep, tail = part.rpartition(" ")
        herb = head.strip()
        if not sep or not herb or not tail.endswith("g"):
            warnings.append(f"skipped malformed item {part!r}")
            continue
        number = tail[:-1]
        if not _LENIENT_GRAMS_RE.match(number):
            warnings.append(f"skipped malformed item {part!r}")
            continue
        try:
            item = PrescriptionItem(herb, float(number))
        except PrescriptionError as exc:
            warnings.append(f"skipped invalid item {part!r}: {exc}")
            continue
        if item.herb in seen:
            warnings.append(f"skipped duplicate herb {item.herb!r}")
            continue
        seen.add(item.herb)
        items.append(item)
    if not items:
        if not warnings:
            warnings.append("no items found")
        return None, warnings
    return Prescription(tuple(items)), warnings


def render_prompt(record: ClinicalRecord) -> str:
    """Fixed prompt template; the model completes after ``Prescription:``."""
    return (
        f"Symptoms: {record.chief_complaint} | History: {record.history}"
        f" | Tongue: {record.tongue}\nPrescription:"
    )

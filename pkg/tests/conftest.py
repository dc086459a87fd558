"""Shared fixtures and deterministic hypothesis settings."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from herbrx.corpus import Corpus, SynthSpec, generate_synthetic
from herbrx.prescription import ClinicalRecord, Prescription

settings.register_profile(
    "suite",
    max_examples=100,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def make_record(cc: str, pairs, history: str = "none", tongue: str = "pale") -> ClinicalRecord:
    return ClinicalRecord(
        chief_complaint=cc,
        history=history,
        tongue=tongue,
        prescription=Prescription.from_pairs(pairs),
    )


@pytest.fixture(scope="session")
def small_corpus() -> Corpus:
    """A 60-record synthetic corpus used across module tests."""
    corpus, _ = generate_synthetic(SynthSpec(n_records=60, seed=13))
    return corpus


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

"""Shared fixtures and the acceptance report printed at the end of a run."""
from __future__ import annotations

import zlib

import numpy as np
import pytest

from dischargepred.cohort import build_cohort
from dischargepred.features import build_vocabulary, encode_timelines
from dischargepred.synthgen import SynthConfig, generate_dataset, lab_reference_ranges

_ACCEPTANCE: dict = {}


class AcceptanceLog:
    """Collects one verdict per acceptance criterion."""

    def record(self, criterion: int, passed: bool, detail: str = ""):
        _ACCEPTANCE[criterion] = (bool(passed), detail)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"ACCEPTANCE {k}: {'PASS' if ok else 'FAIL'}  {detail}")


class SmallWorld:
    """A small generated dataset taken through cohort, vocabulary and timelines."""

    def __init__(self, n_patients=300, seed=11):
        self.config = SynthConfig(n_patients=n_patients, seed=seed)
        self.patients, self.events, self.truth = generate_dataset(self.config)
        self.lab_ranges = lab_reference_ranges(self.config)
        self.encounters, self.dataset = build_cohort(self.events, "2017-01-01", seed)
        train_p = sorted({e.patient_id for e in self.dataset.train})
        tev = self.events[self.events["patient_id"].isin(train_p) & (self.events["timestamp"] < self.dataset.cutoff)]
        self.vocab = build_vocabulary(tev, 10, self.lab_ranges,
                                      self.patients[self.patients["patient_id"].isin(train_p)])
        self.timelines = encode_timelines(self.events, self.patients, self.encounters, self.lab_ranges, self.vocab)


@pytest.fixture(scope="session")
def small_world():
    return SmallWorld()


@pytest.fixture
def rng(request):
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))

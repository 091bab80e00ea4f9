"""Shared fixtures: the bundled ontology, small corpora, window builders."""

from __future__ import annotations

import numpy as np
import pytest

from tnli.cohort import (
    DIAGNOSIS_STAGE,
    LAB_OBSERVATION,
    MEDICATION_START,
    MEDICATION_STOP,
    ClinicalEvent,
    CohortConfig,
    generate_cohort,
)
from tnli.ontology import load_seed_ontology
from tnli.supervision import Window


@pytest.fixture(scope="session")
def ont():
    return load_seed_ontology()


@pytest.fixture(scope="session")
def small_corpus(ont):
    return generate_cohort(CohortConfig(n_patients=60, seed=3), ont)


@pytest.fixture(scope="session")
def medium_corpus(ont):
    return generate_cohort(CohortConfig(n_patients=200, seed=7), ont)


def ev_stage(t: float, stage: str) -> ClinicalEvent:
    return ClinicalEvent(time=t, kind=DIAGNOSIS_STAGE, stage=stage)


def ev_lab(t: float, lab_id: str, value: float) -> ClinicalEvent:
    return ClinicalEvent(time=t, kind=LAB_OBSERVATION, lab=(lab_id, value))


def ev_med_start(t: float, med: str) -> ClinicalEvent:
    return ClinicalEvent(time=t, kind=MEDICATION_START, medication=med)


def ev_med_stop(t: float, med: str) -> ClinicalEvent:
    return ClinicalEvent(time=t, kind=MEDICATION_STOP, medication=med)


def window(t_start: float, t_end: float, events, patient_id: str = "p0") -> Window:
    return Window(
        patient_id=patient_id, t_start=t_start, t_end=t_end, events=tuple(events)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

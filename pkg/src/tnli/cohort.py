"""Deterministic synthetic cohort generation and corpus I/O.

Each patient timeline follows one of four archetypes so that every weak
label class has support in any moderately sized corpus:

* ``progressive``   -- one condition worsening monotonically over time;
* ``recovering``    -- a stage regression, a lab returning to its normal
  band, or a medication course ending in a resolution stage;
* ``stable``        -- one condition held at a fixed stage;
* ``orthogonal-mixed`` -- two bursts of activity in unrelated organ
  systems, temporally separated.

Per-patient randomness is derived solely from ``(seed, patient index)``,
so generation is a pure function of the config and can be sharded freely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusError
from .ontology import Ontology, lab_band
from .seeding import child_rng

DIAGNOSIS_STAGE = "diagnosis-stage"
LAB_OBSERVATION = "lab-observation"
MEDICATION_START = "medication-start"
MEDICATION_STOP = "medication-stop"

EVENT_KINDS = (DIAGNOSIS_STAGE, LAB_OBSERVATION, MEDICATION_START, MEDICATION_STOP)

ARCHETYPES = ("progressive", "recovering", "stable", "orthogonal-mixed")

# Medication ids are free strings, keyed by condition in the generator only.
_MEDICATIONS = {"sepsis": "antibiotic", "heart-failure": "diuretic"}


@dataclass(frozen=True)
class ClinicalEvent:
    """One timestamped event; exactly the field implied by ``kind`` is set."""

    time: float
    kind: str
    stage: str | None = None
    lab: tuple[str, float] | None = None
    medication: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise CorpusError(f"unknown event kind: {self.kind!r}")
        if not (np.isfinite(self.time) and self.time >= 0):
            raise CorpusError(f"event time must be finite and >= 0, got {self.time!r}")
        want_stage = self.kind == DIAGNOSIS_STAGE
        want_lab = self.kind == LAB_OBSERVATION
        want_med = self.kind in (MEDICATION_START, MEDICATION_STOP)
        if want_stage != (self.stage is not None):
            raise CorpusError(f"{self.kind} event must set stage and nothing else")
        if want_lab != (self.lab is not None):
            raise CorpusError(f"{self.kind} event must set lab and nothing else")
        if want_med != (self.medication is not None):
            raise CorpusError(f"{self.kind} event must set medication and nothing else")

    def to_record(self) -> dict:
        rec: dict = {"time": self.time, "kind": self.kind}
        if self.stage is not None:
            rec["stage"] = self.stage
        if self.lab is not None:
            rec["lab"] = {"id": self.lab[0], "value": self.lab[1]}
        if self.medication is not None:
            rec["medication"] = self.medication
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ClinicalEvent":
        lab = rec.get("lab")
        return cls(
            time=float(rec["time"]),
            kind=rec["kind"],
            stage=rec.get("stage"),
            lab=(lab["id"], float(lab["value"])) if lab is not None else None,
            medication=rec.get("medication"),
        )


@dataclass(frozen=True)
class PatientTimeline:
    patient_id: str
    events: tuple[ClinicalEvent, ...]

    def __post_init__(self) -> None:
        times = [e.time for e in self.events]
        for a, b in zip(times, times[1:]):
            if not a < b:
                raise CorpusError(
                    f"patient {self.patient_id!r}: event times must be strictly "
                    f"increasing ({a} then {b})"
                )


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int
    seed: int
    archetype_mix: dict[str, float] = field(
        default_factory=lambda: {a: 0.25 for a in ARCHETYPES}
    )
    events_min: int = 5
    events_max: int = 12
    horizon_days: float = 60.0

    def __post_init__(self) -> None:
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        unknown = set(self.archetype_mix) - set(ARCHETYPES)
        if unknown:
            raise ConfigError(f"unknown archetypes in mix: {sorted(unknown)}")
        if any(p < 0 for p in self.archetype_mix.values()):
            raise ConfigError("archetype proportions must be non-negative")
        if abs(sum(self.archetype_mix.values()) - 1.0) > 1e-9:
            raise ConfigError("archetype proportions must sum to 1")
        if not 0 < self.events_min <= self.events_max:
            raise ConfigError("need 0 < events_min <= events_max")
        if self.events_max < 2:
            raise ConfigError("events_max < 2 cannot realize any archetype")
        if self.horizon_days <= 0:
            raise ConfigError("horizon_days must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        missing = {"n_patients", "seed"} - set(d)
        if missing:
            raise ConfigError(f"cohort config needs {sorted(missing)}")
        return cls(
            n_patients=int(d["n_patients"]),
            seed=int(d["seed"]),
            archetype_mix=dict(d.get("archetype_mix", {a: 0.25 for a in ARCHETYPES})),
            events_min=int(d.get("events_min", 5)),
            events_max=int(d.get("events_max", 12)),
            horizon_days=float(d.get("horizon_days", 60.0)),
        )

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "seed": self.seed,
            "archetype_mix": dict(self.archetype_mix),
            "events_min": self.events_min,
            "events_max": self.events_max,
            "horizon_days": self.horizon_days,
        }


# ---------------------------------------------------------------------------
# Generation


def _event_times(rng: np.random.Generator, n: int, lo: float, hi: float) -> list[float]:
    """n strictly increasing times in [lo, hi)."""
    times = np.sort(rng.uniform(lo, hi, size=n))
    # Ties have probability zero but would violate the timeline invariant.
    for i in range(1, n):
        if times[i] <= times[i - 1]:
            times[i] = np.nextafter(times[i - 1], np.inf)
    return [float(t) for t in times]


def _staged_conditions(ont: Ontology, min_stages: int) -> list[str]:
    return sorted(
        cid for cid, c in ont.conditions.items() if len(c.stages) >= min_stages
    )


def _band_interval(lab, band: int) -> tuple[float, float]:
    edges = lab.quantile_edges
    lo = edges[band - 1] if band > 0 else edges[0] - (edges[1] - edges[0])
    hi = edges[band] if band < len(edges) else edges[-1] + (edges[-1] - edges[-2])
    return lo, hi


def _lab_value_in_band(rng: np.random.Generator, lab, band: int) -> float:
    lo, hi = _band_interval(lab, band)
    return float(rng.uniform(lo, hi))


def _stage_band(lab, stage_rank: int, n_stages: int) -> int:
    """Map a severity rank onto a lab band: rank 1 -> normal end."""
    frac = (stage_rank - 1) / max(n_stages - 1, 1)
    if lab.direction == "higher-healthier":
        band = round(lab.normal_band - frac * lab.normal_band)
    else:
        band = round(lab.normal_band + frac * (lab.n_bands - 1 - lab.normal_band))
    return int(np.clip(band, 0, lab.n_bands - 1))


def _progressive_events(
    rng: np.random.Generator, ont: Ontology, times: list[float]
) -> list[ClinicalEvent]:
    cid = str(rng.choice(_staged_conditions(ont, 3) or _staged_conditions(ont, 2)))
    cond = ont.condition(cid)
    n_stages = len(cond.stages)
    start = int(rng.integers(1, max(n_stages - 1, 1) + 1))
    end = int(rng.integers(start + 1, n_stages + 1))
    labs = ont.labs_of_condition(cid)
    events: list[ClinicalEvent] = []
    n = len(times)
    for i, t in enumerate(times):
        rank = start + round((end - start) * i / max(n - 1, 1))
        if labs and rng.uniform() < 0.4:
            lab = labs[0]
            band = _stage_band(lab, rank, n_stages)
            events.append(
                ClinicalEvent(t, LAB_OBSERVATION, lab=(lab.id, _lab_value_in_band(rng, lab, band)))
            )
        else:
            events.append(ClinicalEvent(t, DIAGNOSIS_STAGE, stage=cond.stages[rank - 1]))
    return events


def _recovering_events(
    rng: np.random.Generator, ont: Ontology, times: list[float]
) -> list[ClinicalEvent]:
    resolving = sorted(
        {ont.stages[sid].condition for sid in ont.stages if ont.stages[sid].resolves}
    )
    n = len(times)
    patterns = ["stage-regression"]
    if any(ont.labs_of_condition(c) for c in ont.conditions):
        patterns.append("lab-normalization")
    if resolving and n >= 4:  # needs slots for active, start, resolved, stop
        patterns.append("med-resolution")
    pattern = str(rng.choice(patterns))
    events: list[ClinicalEvent] = []

    if pattern == "med-resolution":
        cid = str(rng.choice(resolving))
        cond = ont.condition(cid)
        active = next(s for s in reversed(cond.stages) if not ont.stages[s].resolves)
        resolved = next(s for s in cond.stages if ont.stages[s].resolves)
        med = _MEDICATIONS.get(cid, f"{cid}-med")
        # compress the arc so start-to-stop fits inside a month
        span = times[-1] - times[0]
        if span > 24.0:
            times = [times[0] + (t - times[0]) * 24.0 / span for t in times]
        for i, t in enumerate(times):
            if i == 0:
                events.append(ClinicalEvent(t, DIAGNOSIS_STAGE, stage=active))
            elif i == 1:
                events.append(ClinicalEvent(t, MEDICATION_START, medication=med))
            elif i == n - 1:
                events.append(ClinicalEvent(t, MEDICATION_STOP, medication=med))
            elif i == n - 2:
                events.append(ClinicalEvent(t, DIAGNOSIS_STAGE, stage=resolved))
            else:
                events.append(ClinicalEvent(t, DIAGNOSIS_STAGE, stage=active))
        return events

    if pattern == "lab-normalization":
        with_labs = sorted(c for c in ont.conditions if ont.labs_of_condition(c))
        cid = str(rng.choice(with_labs))
        cond = ont.condition(cid)
        lab = ont.labs_of_condition(cid)[0]
        sick_rank = len(cond.stages)
        sick_band = _stage_band(lab, sick_rank, len(cond.stages))
        for i, t in enumerate(times):
            if i == 0:
                events.append(
                    ClinicalEvent(t, DIAGNOSIS_STAGE, stage=cond.stages[sick_rank - 1])
                )
            elif i >= n - max(1, n // 3):
                value = _lab_value_in_band(rng, lab, lab.normal_band)
                events.append(ClinicalEvent(t, LAB_OBSERVATION, lab=(lab.id, value)))
            else:
                value = _lab_value_in_band(rng, lab, sick_band)
                events.append(ClinicalEvent(t, LAB_OBSERVATION, lab=(lab.id, value)))
        return events

    cid = str(rng.choice(_staged_conditions(ont, 2)))
    cond = ont.condition(cid)
    n_stages = len(cond.stages)
    start = int(rng.integers(2, n_stages + 1))
    end = int(rng.integers(1, start))
    for i, t in enumerate(times):
        rank = start + round((end - start) * i / max(n - 1, 1))
        events.append(ClinicalEvent(t, DIAGNOSIS_STAGE, stage=cond.stages[rank - 1]))
    return events


def _stable_events(
    rng: np.random.Generator, ont: Ontology, times: list[float]
) -> list[ClinicalEvent]:
    cid = str(rng.choice(sorted(ont.conditions)))
    cond = ont.condition(cid)
    rank = int(rng.integers(1, len(cond.stages) + 1))
    labs = ont.labs_of_condition(cid)
    events = []
    for t in times:
        if labs and rng.uniform() < 0.3:
            lab = labs[0]
            band = _stage_band(lab, rank, len(cond.stages))
            events.append(
                ClinicalEvent(t, LAB_OBSERVATION, lab=(lab.id, _lab_value_in_band(rng, lab, band)))
            )
        else:
            events.append(ClinicalEvent(t, DIAGNOSIS_STAGE, stage=cond.stages[rank - 1]))
    return events


def _orthogonal_events(
    rng: np.random.Generator, ont: Ontology, times: list[float], horizon: float
) -> list[ClinicalEvent]:
    by_system: dict[str, list[str]] = {}
    for cid in sorted(ont.conditions):
        by_system.setdefault(ont.system_of_condition(cid), []).append(cid)
    systems = sorted(by_system)
    if len(systems) < 2:
        raise ConfigError("orthogonal-mixed archetype needs at least two organ systems")
    sys_a, sys_b = rng.choice(systems, size=2, replace=False)
    cond_a = ont.condition(str(rng.choice(by_system[str(sys_a)])))
    cond_b = ont.condition(str(rng.choice(by_system[str(sys_b)])))
    rank_a = int(rng.integers(1, len(cond_a.stages) + 1))
    rank_b = int(rng.integers(1, len(cond_b.stages) + 1))
    n = len(times)
    n_a = max(1, n // 2)
    # Re-time the two bursts into disjoint early/late spans so window
    # segmentation downstream sees disjoint organ-system sets.
    early = _event_times(rng, n_a, 0.0, 0.4 * horizon)
    late = _event_times(rng, n - n_a, 0.6 * horizon, horizon)
    events = [
        ClinicalEvent(t, DIAGNOSIS_STAGE, stage=cond_a.stages[rank_a - 1]) for t in early
    ]
    events += [
        ClinicalEvent(t, DIAGNOSIS_STAGE, stage=cond_b.stages[rank_b - 1]) for t in late
    ]
    return events


def generate_patient(cfg: CohortConfig, ont: Ontology, index: int) -> PatientTimeline:
    """Generate timeline ``index``; depends only on (cfg.seed, index)."""
    rng = child_rng(cfg.seed, "patient", index)
    names = sorted(cfg.archetype_mix)
    probs = np.array([cfg.archetype_mix[a] for a in names])
    archetype = str(rng.choice(names, p=probs / probs.sum()))
    n_events = int(rng.integers(cfg.events_min, cfg.events_max + 1))
    n_events = max(n_events, 2)
    times = _event_times(rng, n_events, 0.0, cfg.horizon_days)
    if archetype == "progressive":
        events = _progressive_events(rng, ont, times)
    elif archetype == "recovering":
        events = _recovering_events(rng, ont, times)
    elif archetype == "stable":
        events = _stable_events(rng, ont, times)
    else:
        events = _orthogonal_events(rng, ont, times, cfg.horizon_days)
    events.sort(key=lambda e: e.time)
    return PatientTimeline(patient_id=f"p{index:06d}", events=tuple(events))


def generate_cohort(cfg: CohortConfig, ont: Ontology) -> list[PatientTimeline]:
    """Generate the full cohort; a pure function of ``(cfg, ont)``."""
    if not ont.conditions:
        raise ConfigError("ontology has no conditions; nothing to generate")
    return [generate_patient(cfg, ont, i) for i in range(cfg.n_patients)]


def validate_against_ontology(tl: PatientTimeline, ont: Ontology) -> None:
    """Check that all stage and lab references resolve. Medication ids are
    free strings and are not ontology-checked."""
    for e in tl.events:
        if e.stage is not None:
            ont.stage(e.stage)
        if e.lab is not None:
            lab = ont.lab(e.lab[0])
            lab_band(lab, e.lab[1])


# ---------------------------------------------------------------------------
# Corpus I/O: one JSON record per line, one patient per record.


def write_corpus(timelines: list[PatientTimeline], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for tl in timelines:
            rec = {
                "patient_id": tl.patient_id,
                "events": [e.to_record() for e in tl.events],
            }
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_corpus(path: str | Path) -> list[PatientTimeline]:
    path = Path(path)
    timelines: list[PatientTimeline] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record: {exc}") from None
            try:
                events = tuple(ClinicalEvent.from_record(r) for r in rec["events"])
                timelines.append(
                    PatientTimeline(patient_id=rec["patient_id"], events=events)
                )
            except (KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: missing field: {exc}") from None
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return timelines

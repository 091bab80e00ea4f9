"""Clinical staging ontology: organ systems, staged conditions, banded labs.

The ontology is the single source of truth for both synthetic timeline
generation and weak entailment labeling. It is loaded from a line-oriented
sectioned text file (see ``parse_ontology``) and is immutable afterwards,
so it can be shared freely across threads.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import OntologyError

HIGHER_HEALTHIER = "higher-healthier"
HIGHER_SICKER = "higher-sicker"


@dataclass(frozen=True)
class OrganSystem:
    id: str
    display_name: str


@dataclass(frozen=True)
class Condition:
    id: str
    organ_system: str
    stages: tuple[str, ...] = ()  # stage ids ordered by increasing severity rank


@dataclass(frozen=True)
class Stage:
    id: str
    condition: str
    rank: int  # 1 = least severe; contiguous within a condition
    display_phrase: str
    resolves: bool = False  # marks a stage that denotes the condition has resolved


@dataclass(frozen=True)
class LabDefinition:
    """A lab indexed into bands by ascending threshold edges.

    ``n`` edges define ``n + 1`` bands; a value equal to an edge belongs to
    the upper band. ``direction`` states whether higher raw values mean
    healthier or sicker.
    """

    id: str
    condition: str
    quantile_edges: tuple[float, ...]
    direction: str
    normal_band: int

    @property
    def n_bands(self) -> int:
        return len(self.quantile_edges) + 1

    def sicker_band_step(self) -> int:
        """Band-index increment that moves one band toward the sick end."""
        return -1 if self.direction == HIGHER_HEALTHIER else 1


@dataclass(frozen=True)
class Ontology:
    version: str
    organ_systems: dict[str, OrganSystem]
    conditions: dict[str, Condition]
    stages: dict[str, Stage]
    labs: dict[str, LabDefinition]

    def stage(self, stage_id: str) -> Stage:
        try:
            return self.stages[stage_id]
        except KeyError:
            raise OntologyError(f"unknown stage id: {stage_id!r}") from None

    def condition(self, condition_id: str) -> Condition:
        try:
            return self.conditions[condition_id]
        except KeyError:
            raise OntologyError(f"unknown condition id: {condition_id!r}") from None

    def lab(self, lab_id: str) -> LabDefinition:
        try:
            return self.labs[lab_id]
        except KeyError:
            raise OntologyError(f"unknown lab id: {lab_id!r}") from None

    def system_of_condition(self, condition_id: str) -> str:
        return self.condition(condition_id).organ_system

    def system_of_stage(self, stage_id: str) -> str:
        return self.system_of_condition(self.stage(stage_id).condition)

    def system_of_lab(self, lab_id: str) -> str:
        return self.system_of_condition(self.lab(lab_id).condition)

    def labs_of_condition(self, condition_id: str) -> list[LabDefinition]:
        return [lab for lab in self.labs.values() if lab.condition == condition_id]


# ---------------------------------------------------------------------------
# Parsing


_SECTIONS = ("system", "condition", "stage", "lab")

_BOOL_WORDS = {"true": True, "false": False}


@dataclass
class _RawSection:
    kind: str
    line: int
    entries: dict[str, str] = field(default_factory=dict)


def _parse_sections(text: str) -> tuple[dict[str, str], list[_RawSection]]:
    """Split the file into a preamble key/value map and raw sections."""
    preamble: dict[str, str] = {}
    sections: list[_RawSection] = []
    current: _RawSection | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            kind = line[1:-1].strip()
            if kind not in _SECTIONS:
                raise OntologyError(f"line {lineno}: unknown section [{kind}]")
            current = _RawSection(kind=kind, line=lineno)
            sections.append(current)
            continue
        if "=" not in line:
            raise OntologyError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise OntologyError(f"line {lineno}: empty key")
        target = preamble if current is None else current.entries
        if key in target:
            raise OntologyError(f"line {lineno}: duplicate key {key!r}")
        target[key] = value
    return preamble, sections


def _require(section: _RawSection, key: str) -> str:
    if key not in section.entries:
        raise OntologyError(
            f"line {section.line}: [{section.kind}] section missing key {key!r}"
        )
    return section.entries[key]


def parse_ontology(text: str) -> Ontology:
    """Parse and validate the sectioned ontology text format.

    Sections ``[system]``, ``[condition]``, ``[stage]``, ``[lab]`` each
    declare one entity via ``key = value`` lines; ``#`` starts a comment
    line. Raises :class:`OntologyError` with a line number on parse
    failures and with the offending id on validation failures.
    """
    preamble, sections = _parse_sections(text)
    if not sections:
        raise OntologyError("no sections found: file is empty or not an ontology file")
    version = preamble.get("version", "unversioned")

    systems: dict[str, OrganSystem] = {}
    conditions: dict[str, Condition] = {}
    stages: dict[str, Stage] = {}
    labs: dict[str, LabDefinition] = {}

    for sec in sections:
        sid = _require(sec, "id")
        if sec.kind == "system":
            if sid in systems:
                raise OntologyError(f"duplicate system id: {sid!r}")
            systems[sid] = OrganSystem(id=sid, display_name=_require(sec, "name"))
        elif sec.kind == "condition":
            if sid in conditions:
                raise OntologyError(f"duplicate condition id: {sid!r}")
            conditions[sid] = Condition(id=sid, organ_system=_require(sec, "system"))
        elif sec.kind == "stage":
            if sid in stages:
                raise OntologyError(f"duplicate stage id: {sid!r}")
            try:
                rank = int(_require(sec, "rank"))
            except ValueError:
                raise OntologyError(
                    f"line {sec.line}: stage {sid!r} has non-integer rank"
                ) from None
            resolves_word = sec.entries.get("resolves", "false").lower()
            if resolves_word not in _BOOL_WORDS:
                raise OntologyError(
                    f"line {sec.line}: stage {sid!r} has invalid resolves flag"
                )
            stages[sid] = Stage(
                id=sid,
                condition=_require(sec, "condition"),
                rank=rank,
                display_phrase=_require(sec, "phrase"),
                resolves=_BOOL_WORDS[resolves_word],
            )
        else:  # lab
            if sid in labs:
                raise OntologyError(f"duplicate lab id: {sid!r}")
            try:
                edges = tuple(float(tok) for tok in _require(sec, "edges").split())
            except ValueError:
                raise OntologyError(
                    f"line {sec.line}: lab {sid!r} has non-numeric edges"
                ) from None
            direction = _require(sec, "direction")
            if direction not in (HIGHER_HEALTHIER, HIGHER_SICKER):
                raise OntologyError(
                    f"lab {sid!r}: direction must be "
                    f"{HIGHER_HEALTHIER!r} or {HIGHER_SICKER!r}"
                )
            try:
                normal_band = int(_require(sec, "normal_band"))
            except ValueError:
                raise OntologyError(
                    f"line {sec.line}: lab {sid!r} has non-integer normal_band"
                ) from None
            labs[sid] = LabDefinition(
                id=sid,
                condition=_require(sec, "condition"),
                quantile_edges=edges,
                direction=direction,
                normal_band=normal_band,
            )

    ont = Ontology(
        version=version,
        organ_systems=systems,
        conditions=conditions,
        stages=stages,
        labs=labs,
    )
    return _validate(ont)


def _validate(ont: Ontology) -> Ontology:
    for cond in ont.conditions.values():
        if cond.organ_system not in ont.organ_systems:
            raise OntologyError(
                f"condition {cond.id!r} references unknown system {cond.organ_system!r}"
            )
    by_condition: dict[str, list[Stage]] = {cid: [] for cid in ont.conditions}
    for stage in ont.stages.values():
        if stage.condition not in ont.conditions:
            raise OntologyError(
                f"stage {stage.id!r} references unknown condition {stage.condition!r}"
            )
        by_condition[stage.condition].append(stage)
    rebuilt: dict[str, Condition] = {}
    for cid, cond_stages in by_condition.items():
        if not cond_stages:
            raise OntologyError(f"condition {cid!r} has no stages")
        cond_stages.sort(key=lambda s: s.rank)
        ranks = [s.rank for s in cond_stages]
        if ranks != list(range(1, len(ranks) + 1)):
            raise OntologyError(
                f"condition {cid!r}: stage ranks {ranks} are not contiguous from 1"
            )
        rebuilt[cid] = Condition(
            id=cid,
            organ_system=ont.conditions[cid].organ_system,
            stages=tuple(s.id for s in cond_stages),
        )
    for lab in ont.labs.values():
        if lab.condition not in ont.conditions:
            raise OntologyError(
                f"lab {lab.id!r} references unknown condition {lab.condition!r}"
            )
        if len(lab.quantile_edges) == 0:
            raise OntologyError(f"lab {lab.id!r} has no band edges")
        if any(
            a >= b for a, b in zip(lab.quantile_edges, lab.quantile_edges[1:])
        ):
            raise OntologyError(f"lab {lab.id!r}: edges must be strictly ascending")
        if not 0 <= lab.normal_band < lab.n_bands:
            raise OntologyError(
                f"lab {lab.id!r}: normal_band {lab.normal_band} outside 0..{lab.n_bands - 1}"
            )
    return Ontology(
        version=ont.version,
        organ_systems=ont.organ_systems,
        conditions=rebuilt,
        stages=ont.stages,
        labs=ont.labs,
    )


def load_ontology(path: str | Path) -> Ontology:
    """Load and validate an ontology file from disk."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_ontology(text)


def seed_ontology_text() -> str:
    """Return the bundled seed ontology file contents."""
    return resources.files("tnli.data").joinpath("seed_ontology.txt").read_text("utf-8")


def load_seed_ontology() -> Ontology:
    """Load the ontology bundled with the package."""
    return parse_ontology(seed_ontology_text())


# ---------------------------------------------------------------------------
# Queries used by labeling


def stage_delta(a: str, b: str, ont: Ontology) -> int | None:
    """Severity rank change from stage ``a`` to stage ``b``.

    Returns ``rank(b) - rank(a)`` when both stages belong to the same
    condition, and ``None`` when they belong to different conditions.
    Unknown ids raise :class:`OntologyError`.
    """
    sa = ont.stage(a)
    sb = ont.stage(b)
    if sa.condition != sb.condition:
        return None
    return sb.rank - sa.rank


def lab_band(lab: LabDefinition, value: float) -> int:
    """Band index containing ``value``; on-edge values go to the upper band."""
    if not math.isfinite(value):
        raise ValueError(f"lab {lab.id!r}: value must be finite, got {value!r}")
    return bisect_right(lab.quantile_edges, value)

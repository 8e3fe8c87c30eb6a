"""Object classes, relation predicates and label sets.

The ontology is loaded from a small JSON document. The shipped default lives
next to this module as ``ontology.default.json``; the tool/anatomy partition is
a field of that file so it can be corrected without touching code.

Config schema::

    {
      "version": 1,
      "classes":    [{"name": str, "kind": "tool" | "anatomy"}, ...],   # 29
      "predicates": [{"name": str, "category": "semantic" | "geometric"}, ...],
      "phases":     [str, ...],                                         # 19
      "techniques": [str, str]
    }

Class and predicate ids are list positions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Union

from .errors import SchemaError, UnknownClass

CLASS_NAMES = (
    "Pupil", "Surgical Tape", "Hand", "Eye Retractors", "Iris", "Skin", "Cornea",
    "Hydrodissection Cannula", "Viscoelastic Cannula", "Capsulorhexis Cystotome",
    "Rycroft Cannula", "Bonn Forceps", "Primary Knife",
    "Phacoemulsification Handpiece", "Lens Injector",
    "Irrigation/Aspiration Handpiece", "Secondary Knife", "Micromanipulator",
    "Capsulorhexis Forceps", "Suture Needle", "Needle Holder", "Charleux Cannula",
    "Vitrectomy Handpiece", "Mendez Ring", "Marker", "Troutman Forceps", "Cotton",
    "Iris Hooks", "Vannas Scissors",
)
SEMANTIC_PREDICATES = (
    "Holding", "Activation", "Pushing", "Pulling", "Cutting", "Inserting", "Retracting",
)
GEOMETRIC_PREDICATE = "close_to"
NONE_LABEL = "none"
TECHNIQUES = ("Stop and Chop", "Divide and Conquer")
N_PHASES = 19

DEFAULT_CONFIG = "ontology.default.json"


class Kind(str, Enum):
    TOOL = "tool"
    ANATOMY = "anatomy"


class Category(str, Enum):
    SEMANTIC = "semantic"
    GEOMETRIC = "geometric"


@dataclass(frozen=True)
class ObjectClass:
    id: int
    name: str
    kind: Kind


@dataclass(frozen=True)
class Predicate:
    id: int
    name: str
    category: Category


@dataclass(frozen=True)
class LabelSets:
    phases: tuple[str, ...]
    techniques: tuple[str, ...]


ClassRef = Union[ObjectClass, int, str]


@dataclass(frozen=True)
class Ontology:
    classes: tuple[ObjectClass, ...]
    predicates: tuple[Predicate, ...]
    labels: LabelSets

    # lookups -------------------------------------------------------------

    @cached_property
    def _by_name(self) -> dict[str, ObjectClass]:
        return {c.name: c for c in self.classes}

    @cached_property
    def _pred_by_name(self) -> dict[str, Predicate]:
        return {p.name: p for p in self.predicates}

    def object_class(self, ref: ClassRef) -> ObjectClass:
        if isinstance(ref, ObjectClass):
            if ref.id < len(self.classes) and self.classes[ref.id] == ref:
                return ref
            raise UnknownClass(ref.name)
        if isinstance(ref, str):
            try:
                return self._by_name[ref]
            except KeyError:
                raise UnknownClass(ref) from None
        if isinstance(ref, (int,)) and 0 <= ref < len(self.classes):
            return self.classes[ref]
        raise UnknownClass(ref)

    def class_id(self, ref: ClassRef) -> int:
        return self.object_class(ref).id

    def class_name(self, ref: ClassRef) -> str:
        return self.object_class(ref).name

    def is_tool(self, ref: ClassRef) -> bool:
        return self.object_class(ref).kind is Kind.TOOL

    def is_anatomy(self, ref: ClassRef) -> bool:
        return self.object_class(ref).kind is Kind.ANATOMY

    def predicate(self, ref: int | str) -> Predicate:
        if isinstance(ref, str):
            try:
                return self._pred_by_name[ref]
            except KeyError:
                raise SchemaError(f"unknown predicate {ref!r}") from None
        if 0 <= ref < len(self.predicates):
            return self.predicates[ref]
        raise SchemaError(f"unknown predicate id {ref}")

    # derived index sets --------------------------------------------------

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @cached_property
    def tool_ids(self) -> frozenset[int]:
        return frozenset(c.id for c in self.classes if c.kind is Kind.TOOL)

    @cached_property
    def anatomy_ids(self) -> frozenset[int]:
        return frozenset(c.id for c in self.classes if c.kind is Kind.ANATOMY)

    @cached_property
    def semantic_predicates(self) -> tuple[Predicate, ...]:
        """Semantic predicates in classifier output order."""
        return tuple(p for p in self.predicates if p.category is Category.SEMANTIC)

    @cached_property
    def semantic_ids(self) -> frozenset[int]:
        return frozenset(p.id for p in self.semantic_predicates)

    @cached_property
    def close_to(self) -> Predicate:
        return self._pred_by_name[GEOMETRIC_PREDICATE]

    @property
    def phases(self) -> tuple[str, ...]:
        return self.labels.phases

    @property
    def techniques(self) -> tuple[str, ...]:
        return self.labels.techniques

    def phase_id(self, name: str) -> int:
        try:
            return self.labels.phases.index(name)
        except ValueError:
            raise SchemaError(f"unknown phase {name!r}") from None

    def eval_class_names(self) -> list[str]:
        """Column order of relation reports: close_to, the semantic predicates, none."""
        return [GEOMETRIC_PREDICATE] + [p.name for p in self.semantic_predicates] + [NONE_LABEL]

    # identity ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "classes": [{"name": c.name, "kind": c.kind.value} for c in self.classes],
            "predicates": [{"name": p.name, "category": p.category.value} for p in self.predicates],
            "phases": list(self.labels.phases),
            "techniques": list(self.labels.techniques),
        }

    @cached_property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaError(msg)


def ontology_from_dict(doc: dict) -> Ontology:
    _require(isinstance(doc, dict), "ontology config must be a mapping")
    for key in ("classes", "predicates", "phases", "techniques"):
        _require(key in doc, f"missing field {key!r}")

    raw_classes = doc["classes"]
    _require(len(raw_classes) == len(CLASS_NAMES),
             f"expected {len(CLASS_NAMES)} classes, got {len(raw_classes)}")
    classes = []
    for i, entry in enumerate(raw_classes):
        try:
            name, kind = entry["name"], Kind(entry["kind"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"class entry {i} malformed: {entry!r}") from exc
        _require(name in CLASS_NAMES, f"unknown class {name!r}")
        classes.append(ObjectClass(i, name, kind))
    names = [c.name for c in classes]
    dup = {n for n in names if names.count(n) > 1}
    _require(not dup, f"duplicate classes: {sorted(dup)}")

    predicates = []
    for i, entry in enumerate(doc["predicates"]):
        try:
            predicates.append(Predicate(i, entry["name"], Category(entry["category"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"predicate entry {i} malformed: {entry!r}") from exc
    sem = sorted(p.name for p in predicates if p.category is Category.SEMANTIC)
    geo = [p.name for p in predicates if p.category is Category.GEOMETRIC]
    _require(sem == sorted(SEMANTIC_PREDICATES),
             f"semantic predicates must be exactly {SEMANTIC_PREDICATES}, got {sem}")
    _require(geo == [GEOMETRIC_PREDICATE], f"expected one geometric predicate 'close_to', got {geo}")

    phases = tuple(doc["phases"])
    _require(len(phases) == N_PHASES, f"expected {N_PHASES} phases, got {len(phases)}")
    _require(len(set(phases)) == len(phases), "duplicate phase names")
    techniques = tuple(doc["techniques"])
    _require(sorted(techniques) == sorted(TECHNIQUES),
             f"techniques must be {TECHNIQUES}, got {techniques}")

    return Ontology(tuple(classes), tuple(predicates), LabelSets(phases, techniques))


def load_ontology(config_path: str | Path | None = None) -> Ontology:
    """Load and validate an ontology config; ``None`` loads the shipped default.

    Raises SchemaError on count/uniqueness/name violations and OSError when the
    file cannot be read.
    """
    if config_path is None:
        text = resources.files(__package__).joinpath(DEFAULT_CONFIG).read_text()
    else:
        text = Path(config_path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"ontology config is not valid JSON: {exc}") from exc
    return ontology_from_dict(doc)


_DEFAULT: Ontology | None = None


def default_ontology() -> Ontology:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_ontology()
    return _DEFAULT

"""Per-class, micro and macro F1 for relation sets and single-label classification.

F1 is 2TP / (2TP + FP + FN). A class with no ground truth and no predictions
has undefined F1 and is left out of the macro average; a class with ground
truth but no predictions scores 0.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import AlignmentError, LengthMismatch
from .ontology import NONE_LABEL, Ontology, default_ontology
from .scenegraph import FrameSceneGraph


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def f1(self) -> float | None:
        denom = 2 * self.tp + self.fp + self.fn
        return None if denom == 0 else 2 * self.tp / denom

    def __iadd__(self, other: "Counts") -> "Counts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


@dataclass
class EvalReport:
    per_class_f1: dict[str, float | None]
    micro_f1: float
    macro_f1: float
    support: dict[str, int]
    accuracy: float | None = None
    excluded: list[str] = field(default_factory=list)
    counts: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "per_class_f1": self.per_class_f1,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "support": self.support,
            "excluded_from_macro": self.excluded,
        }
        if self.accuracy is not None:
            d["accuracy"] = self.accuracy
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        names = list(self.per_class_f1)
        width = max(len(n) for n in names + ["Macro F1"]) + 2
        lines = [f"{'class':<{width}}{'F1':>8}{'support':>10}"]
        for n in names:
            f1 = self.per_class_f1[n]
            cell = "   n/a" if f1 is None else f"{100 * f1:8.2f}"
            lines.append(f"{n:<{width}}{cell:>8}{self.support.get(n, 0):>10}")
        lines.append(f"{'Micro F1':<{width}}{100 * self.micro_f1:8.2f}")
        lines.append(f"{'Macro F1':<{width}}{100 * self.macro_f1:8.2f}")
        if self.accuracy is not None:
            lines.append(f"{'Accuracy':<{width}}{100 * self.accuracy:8.2f}")
        return "\n".join(lines)


def _report(names: Sequence[str], counts: dict[str, Counts], support: dict[str, int],
            accuracy: float | None = None) -> EvalReport:
    per_class = {n: counts[n].f1() for n in names}
    defined = [v for v in per_class.values() if v is not None]
    total = Counts()
    for n in names:
        total += counts[n]
    micro = total.f1()
    return EvalReport(
        per_class_f1=per_class,
        micro_f1=1.0 if micro is None else micro,
        macro_f1=sum(defined) / len(defined) if defined else 1.0,
        support={n: support.get(n, 0) for n in names},
        accuracy=accuracy,
        excluded=[n for n, v in per_class.items() if v is None],
        counts={n: (counts[n].tp, counts[n].fp, counts[n].fn) for n in names},
    )


def score_label_sets(pairs: Iterable[tuple[frozenset, frozenset]],
                     names: Sequence[str]) -> EvalReport:
    """Score aligned (predicted, ground-truth) label sets; empty sets count as ``none``."""
    counts = defaultdict(Counts)
    support: dict[str, int] = defaultdict(int)
    for pred, gt in pairs:
        pred = pred or frozenset([NONE_LABEL])
        gt = gt or frozenset([NONE_LABEL])
        for label in gt:
            support[label] += 1
        for label in pred | gt:
            if label in pred and label in gt:
                counts[label].tp += 1
            elif label in pred:
                counts[label].fp += 1
            else:
                counts[label].fn += 1
    return _report(names, counts, support)


@dataclass(frozen=True)
class PairUniverse:
    """Which entity pairs of a frame are scored.

    Semantic predicates are scored on every ordered pair with a tool subject.
    close_to is scored on those same ordered pairs and, when
    ``anatomy_pairs`` is set, once per unordered anatomy-anatomy pair.
    """

    anatomy_pairs: bool = True

    def pairs(self, frame: FrameSceneGraph, onto: Ontology) -> list[tuple[int, int]]:
        ents = sorted(frame.entities, key=lambda e: e.class_id)
        out = []
        for a in ents:
            for b in ents:
                if a.class_id == b.class_id:
                    continue
                if onto.is_tool(a.class_id):
                    out.append((a.class_id, b.class_id))
                elif self.anatomy_pairs and onto.is_anatomy(b.class_id) and a.class_id < b.class_id:
                    out.append((a.class_id, b.class_id))
        return out


def _labels_by_class_pair(frame: FrameSceneGraph, onto: Ontology) -> dict[tuple[int, int], set[str]]:
    cls = {e.instance_id: e.class_id for e in frame.entities}
    close = onto.close_to.id
    out: dict[tuple[int, int], set[str]] = defaultdict(set)
    for r in frame.relations:
        s, o = cls[r.subject], cls[r.object]
        name = onto.predicate(r.predicate).name
        out[(s, o)].add(name)
        if r.predicate == close:
            out[(o, s)].add(name)
    return out


def relation_label_pairs(pred: FrameSceneGraph, gt: FrameSceneGraph, onto: Ontology,
                         universe: PairUniverse) -> list[tuple[frozenset, frozenset]]:
    """(predicted, ground-truth) label sets for every scored pair of one frame."""
    p_labels = _labels_by_class_pair(pred, onto)
    g_labels = _labels_by_class_pair(gt, onto)
    out = []
    for s, o in universe.pairs(gt, onto):
        p = p_labels.get((s, o), set())
        g = g_labels.get((s, o), set())
        if not onto.is_tool(s):
            # anatomy-anatomy pairs carry close_to only
            p = {x for x in p if x == onto.close_to.name}
            g = {x for x in g if x == onto.close_to.name}
        out.append((frozenset(p), frozenset(g)))
    return out


def evaluate_relations(pred: Sequence[FrameSceneGraph], gt: Sequence[FrameSceneGraph],
                       ontology: Ontology | None = None,
                       universe: PairUniverse | None = None) -> EvalReport:
    """Relation F1 table with columns close_to, the semantic predicates and ``none``.

    Entities are matched across pred and gt by class, which the one instance
    per class schema makes unambiguous.
    """
    onto = ontology or default_ontology()
    universe = universe or PairUniverse()
    if len(pred) != len(gt):
        raise AlignmentError(f"{len(pred)} predicted frames vs {len(gt)} ground-truth frames")
    pairs = []
    for p, g in zip(pred, gt):
        if (p.video_id, p.frame_idx) != (g.video_id, g.frame_idx):
            raise AlignmentError(
                f"frame mismatch: ({p.video_id}, {p.frame_idx}) vs ({g.video_id}, {g.frame_idx})")
        pairs.extend(relation_label_pairs(p, g, onto, universe))
    return score_label_sets(pairs, onto.eval_class_names())


def evaluate_classification(preds: Sequence[int], gts: Sequence[int], k: int,
                            names: Sequence[str] | None = None) -> EvalReport:
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} labels")
    names = list(names) if names is not None else [str(i) for i in range(k)]
    counts = defaultdict(Counts)
    support: dict[str, int] = defaultdict(int)
    for p, g in zip(preds, gts):
        if not (0 <= p < k and 0 <= g < k):
            raise ValueError(f"label out of range 0..{k - 1}: pred={p} gt={g}")
        support[names[g]] += 1
        if p == g:
            counts[names[g]].tp += 1
        else:
            counts[names[p]].fp += 1
            counts[names[g]].fn += 1
    correct = sum(int(p == g) for p, g in zip(preds, gts))
    accuracy = correct / len(gts) if gts else 1.0
    return _report(names, counts, support, accuracy=accuracy)

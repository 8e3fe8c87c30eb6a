"""Frame scene graphs, video records, JSONL storage and text serialization.

JSONL layout: an optional header line ``{"format": "catsg-jsonl", "version": 1,
"video_id", "fps", "technique", "frame_size": [w, h] | null}`` followed by one
frame object per line with the keys

    video_id, frame_idx, time_s, phase, technique,
    entities:  [{id, class, cx, cy, area, bbox, mask_rle}],
    relations: [{sub, obj, pred}]

``mask_rle`` strings are only decodable when the frame size is known, which is
why the header carries it.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyDataset, SchemaError
from .geometry import Mask, grounding_from_mask
from .ontology import Ontology, default_ontology

FORMAT_TAG = "catsg-jsonl"
FORMAT_VERSION = 1
DEFAULT_FPS = 5.0
GROUNDING_TOL = 1e-6


@dataclass(frozen=True)
class Grounding:
    cx: float
    cy: float
    area: float
    bbox: tuple[float, float, float, float]

    def check(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise SchemaError(f"centroid out of range: ({self.cx}, {self.cy})")
        if not 0.0 <= self.area <= 1.0:
            raise SchemaError(f"area out of range: {self.area}")
        if not (x0 <= x1 and y0 <= y1):
            raise SchemaError(f"degenerate bbox {self.bbox}")

    def close_to(self, other: "Grounding", tol: float = GROUNDING_TOL) -> bool:
        a = (self.cx, self.cy, self.area, *self.bbox)
        b = (other.cx, other.cy, other.area, *other.bbox)
        return all(abs(x - y) <= tol for x, y in zip(a, b))


@dataclass(frozen=True)
class Entity:
    instance_id: int
    class_id: int
    grounding: Grounding
    mask: Mask | None = None


@dataclass(frozen=True)
class RelationInstance:
    subject: int
    object: int
    predicate: int


@dataclass(frozen=True)
class FrameSceneGraph:
    video_id: str
    frame_idx: int
    time_s: float
    entities: tuple[Entity, ...]
    relations: tuple[RelationInstance, ...]
    phase: int
    technique: int

    def entity(self, instance_id: int) -> Entity:
        for e in self.entities:
            if e.instance_id == instance_id:
                return e
        raise KeyError(instance_id)

    def by_class(self) -> dict[int, Entity]:
        return {e.class_id: e for e in self.entities}

    def semantic_relations(self, ontology: Ontology | None = None) -> list[RelationInstance]:
        sem = (ontology or default_ontology()).semantic_ids
        return [r for r in self.relations if r.predicate in sem]

    def replace(self, **changes) -> "FrameSceneGraph":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    fps: float
    frames: tuple[FrameSceneGraph, ...]
    technique: int
    frame_size: tuple[int, int] | None = None  # (width, height) of masks

    def __len__(self) -> int:
        return len(self.frames)


def validate_frame(frame: FrameSceneGraph, ontology: Ontology | None = None,
                   check_masks: bool = True) -> None:
    """Raise SchemaError on any violated frame invariant."""
    onto = ontology or default_ontology()
    ids = [e.instance_id for e in frame.entities]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"duplicate instance ids in frame {frame.frame_idx}")
    classes = [e.class_id for e in frame.entities]
    if len(set(classes)) != len(classes):
        raise SchemaError(f"frame {frame.frame_idx}: more than one instance of a class")
    by_id = {}
    for e in frame.entities:
        onto.object_class(e.class_id)
        e.grounding.check()
        if check_masks and e.mask is not None:
            recomputed = grounding_from_mask(e.mask)
            if not recomputed.close_to(e.grounding):
                raise SchemaError(
                    f"frame {frame.frame_idx}: grounding of entity {e.instance_id} "
                    "disagrees with its mask")
        by_id[e.instance_id] = e
    for r in frame.relations:
        if r.subject not in by_id or r.object not in by_id:
            raise SchemaError(
                f"frame {frame.frame_idx}: relation {r} references a missing instance")
        if r.subject == r.object:
            raise SchemaError(f"frame {frame.frame_idx}: self relation {r}")
        pred = onto.predicate(r.predicate)
        if pred.id in onto.semantic_ids and not onto.is_tool(by_id[r.subject].class_id):
            raise SchemaError(
                f"frame {frame.frame_idx}: semantic relation {pred.name} with non-tool subject")
    if len(set(frame.relations)) != len(frame.relations):
        raise SchemaError(f"frame {frame.frame_idx}: duplicate relation records")
    if frame.phase not in range(len(onto.phases)):
        raise SchemaError(f"frame {frame.frame_idx}: phase {frame.phase} out of range")
    if frame.technique not in range(len(onto.techniques)):
        raise SchemaError(f"frame {frame.frame_idx}: technique {frame.technique} out of range")


def validate_video(video: VideoRecord, ontology: Ontology | None = None,
                   check_masks: bool = True) -> None:
    if not video.frames:
        raise SchemaError(f"video {video.video_id!r} has no frames")
    prev = None
    for f in video.frames:
        if f.video_id != video.video_id:
            raise SchemaError(f"frame {f.frame_idx} belongs to video {f.video_id!r}")
        if prev is not None and f.frame_idx <= prev:
            raise SchemaError(f"frame indices not strictly increasing at {f.frame_idx}")
        if f.technique != video.technique:
            raise SchemaError(f"frame {f.frame_idx} technique differs from the video label")
        prev = f.frame_idx
        validate_frame(f, ontology, check_masks=check_masks)


# JSONL ------------------------------------------------------------------


def frame_to_dict(frame: FrameSceneGraph) -> dict:
    return {
        "video_id": frame.video_id,
        "frame_idx": frame.frame_idx,
        "time_s": frame.time_s,
        "phase": frame.phase,
        "technique": frame.technique,
        "entities": [
            {
                "id": e.instance_id,
                "class": e.class_id,
                "cx": e.grounding.cx,
                "cy": e.grounding.cy,
                "area": e.grounding.area,
                "bbox": list(e.grounding.bbox),
                "mask_rle": e.mask.to_string() if e.mask is not None else None,
            }
            for e in frame.entities
        ],
        "relations": [{"sub": r.subject, "obj": r.object, "pred": r.predicate}
                      for r in frame.relations],
    }


def frame_from_dict(d: dict, frame_size: tuple[int, int] | None = None) -> FrameSceneGraph:
    entities = []
    for e in d["entities"]:
        rle = e["mask_rle"]
        mask = None
        if rle is not None:
            if frame_size is None:
                raise SchemaError("mask_rle present but frame size unknown")
            mask = Mask.from_string(rle, *frame_size)
        bbox = tuple(float(v) for v in e["bbox"])
        if len(bbox) != 4:
            raise SchemaError("bbox must have four values")
        entities.append(Entity(int(e["id"]), int(e["class"]),
                               Grounding(float(e["cx"]), float(e["cy"]), float(e["area"]), bbox),
                               mask))
    relations = [RelationInstance(int(r["sub"]), int(r["obj"]), int(r["pred"]))
                 for r in d["relations"]]
    return FrameSceneGraph(str(d["video_id"]), int(d["frame_idx"]), float(d["time_s"]),
                           tuple(entities), tuple(relations), int(d["phase"]), int(d["technique"]))


def dumps_video(video: VideoRecord) -> str:
    header = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "video_id": video.video_id,
        "fps": video.fps,
        "technique": video.technique,
        "frame_size": list(video.frame_size) if video.frame_size else None,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    lines += [json.dumps(frame_to_dict(f), separators=(",", ":")) for f in video.frames]
    return "\n".join(lines) + "\n"


def write_jsonl(video: VideoRecord, path: str | Path) -> None:
    Path(path).write_text(dumps_video(video))


def read_jsonl(path: str | Path, ontology: Ontology | None = None,
               frame_size: tuple[int, int] | None = None,
               check_masks: bool = True) -> VideoRecord:
    """Load and validate one video; errors carry the offending line number."""
    header = None
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if isinstance(doc, dict) and "format" in doc:
                if header is not None or frames:
                    raise SchemaError(f"{path}:{lineno}: header must be the first line")
                if doc["format"] != FORMAT_TAG or doc.get("version") != FORMAT_VERSION:
                    raise SchemaError(f"{path}:{lineno}: unsupported format {doc['format']!r}")
                header = doc
                if doc.get("frame_size") and frame_size is None:
                    frame_size = tuple(doc["frame_size"])
                continue
            try:
                frame = frame_from_dict(doc, frame_size)
                validate_frame(frame, ontology, check_masks=check_masks)
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: malformed frame ({exc!r})") from exc
            frames.append(frame)
    if not frames:
        raise SchemaError(f"{path}: video has no frames")
    video_id = header["video_id"] if header else frames[0].video_id
    technique = header["technique"] if header else frames[0].technique
    if header:
        fps = float(header["fps"])
    else:
        timed = [f for f in frames if f.time_s > 0]
        fps = timed[0].frame_idx / timed[0].time_s if timed else DEFAULT_FPS
    video = VideoRecord(video_id, fps, tuple(frames), technique,
                        tuple(frame_size) if frame_size else None)
    validate_video(video, ontology, check_masks=False)
    return video


def write_dataset(videos: Iterable[VideoRecord], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for v in videos:
        p = directory / f"{v.video_id}.jsonl"
        write_jsonl(v, p)
        paths.append(p)
    return paths


def read_dataset(directory: str | Path, ontology: Ontology | None = None,
                 check_masks: bool = True) -> list[VideoRecord]:
    paths = sorted(Path(directory).glob("*.jsonl"))
    if not paths:
        raise EmptyDataset(f"no .jsonl videos under {directory}")
    return [read_jsonl(p, ontology, check_masks=check_masks) for p in paths]


# prompt serializer ------------------------------------------------------


def _entity_line(e: Entity, onto: Ontology, include_grounding: bool) -> str:
    name = onto.class_name(e.class_id)
    if not include_grounding:
        return name
    g = e.grounding
    return f"{name} at ({g.cx:.2f}, {g.cy:.2f}) with size {g.area:.2f}"


def _graph_block(graph: FrameSceneGraph, onto: Ontology, include_grounding: bool) -> list[str]:
    ents = sorted(graph.entities, key=lambda e: (e.class_id, e.instance_id))
    lines = [_entity_line(e, onto, include_grounding) for e in ents]
    names = {e.instance_id: onto.class_name(e.class_id) for e in graph.entities}
    rels = sorted(graph.relations, key=lambda r: (r.subject, r.predicate, r.object))
    lines += [f"{names[r.subject]} {onto.predicate(r.predicate).name} {names[r.object]}"
              for r in rels]
    return lines


def to_prompt(graph: FrameSceneGraph, history: Sequence[FrameSceneGraph] = (),
              include_grounding: bool = True, ontology: Ontology | None = None) -> str:
    """Render the current graph and its history (oldest first) as prompt text.

    Each step opens with a ``## step -k`` marker, the current graph being
    ``## step 0``; entities come before relations within a step.
    """
    onto = ontology or default_ontology()
    steps = list(history) + [graph]
    out: list[str] = []
    for k, g in enumerate(steps):
        out.append(f"## step {k - len(steps) + 1}")
        out.extend(_graph_block(g, onto, include_grounding))
    return "\n".join(out)


# statistics -------------------------------------------------------------


@dataclass
class StatsReport:
    n_videos: int
    n_frames: int
    n_relations: int
    per_predicate: dict[str, int]
    unique_objects: int
    unique_relations: int
    per_phase_frames: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "videos": self.n_videos,
            "annotated_frames": self.n_frames,
            "annotated_relations": self.n_relations,
            "unique_objects": self.unique_objects,
            "unique_relations": self.unique_relations,
            "per_predicate": dict(self.per_predicate),
            "per_phase_frames": dict(self.per_phase_frames),
        }


def dataset_stats(videos: Sequence[VideoRecord], ontology: Ontology | None = None) -> StatsReport:
    """Dataset size table; close_to is counted as directed records."""
    if not videos:
        raise EmptyDataset("dataset_stats needs at least one video")
    onto = ontology or default_ontology()
    preds: Counter[int] = Counter()
    phases: Counter[int] = Counter()
    objects: set[int] = set()
    n_frames = 0
    for v in videos:
        for f in v.frames:
            n_frames += 1
            phases[f.phase] += 1
            objects.update(e.class_id for e in f.entities)
            preds.update(r.predicate for r in f.relations)
    return StatsReport(
        n_videos=len(videos),
        n_frames=n_frames,
        n_relations=sum(preds.values()),
        per_predicate={p.name: preds.get(p.id, 0) for p in onto.predicates},
        unique_objects=len(objects),
        unique_relations=sum(1 for c in preds.values() if c),
        per_phase_frames={name: phases.get(i, 0) for i, name in enumerate(onto.phases)},
    )

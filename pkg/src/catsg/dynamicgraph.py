"""Windowed dynamic scene graphs for the downstream classifiers.

A window samples ``W`` frames spaced ``spacing_s`` seconds apart and ending at
``end_t``. Each sampled frame contributes one node per entity and its relation
edges; nodes of the same class in consecutive slots are joined by an untyped
temporal edge. Slots that would fall before the start of the video repeat
frame 0 so every window has the same number of slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidWindow
from .ontology import Ontology, default_ontology
from .scenegraph import VideoRecord


@dataclass(frozen=True)
class WindowConfig:
    length: int = 1
    spacing_s: float = 1.0
    spatial: bool = True

    def step(self, fps: float) -> int:
        """Native frames between consecutive slots."""
        if self.length < 1:
            raise InvalidWindow("window length must be >= 1")
        if self.length == 1:
            return 0
        if self.spacing_s <= 0:
            raise InvalidWindow("spacing_s must be > 0 for windows longer than one frame")
        step = int(round(self.spacing_s * fps))
        if step < 1:
            raise InvalidWindow(f"spacing {self.spacing_s}s is below one frame at {fps} fps")
        return step


# named windows: single frame and 30 slots over 90 s for phases;
# 10 s at 5 fps and 50 s at 1 fps for techniques
WINDOW_PRESETS: dict[str, WindowConfig] = {
    "single": WindowConfig(1, 1.0),
    "w30s90": WindowConfig(30, 3.0),
    "10s@5fps": WindowConfig(50, 0.2),
    "50s@1fps": WindowConfig(50, 1.0),
}


def window_preset(name: str, spatial: bool = True) -> WindowConfig:
    try:
        w = WINDOW_PRESETS[name]
    except KeyError:
        raise InvalidWindow(f"unknown window preset {name!r}; choose from {sorted(WINDOW_PRESETS)}") from None
    return WindowConfig(w.length, w.spacing_s, spatial)


@dataclass(frozen=True)
class DynamicSceneGraph:
    video_id: str
    end_t: int
    slots: tuple[int, ...]           # frame position per slot, oldest first
    node_slot: np.ndarray            # (N,)
    node_class: np.ndarray           # (N,)
    node_grounding: np.ndarray       # (N, 3): cx, cy, area
    intra_edges: np.ndarray          # (E, 3): src node, dst node, predicate id
    temporal_edges: np.ndarray       # (T, 2): node in slot k, node in slot k + 1
    window: WindowConfig
    fps: float
    n_classes: int
    phase: int
    technique: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_class)

    def last_slot_mask(self) -> np.ndarray:
        return self.node_slot == len(self.slots) - 1


def build_window(video: VideoRecord, end_t: int, cfg: WindowConfig,
                 ontology: Ontology | None = None) -> DynamicSceneGraph:
    onto = ontology or default_ontology()
    if not 0 <= end_t < len(video.frames):
        raise InvalidWindow(f"end_t {end_t} outside video {video.video_id} ({len(video.frames)} frames)")
    step = cfg.step(video.fps)
    slots = tuple(max(0, end_t - k * step) for k in range(cfg.length - 1, -1, -1))

    node_slot, node_class, grounding, intra = [], [], [], []
    slot_nodes: list[dict[int, int]] = []
    for s, t in enumerate(slots):
        frame = video.frames[t]
        index: dict[int, int] = {}
        by_inst = {}
        for e in sorted(frame.entities, key=lambda e: e.class_id):
            index[e.class_id] = len(node_class)
            by_inst[e.instance_id] = index[e.class_id]
            node_slot.append(s)
            node_class.append(e.class_id)
            g = e.grounding
            grounding.append((g.cx, g.cy, g.area))
        for r in frame.relations:
            intra.append((by_inst[r.subject], by_inst[r.object], r.predicate))
        slot_nodes.append(index)

    temporal = []
    for a, b in zip(slot_nodes, slot_nodes[1:]):
        for cid in sorted(set(a) & set(b)):
            temporal.append((a[cid], b[cid]))

    last = video.frames[end_t]
    return DynamicSceneGraph(
        video_id=video.video_id,
        end_t=end_t,
        slots=slots,
        node_slot=np.asarray(node_slot, dtype=np.int64),
        node_class=np.asarray(node_class, dtype=np.int64),
        node_grounding=np.asarray(grounding, dtype=float).reshape(-1, 3),
        intra_edges=np.asarray(sorted(intra), dtype=np.int64).reshape(-1, 3),
        temporal_edges=np.asarray(temporal, dtype=np.int64).reshape(-1, 2),
        window=cfg,
        fps=video.fps,
        n_classes=onto.n_classes,
        phase=last.phase,
        technique=video.technique,
    )


def feature_dim(n_classes: int, spatial: bool) -> int:
    return n_classes + (3 if spatial else 0)


def encode_features(graph: DynamicSceneGraph, spatial: bool | None = None) -> np.ndarray:
    """One row per node in (slot, class) order: class one-hot, then cx, cy, area if spatial."""
    spatial = graph.window.spatial if spatial is None else spatial
    x = np.zeros((graph.n_nodes, feature_dim(graph.n_classes, spatial)))
    x[np.arange(graph.n_nodes), graph.node_class] = 1.0
    if spatial:
        x[:, graph.n_classes:] = graph.node_grounding
    return x


def describe(graph: DynamicSceneGraph, ontology: Ontology | None = None) -> str:
    """Plain-text dump of a window for debugging."""
    onto = ontology or default_ontology()
    lines = [f"window {graph.video_id} end={graph.end_t} slots={list(graph.slots)} "
             f"phase={onto.phases[graph.phase]} technique={onto.techniques[graph.technique]}"]
    for i in range(graph.n_nodes):
        cx, cy, area = graph.node_grounding[i]
        lines.append(f"node {i} slot {graph.node_slot[i]} {onto.class_name(int(graph.node_class[i]))} "
                     f"({cx:.3f}, {cy:.3f}) area {area:.4f}")
    for s, o, p in graph.intra_edges:
        lines.append(f"edge {s} -[{onto.predicate(int(p)).name}]-> {o}")
    for a, b in graph.temporal_edges:
        lines.append(f"temporal {a} -- {b}")
    return "\n".join(lines)

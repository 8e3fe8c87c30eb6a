"""Seeded procedural simulator for cataract-surgery scene-graph videos.

Each video walks through the phase grammar in order. Every phase template
lists tool actions: when the tool is on screen, where it hovers, and which
semantic predicate it emits towards which object. Groundings come from
rasterized ellipse masks whose centres follow smooth bounded random walks;
close_to is derived from those masks by the geometry module, exactly as at
inference time.

Two design choices exist only to make downstream experiments meaningful:

* Irrigation/Aspiration and OVD Aspiration, and Hydrodissection and Wound
  Hydration, are instantaneously identical (same tools, relations and
  positions), so a single frame cannot tell them apart but their temporal
  context can.
* The two nucleus-breaking techniques differ mostly in tool trajectories; their
  relation programs have the same predicates and similar rates and differ only
  in how consecutive episode lengths are paired.

The query embeddings built here make ground-truth relations decodable from pair
concatenations by construction. They exercise the relation-head machinery; they
say nothing about representation learning.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ChunkOutOfRange, ConfigError, DimensionMismatch, MissingFrame, SchemaError
from .geometry import adjacent_pairs, encode, grounding_from_mask, rasterize_ellipse
from .ontology import Ontology, default_ontology
from .scenegraph import Entity, FrameSceneGraph, RelationInstance, VideoRecord

# anatomy and always-present scene furniture: (class, home cx, cy, rx, ry)
STATIC_SCENE = (
    ("Cornea", 0.50, 0.50, 0.36, 0.34),
    ("Iris", 0.50, 0.50, 0.24, 0.23),
    ("Pupil", 0.50, 0.50, 0.13, 0.13),
    ("Skin", 0.10, 0.88, 0.10, 0.10),
    ("Eye Retractors", 0.50, 0.05, 0.16, 0.04),
    ("Surgical Tape", 0.92, 0.90, 0.07, 0.08),
)

INCISION_POINT = (0.50, 0.17)


@dataclass(frozen=True)
class ToolAction:
    """One tool's behaviour within a phase.

    ``span`` is the fraction of the phase during which the tool is visible.
    ``predicate`` is emitted towards ``target`` for a ``duty`` fraction of the
    active time in episodes of mean length ``episode_s``. Tools entering
    ``through_incision`` emit Inserting/Retracting towards the Cornea while
    they cross the incision.
    """

    tool: str
    span: tuple[float, float] = (0.0, 1.0)
    predicate: str | None = None
    target: str = "Pupil"
    duty: float = 0.5
    episode_s: float = 2.0
    home: tuple[float, float] = (0.5, 0.5)
    size: tuple[float, float] = (0.10, 0.035)
    through_incision: bool = True


@dataclass(frozen=True)
class PhaseTemplate:
    phase: str
    duration: tuple[float, float]
    actions: tuple[ToolAction, ...] = ()


@dataclass(frozen=True)
class TechniqueTemplate:
    """Nucleus-breaking program for one technique.

    Activation (handpiece) and Pushing (manipulator) episodes alternate; the
    lengths of an Activation episode and the Pushing episode after it are
    drawn as ``(long, short)`` or ``(long, long)`` / ``(short, short)``
    depending on ``pairing`` so rates match across techniques while the
    sequence differs.
    """

    technique: str
    pairing: str  # "anti" or "co"
    handpiece_motion: str  # "sweep" or "still"
    manipulator_motion: str  # "still" or "chop"


def _a(tool, **kw) -> ToolAction:
    return ToolAction(tool, **kw)


_AIR = dict(through_incision=False)

DEFAULT_GRAMMAR: tuple[PhaseTemplate, ...] = (
    PhaseTemplate("Idle", (4, 8)),
    PhaseTemplate("Toric Marking", (6, 10), (
        _a("Mendez Ring", predicate="Holding", target="Cornea", duty=0.18, episode_s=1.5,
           home=(0.50, 0.50), size=(0.30, 0.30), **_AIR),
        _a("Marker", span=(0.2, 0.9), home=(0.72, 0.40), size=(0.09, 0.03), **_AIR),
    )),
    PhaseTemplate("Incision", (10, 14), (
        _a("Bonn Forceps", predicate="Holding", target="Cornea", duty=0.35, episode_s=2.0,
           home=(0.30, 0.30), size=(0.10, 0.03), **_AIR),
        _a("Secondary Knife", span=(0.0, 0.45), predicate="Cutting", target="Cornea",
           duty=0.25, episode_s=1.0, home=(0.62, 0.22), size=(0.11, 0.025)),
        _a("Primary Knife", span=(0.5, 0.95), predicate="Cutting", target="Cornea",
           duty=0.25, episode_s=1.0, home=(0.45, 0.18), size=(0.12, 0.03)),
    )),
    PhaseTemplate("Viscodilatation", (6, 10), (
        _a("Viscoelastic Cannula", predicate="Activation", duty=0.6, episode_s=2.5,
           home=(0.50, 0.42), size=(0.12, 0.02)),
    )),
    PhaseTemplate("Capsulorhexis", (18, 24), (
        _a("Capsulorhexis Cystotome", span=(0.0, 0.45), predicate="Pulling", duty=0.9,
           episode_s=2.0, home=(0.55, 0.45), size=(0.12, 0.02)),
        _a("Capsulorhexis Forceps", span=(0.5, 1.0), predicate="Pulling", duty=0.9,
           episode_s=2.0, home=(0.47, 0.52), size=(0.11, 0.03)),
    )),
    PhaseTemplate("Hydrodissection", (10, 14), (
        _a("Hydrodissection Cannula", predicate="Activation", duty=0.5, episode_s=2.0,
           home=(0.56, 0.47), size=(0.12, 0.02)),
    )),
    PhaseTemplate("Nucleus Breaking", (24, 32), (
        _a("Phacoemulsification Handpiece", home=(0.50, 0.50), size=(0.13, 0.04)),
        _a("Micromanipulator", home=(0.36, 0.58), size=(0.11, 0.02)),
    )),
    PhaseTemplate("Phacoemulsification", (30, 40), (
        _a("Phacoemulsification Handpiece", predicate="Activation", duty=0.75, episode_s=4.0,
           home=(0.52, 0.46), size=(0.13, 0.04)),
        _a("Micromanipulator", predicate="Pushing", duty=0.05, episode_s=1.0,
           home=(0.40, 0.58), size=(0.11, 0.02)),
    )),
    PhaseTemplate("Vitrectomy", (4, 8), (
        _a("Vitrectomy Handpiece", predicate="Activation", duty=0.7, episode_s=2.0,
           home=(0.50, 0.52), size=(0.12, 0.035)),
    )),
    PhaseTemplate("Irrigation/Aspiration", (22, 30), (
        _a("Irrigation/Aspiration Handpiece", predicate="Activation", duty=0.7, episode_s=3.0,
           home=(0.50, 0.48), size=(0.13, 0.035)),
        _a("Micromanipulator", home=(0.38, 0.60), size=(0.11, 0.02)),
    )),
    PhaseTemplate("Manual Aspiration", (6, 10), (
        _a("Charleux Cannula", predicate="Activation", duty=0.5, episode_s=2.0,
           home=(0.52, 0.50), size=(0.12, 0.02)),
    )),
    PhaseTemplate("Preparing Implant", (8, 12), (
        _a("Lens Injector", home=(0.84, 0.28), size=(0.12, 0.04), **_AIR),
        _a("Hand", predicate="Holding", target="Lens Injector", duty=0.6, episode_s=2.0,
           home=(0.86, 0.40), size=(0.10, 0.09), **_AIR),
    )),
    PhaseTemplate("Implant Ejection", (5, 8), (
        _a("Lens Injector", predicate="Activation", duty=0.6, episode_s=2.0,
           home=(0.52, 0.40), size=(0.12, 0.04)),
    )),
    PhaseTemplate("Implantation", (8, 12), (
        _a("Lens Injector", span=(0.0, 0.5), home=(0.50, 0.36), size=(0.12, 0.04)),
        _a("Micromanipulator", span=(0.3, 1.0), predicate="Pushing", duty=0.08,
           episode_s=1.0, home=(0.44, 0.55), size=(0.11, 0.02)),
    )),
    PhaseTemplate("Positioning", (8, 12), (
        _a("Micromanipulator", predicate="Pushing", duty=0.08, episode_s=1.0,
           home=(0.58, 0.52), size=(0.11, 0.02)),
        _a("Iris Hooks", span=(0.2, 0.8), home=(0.30, 0.40), size=(0.04, 0.04), **_AIR),
    )),
    PhaseTemplate("OVD Aspiration", (22, 30), (
        _a("Irrigation/Aspiration Handpiece", predicate="Activation", duty=0.7, episode_s=3.0,
           home=(0.50, 0.48), size=(0.13, 0.035)),
        _a("Micromanipulator", home=(0.38, 0.60), size=(0.11, 0.02)),
    )),
    PhaseTemplate("Suturing", (6, 10), (
        _a("Needle Holder", span=(0.0, 0.7), predicate="Holding", target="Suture Needle",
           duty=0.3, episode_s=2.0, home=(0.64, 0.20), size=(0.11, 0.03), **_AIR),
        _a("Suture Needle", span=(0.0, 0.7), home=(0.56, 0.18), size=(0.04, 0.02), **_AIR),
        _a("Troutman Forceps", span=(0.1, 0.7), home=(0.36, 0.20), size=(0.10, 0.03), **_AIR),
        _a("Vannas Scissors", span=(0.75, 1.0), predicate="Cutting", target="Cornea",
           duty=0.35, episode_s=1.0, home=(0.50, 0.14), size=(0.09, 0.03), **_AIR),
    )),
    PhaseTemplate("Sealing Control", (5, 8), (
        _a("Cotton", span=(0.0, 0.5), home=(0.40, 0.20), size=(0.06, 0.05), **_AIR),
        _a("Rycroft Cannula", span=(0.5, 1.0), predicate="Activation", target="Cornea",
           duty=0.4, episode_s=1.5, home=(0.58, 0.22), size=(0.11, 0.02), **_AIR),
    )),
    PhaseTemplate("Wound Hydration", (6, 10), (
        _a("Hydrodissection Cannula", predicate="Activation", duty=0.5, episode_s=2.0,
           home=(0.56, 0.47), size=(0.12, 0.02)),
    )),
)

DEFAULT_TECHNIQUES: tuple[TechniqueTemplate, ...] = (
    TechniqueTemplate("Stop and Chop", pairing="co", handpiece_motion="still",
                      manipulator_motion="chop"),
    TechniqueTemplate("Divide and Conquer", pairing="anti", handpiece_motion="sweep",
                      manipulator_motion="still"),
)

# relative relation frequencies the default grammar is shaped to follow
PREDICATE_TARGETS = {
    "close_to": 1_677_724, "Activation": 44_552, "Inserting": 34_016, "Retracting": 23_886,
    "Holding": 13_380, "Pulling": 11_895, "Pushing": 3_874, "Cutting": 1_925,
}


@dataclass(frozen=True)
class SimConfig:
    seed: int = 42
    n_videos: int = 10
    duration_s: tuple[float, float] = (60.0, 240.0)
    fps: float = 5.0
    frame_size: tuple[int, int] = (64, 64)
    embed_dim: int = 256
    noise: float = 0.2
    chunk_size: int = 8
    close_gap: int = 0
    walk_stiffness: float = 0.15
    walk_sigma: float = 0.006
    insert_s: float = 1.6
    retract_s: float = 1.0
    grammar: tuple[PhaseTemplate, ...] = DEFAULT_GRAMMAR
    techniques: tuple[TechniqueTemplate, ...] = DEFAULT_TECHNIQUES
    predicate_targets: tuple[tuple[str, int], ...] = tuple(PREDICATE_TARGETS.items())

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "grammar" in d:
            d["grammar"] = tuple(
                PhaseTemplate(p["phase"], tuple(p["duration"]),
                              tuple(ToolAction(**_tuplify(a)) for a in p.get("actions", ())))
                for p in d["grammar"])
        if "techniques" in d:
            d["techniques"] = tuple(TechniqueTemplate(**t) for t in d["techniques"])
        if "predicate_targets" in d:
            d["predicate_targets"] = tuple((k, int(v)) for k, v in d["predicate_targets"])
        for key in ("duration_s", "frame_size"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self, ontology: Ontology | None = None) -> None:
        onto = ontology or default_ontology()
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.n_videos < 1:
            raise ConfigError("n_videos must be >= 1")
        lo, hi = self.duration_s
        if not 0 < lo <= hi:
            raise ConfigError(f"bad duration range {self.duration_s}")
        if self.embed_dim < 8:
            raise ConfigError("embed_dim must be >= 8")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if min(self.frame_size) < 8:
            raise ConfigError("frame_size must be at least 8x8")
        names = [p.phase for p in self.grammar]
        if sorted(names) != sorted(onto.phases):
            missing = set(onto.phases) - set(names)
            raise ConfigError(f"phase grammar must cover every phase exactly once; missing {missing}")
        if round(lo * self.fps) < len(self.grammar):
            raise ConfigError("shortest video is too short to host every phase")
        for p in self.grammar:
            for a in p.actions:
                try:
                    onto.class_id(a.tool)
                    onto.class_id(a.target)
                except KeyError as exc:
                    raise ConfigError(f"unknown class in phase {p.phase!r}: {exc}") from None
                if not onto.is_tool(a.tool):
                    raise ConfigError(f"{a.tool} is not a tool")
                if a.predicate is not None and onto.predicate(a.predicate).id not in onto.semantic_ids:
                    raise ConfigError(f"{a.predicate} is not a semantic predicate")
        if sorted(t.technique for t in self.techniques) != sorted(onto.techniques):
            raise ConfigError("technique templates must cover both techniques")


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# generation


def _video_rngs(cfg: SimConfig) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_videos)]


def _phase_lengths(cfg: SimConfig, n_frames: int, rng: np.random.Generator) -> list[int]:
    weights = np.array([rng.uniform(*p.duration) for p in cfg.grammar])
    min_len = 1
    spare = n_frames - min_len * len(weights)
    raw = weights / weights.sum() * spare
    lengths = np.floor(raw).astype(int)
    # largest remainder keeps the total exact
    order = np.argsort(-(raw - lengths), kind="stable")
    lengths[order[: spare - lengths.sum()]] += 1
    return [int(x) + min_len for x in lengths]


def _episodes(n: int, duty: float, mean_on: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean activity track with alternating on/off episodes."""
    active = np.zeros(n, dtype=bool)
    if n == 0 or duty <= 0:
        return active
    if duty >= 1:
        active[:] = True
        return active
    mean_off = mean_on * (1 - duty) / duty
    t = int(rng.integers(0, max(1, int(mean_off) + 1)))
    while t < n:
        on = max(1, int(round(rng.exponential(mean_on - 1) + 1)))
        active[t:t + on] = True
        t += on + max(1, int(round(rng.exponential(mean_off - 1 if mean_off > 1 else 0.5) + 1)))
    return active


def _technique_program(n: int, template: TechniqueTemplate, fps: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Activation and Pushing tracks for the nucleus-breaking phase."""
    act = np.zeros(n, dtype=bool)
    push = np.zeros(n, dtype=bool)
    short, long_ = 0.8 * fps, 2.4 * fps
    t = int(rng.integers(0, int(fps)))
    while t < n:
        a_long = rng.random() < 0.5
        a_len = long_ if a_long else short
        p_long = a_long if template.pairing == "co" else not a_long
        p_len = (long_ if p_long else short) * 0.3
        a_len = max(1, int(round(a_len * rng.uniform(0.8, 1.2))))
        p_len = max(1, int(round(p_len * rng.uniform(0.8, 1.2))))
        act[t:t + a_len] = True
        t += a_len + max(1, int(round(0.4 * fps * rng.uniform(0.5, 1.5))))
        push[t:t + p_len] = True
        t += p_len + max(1, int(round(0.6 * fps * rng.uniform(0.5, 1.5))))
    return act, push


class _Walker:
    """Ornstein-Uhlenbeck style walk towards a moving target, clipped to the frame."""

    def __init__(self, start, stiffness, sigma, rng):
        self.pos = np.array(start, dtype=float)
        self.k = stiffness
        self.sigma = sigma
        self.rng = rng

    def step(self, target) -> tuple[float, float]:
        self.pos += self.k * (np.asarray(target) - self.pos) + self.rng.normal(0, self.sigma, 2)
        self.pos = np.clip(self.pos, 0.02, 0.98)
        return float(self.pos[0]), float(self.pos[1])


def _render_entity(cx: float, cy: float, size, cfg: SimConfig):
    w, h = cfg.frame_size
    arr = rasterize_ellipse(cx * w, cy * h, max(size[0] * w, 1.0), max(size[1] * h, 1.0), w, h)
    return arr, encode(arr), grounding_from_mask(arr)


def _repair_relations(rels: list[tuple[int, int, int]]) -> list[tuple[int, int, int]]:
    """Keep a frame's semantic relations decodable from per-entity signals.

    Every predicate must point at a single object and the subjects' object
    sets must be nested; otherwise only relations towards the most used object
    are kept.
    """
    if len(rels) < 2:
        return rels
    per_pred: dict[int, set[int]] = {}
    per_sub: dict[int, set[int]] = {}
    for s, o, p in rels:
        per_pred.setdefault(p, set()).add(o)
        per_sub.setdefault(s, set()).add(o)
    chains = sorted(per_sub.values(), key=len)
    nested = all(a <= b for a, b in zip(chains, chains[1:]))
    if nested and all(len(v) == 1 for v in per_pred.values()):
        return rels
    counts: dict[int, int] = {}
    for _, o, _ in rels:
        counts[o] = counts.get(o, 0) + 1
    focus = min(counts, key=lambda o: (-counts[o], o))
    return [r for r in rels if r[1] == focus]


def _simulate_video(index: int, cfg: SimConfig, onto: Ontology,
                    rng: np.random.Generator) -> VideoRecord:
    video_id = f"synth{index:03d}"
    duration = rng.uniform(*cfg.duration_s)
    n_frames = int(round(duration * cfg.fps))
    technique_idx = int(rng.integers(len(cfg.techniques)))
    technique = cfg.techniques[technique_idx]
    technique_id = onto.techniques.index(technique.technique)
    lengths = _phase_lengths(cfg, n_frames, rng)
    fps = cfg.fps
    ins_n = max(1, int(round(cfg.insert_s * fps)))
    ret_n = max(1, int(round(cfg.retract_s * fps)))

    # per-frame tool state: class -> (home, size, predicate, target, flag)
    presence: list[dict[int, dict]] = [dict() for _ in range(n_frames)]
    phase_of = np.zeros(n_frames, dtype=int)
    start = 0
    for template, length in zip(cfg.grammar, lengths):
        stop = start + length
        phase_of[start:stop] = onto.phase_id(template.phase)
        nucleus = template.phase == "Nucleus Breaking"
        if nucleus:
            act, push = _technique_program(length, technique, fps, rng)
        for action in template.actions:
            a0 = start + int(round(action.span[0] * length))
            a1 = start + int(round(action.span[1] * length))
            if a1 <= a0:
                continue
            cid = onto.class_id(action.tool)
            track = _episodes(a1 - a0, action.duty, action.episode_s * fps, rng)
            if nucleus and action.tool == "Phacoemulsification Handpiece":
                track, pred = act[a0 - start:a1 - start], "Activation"
            elif nucleus and action.tool == "Micromanipulator":
                track, pred = push[a0 - start:a1 - start], "Pushing"
            else:
                pred = action.predicate
            for k, t in enumerate(range(a0, a1)):
                presence[t][cid] = dict(action=action, active=bool(track[k]) and pred is not None,
                                        pred=pred, nucleus=nucleus, k=t - start)
        start = stop

    # incision crossings: a tool entering (leaving) the eye while it was absent
    # from (absent in) the neighbouring frames
    for cid in range(onto.n_classes):
        t = 0
        while t < n_frames:
            if cid not in presence[t]:
                t += 1
                continue
            s = t
            while t < n_frames and cid in presence[t]:
                t += 1
            e = t
            if not presence[s][cid]["action"].through_incision:
                continue
            for u in range(s, min(e, s + ins_n)):
                presence[u][cid]["crossing"] = "Inserting"
            for u in range(max(s + ins_n, e - ret_n), e):
                presence[u][cid]["crossing"] = "Retracting"

    walkers: dict[int, _Walker] = {}
    static = [(onto.class_id(name), (cx, cy), (rx, ry)) for name, cx, cy, rx, ry in STATIC_SCENE]
    for cid, home, _ in static:
        walkers[cid] = _Walker(home, cfg.walk_stiffness, cfg.walk_sigma * 0.5, rng)

    cornea = onto.class_id("Cornea")
    frames = []
    for t in range(n_frames):
        items = []  # (class id, cx, cy, size)
        for cid, home, size in static:
            cx, cy = walkers[cid].step(home)
            items.append((cid, cx, cy, size))
        for cid, state in sorted(presence[t].items()):
            action: ToolAction = state["action"]
            target = _tool_target(action, state, technique, fps)
            crossing = state.get("crossing")
            if crossing is not None:
                target = INCISION_POINT if crossing == "Retracting" else target
            if cid not in walkers or t == 0 or cid not in presence[t - 1]:
                entry = INCISION_POINT if action.through_incision else action.home
                walkers[cid] = _Walker(entry, cfg.walk_stiffness, cfg.walk_sigma, rng)
            cx, cy = walkers[cid].step(target)
            items.append((cid, cx, cy, action.size))
        items.sort()
        entities, arrays = [], []
        for inst, (cid, cx, cy, size) in enumerate(items):
            arr, mask, grounding = _render_entity(cx, cy, size, cfg)
            entities.append(Entity(inst, cid, grounding, mask))
            arrays.append(arr)
        by_class = {e.class_id: e.instance_id for e in entities}

        sem = []
        for cid, state in presence[t].items():
            crossing = state.get("crossing")
            if crossing is not None:
                sem.append((by_class[cid], by_class[cornea], onto.predicate(crossing).id))
            elif state["active"]:
                obj = onto.class_id(state["action"].target)
                if obj in by_class and obj != cid:
                    sem.append((by_class[cid], by_class[obj], onto.predicate(state["pred"]).id))
        sem = sorted(set(_repair_relations(sem)))
        close = onto.close_to.id
        rels = [RelationInstance(s, o, p) for s, o, p in sem]
        for i, j in adjacent_pairs(arrays, cfg.close_gap):
            rels += [RelationInstance(i, j, close), RelationInstance(j, i, close)]
        rels.sort(key=lambda r: (r.subject, r.object, r.predicate))
        frames.append(FrameSceneGraph(video_id, t, t / fps, tuple(entities), tuple(rels),
                                      int(phase_of[t]), technique_id))
    return VideoRecord(video_id, fps, tuple(frames), technique_id, tuple(cfg.frame_size))


def _tool_target(action: ToolAction, state: dict, technique: TechniqueTemplate, fps: float):
    if not state["nucleus"]:
        return action.home
    k = state["k"]
    if action.tool == "Phacoemulsification Handpiece" and technique.handpiece_motion == "sweep":
        return (0.50 + 0.14 * np.sin(2 * np.pi * k / (3.0 * fps)), 0.50)
    if action.tool == "Micromanipulator" and technique.manipulator_motion == "chop":
        s = 0.5 * (1 - np.cos(2 * np.pi * k / (2.5 * fps)))
        return (0.68 - 0.14 * s, 0.36 + 0.11 * s)
    if action.tool == "Phacoemulsification Handpiece":
        return (0.53, 0.50)
    return action.home


def generate(config: SimConfig | None = None, ontology: Ontology | None = None) -> list[VideoRecord]:
    """Simulate ``config.n_videos`` videos; a pure function of the config."""
    cfg = config or SimConfig()
    onto = ontology or default_ontology()
    cfg.validate(onto)
    return [_simulate_video(i, cfg, onto, rng) for i, rng in enumerate(_video_rngs(cfg))]


# ---------------------------------------------------------------------------
# query embeddings


class QueryProvider(Protocol):
    """Source of per-instance query vectors for a chunk of frames.

    ``frames`` are positions into ``video.frames``; the result has one
    ``{class id: vector}`` map per requested frame.
    """

    dim: int
    chunk_size: int

    def chunk(self, video: VideoRecord, frames: Sequence[int]) -> list[dict[int, np.ndarray]]:
        ...


def _check_chunk(video: VideoRecord, frames: Sequence[int], chunk_size: int) -> None:
    if len(frames) != chunk_size:
        raise ChunkOutOfRange(f"chunk has {len(frames)} frames, expected {chunk_size}")
    for t in frames:
        if not 0 <= t < len(video.frames):
            raise ChunkOutOfRange(f"frame {t} outside video {video.video_id} ({len(video.frames)} frames)")


def query_layout(dim: int, n_classes: int, n_predicates: int) -> dict[str, slice]:
    """Block positions inside a synthetic query vector."""
    class_width = n_classes if dim >= n_classes + 3 + 2 * n_predicates else \
        int(np.ceil(np.log2(n_classes)))
    need = class_width + 3 + 2 * n_predicates
    if dim < need:
        raise ConfigError(f"embed_dim {dim} too small for synthetic queries (need >= {need})")
    c1 = class_width
    g1 = c1 + 3
    s1 = g1 + n_predicates
    o1 = s1 + n_predicates
    return {"class": slice(0, c1), "grounding": slice(c1, g1),
            "subject": slice(g1, s1), "object": slice(s1, o1)}


class SyntheticQueryProvider:
    """Structured query vectors: class code, grounding, relation signal, noise."""

    def __init__(self, config: SimConfig | None = None, ontology: Ontology | None = None,
                 noise: float | None = None):
        self.config = config or SimConfig()
        self.ontology = ontology or default_ontology()
        self.dim = self.config.embed_dim
        self.chunk_size = self.config.chunk_size
        self.noise = self.config.noise if noise is None else noise
        self.layout = query_layout(self.dim, self.ontology.n_classes,
                                   len(self.ontology.semantic_predicates))
        self._sem_slot = {p.id: k for k, p in enumerate(self.ontology.semantic_predicates)}

    def _class_code(self, cid: int) -> np.ndarray:
        width = self.layout["class"].stop
        if width == self.ontology.n_classes:
            code = np.zeros(width)
            code[cid] = 1.0
            return code
        return np.array([(cid >> b) & 1 for b in range(width)], dtype=float)

    def frame(self, video: VideoRecord, t: int) -> dict[int, np.ndarray]:
        frame = video.frames[t]
        out = {}
        ids = {e.instance_id: e.class_id for e in frame.entities}
        subj: dict[int, np.ndarray] = {}
        obj: dict[int, np.ndarray] = {}
        n_sem = len(self._sem_slot)
        for r in frame.relations:
            k = self._sem_slot.get(r.predicate)
            if k is None:
                continue
            subj.setdefault(ids[r.subject], np.zeros(n_sem))[k] = 1.0
            obj.setdefault(ids[r.object], np.zeros(n_sem))[k] = 1.0
        noise = None
        if self.noise > 0:
            seq = np.random.SeedSequence(
                [self.config.seed, zlib.crc32(video.video_id.encode()), frame.frame_idx])
            noise = np.random.default_rng(seq).standard_normal((self.ontology.n_classes, self.dim))
        L = self.layout
        for e in frame.entities:
            q = np.zeros(self.dim)
            q[L["class"]] = self._class_code(e.class_id)
            q[L["grounding"]] = (e.grounding.cx, e.grounding.cy, e.grounding.area)
            if e.class_id in subj:
                q[L["subject"]] = subj[e.class_id]
            if e.class_id in obj:
                q[L["object"]] = obj[e.class_id]
            if noise is not None:
                q += self.noise * noise[e.class_id]
            out[e.class_id] = q
        return out

    def chunk(self, video: VideoRecord, frames: Sequence[int]) -> list[dict[int, np.ndarray]]:
        _check_chunk(video, frames, self.chunk_size)
        cache: dict[int, dict[int, np.ndarray]] = {}
        result = []
        for t in frames:
            if t not in cache:
                cache[t] = self.frame(video, t)
            result.append(cache[t])
        return result


def synthetic_queries(video: VideoRecord, chunk: Sequence[int] | range,
                      config: SimConfig | None = None) -> list[dict[int, np.ndarray]]:
    return SyntheticQueryProvider(config).chunk(video, list(chunk))


QUERY_FORMAT = "catsg-queries"


class ExternalQueryProvider:
    """Serves stored vectors keyed by (video_id, frame_idx, class)."""

    def __init__(self, table: dict[tuple[str, int], dict[int, np.ndarray]], dim: int,
                 chunk_size: int = 8):
        self.table = table
        self.dim = dim
        self.chunk_size = chunk_size

    def chunk(self, video: VideoRecord, frames: Sequence[int]) -> list[dict[int, np.ndarray]]:
        _check_chunk(video, frames, self.chunk_size)
        out = []
        for t in frames:
            frame = video.frames[t]
            key = (video.video_id, frame.frame_idx)
            if key not in self.table:
                raise MissingFrame(f"no stored queries for {key}")
            stored = self.table[key]
            missing = {e.class_id for e in frame.entities} - set(stored)
            if missing:
                raise MissingFrame(f"{key}: no stored queries for classes {sorted(missing)}")
            out.append({e.class_id: stored[e.class_id] for e in frame.entities})
        return out


def write_external_queries(path: str | Path, rows, dim: int) -> None:
    """Write ``(video_id, frame_idx, class, vector)`` rows in the queries JSONL format."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": QUERY_FORMAT, "version": 1, "dim": dim}) + "\n")
        for video_id, frame_idx, cls, vec in rows:
            fh.write(json.dumps({"video_id": video_id, "frame_idx": int(frame_idx),
                                 "class": int(cls), "vector": [float(v) for v in vec]}) + "\n")


def load_external_queries(path: str | Path, dim: int | None = None,
                          chunk_size: int = 8) -> ExternalQueryProvider:
    """Load a queries JSONL file; every vector must have length ``dim``
    (taken from the file header when not given)."""
    table: dict[tuple[str, int], dict[int, np.ndarray]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            doc = json.loads(line)
            if "format" in doc:
                if doc["format"] != QUERY_FORMAT:
                    raise SchemaError(f"{path}:{lineno}: not a queries file")
                if dim is None:
                    dim = int(doc["dim"])
                elif int(doc["dim"]) != dim:
                    raise DimensionMismatch(f"{path}: file dim {doc['dim']} != configured {dim}")
                continue
            if dim is None:
                raise SchemaError(f"{path}: no header and no dimension given")
            vec = np.asarray(doc["vector"], dtype=float)
            if vec.shape != (dim,):
                raise DimensionMismatch(f"{path}:{lineno}: vector of length {vec.size}, expected {dim}")
            table.setdefault((str(doc["video_id"]), int(doc["frame_idx"])), {})[int(doc["class"])] = vec
    return ExternalQueryProvider(table, dim, chunk_size)

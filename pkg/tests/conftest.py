import numpy as np
import pytest

from catsg.geometry import encode, grounding_from_mask
from catsg.ontology import default_ontology
from catsg.scenegraph import Entity, FrameSceneGraph, RelationInstance, VideoRecord
from catsg.synthdata import SimConfig, generate

SMALL = SimConfig(n_videos=3, duration_s=(40.0, 60.0))


@pytest.fixture(scope="session")
def onto():
    return default_ontology()


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_videos():
    return generate(SMALL)


def make_frame(onto, masks, relations=(), frame_idx=0, video_id="v", phase=0, technique=0,
               groundings=None):
    """Frame from ``{class name: bool array}``; instance ids follow insertion order."""
    ents = []
    for i, (name, arr) in enumerate(masks.items()):
        if arr is None:
            g = groundings[name]
            ents.append(Entity(i, onto.class_id(name), g))
        else:
            ents.append(Entity(i, onto.class_id(name), grounding_from_mask(arr), encode(arr)))
    ids = {onto.class_name(e.class_id): e.instance_id for e in ents}
    rels = tuple(RelationInstance(ids[s], ids[o], onto.predicate(p).id) for s, p, o in relations)
    return FrameSceneGraph(video_id, frame_idx, frame_idx / 5.0, tuple(ents), rels, phase, technique)


def rect(h, w, y0, y1, x0, x1):
    a = np.zeros((h, w), dtype=bool)
    a[y0:y1, x0:x1] = True
    return a


def make_video(frames, video_id="v", fps=5.0, technique=0):
    return VideoRecord(video_id, fps, tuple(frames), technique)


@pytest.fixture(scope="session")
def seed42_videos():
    return generate(SimConfig(seed=42))

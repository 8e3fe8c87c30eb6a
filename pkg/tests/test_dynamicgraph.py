import numpy as np
import pytest

from catsg.dynamicgraph import (WINDOW_PRESETS, WindowConfig, build_window, describe,
                                encode_features, feature_dim, window_preset)
from catsg.errors import InvalidWindow
from catsg.scenegraph import Grounding

from conftest import make_frame, make_video, rect


def _graph_arrays(g):
    return (g.slots, g.node_slot.tolist(), g.node_class.tolist(), g.node_grounding.tolist(),
            g.intra_edges.tolist(), g.temporal_edges.tolist())


def test_single_slot(small_videos, onto):
    g = build_window(small_videos[0], 30, WindowConfig(1), onto)
    assert g.slots == (30,)
    assert len(g.temporal_edges) == 0
    assert g.n_nodes == len(small_videos[0].frames[30].entities)
    assert g.phase == small_videos[0].frames[30].phase


def test_two_slots_shared_classes(onto):
    masks = {"Phacoemulsification Handpiece": rect(8, 8, 0, 3, 0, 3), "Cornea": rect(8, 8, 0, 8, 3, 8)}
    v = make_video([make_frame(onto, masks, frame_idx=t) for t in range(10)])
    g = build_window(v, 9, WindowConfig(2, 1.0), onto)
    assert g.slots == (4, 9)
    assert len(g.temporal_edges) == 2


def test_table4_window_slots(onto):
    g = Grounding(0.5, 0.5, 0.3, (0.2, 0.2, 0.8, 0.8))
    v = make_video([make_frame(onto, {"Cornea": None}, frame_idx=t, groundings={"Cornea": g})
                    for t in range(500)])
    end = 480
    g = build_window(v, end, WINDOW_PRESETS["w30s90"], onto)
    assert len(g.slots) == 30
    assert list(g.slots) == [end - 15 * k for k in range(29, -1, -1)]
    assert (g.slots[-1] - g.slots[0]) / v.fps == pytest.approx(87.0)
    assert len(g.temporal_edges) == 29


def test_underflow_clamps_to_first_frame(small_videos, onto):
    g = build_window(small_videos[0], 20, WINDOW_PRESETS["w30s90"], onto)
    assert g.slots[:28] == (0,) * 28
    assert g.slots[28:] == (5, 20)
    assert len(g.slots) == 30


def test_temporal_edge_count_oracle(small_videos, onto):
    v = small_videos[1]
    for end in range(0, len(v.frames), 37):
        g = build_window(v, end, WindowConfig(6, 0.4), onto)
        shared = sum(len({e.class_id for e in v.frames[a].entities} & {e.class_id for e in v.frames[b].entities})
                     for a, b in zip(g.slots, g.slots[1:]))
        assert len(g.temporal_edges) == shared
        for a, b in g.temporal_edges:
            assert g.node_class[a] == g.node_class[b]
            assert g.node_slot[b] == g.node_slot[a] + 1


def test_intra_edges_match_relations(small_videos, onto):
    v = small_videos[0]
    g = build_window(v, 100, WindowConfig(3, 1.0), onto)
    for s, t in enumerate(g.slots):
        f = v.frames[t]
        cls = {e.instance_id: e.class_id for e in f.entities}
        want = sorted((cls[r.subject], cls[r.object], r.predicate) for r in f.relations)
        got = sorted((int(g.node_class[a]), int(g.node_class[b]), int(p))
                     for a, b, p in g.intra_edges if g.node_slot[a] == s)
        assert got == want


def test_entity_order_does_not_matter(small_videos, onto):
    v = small_videos[0]
    rng = np.random.default_rng(0)
    frames = []
    for f in v.frames:
        ents = list(f.entities)
        rng.shuffle(ents)
        rels = list(f.relations)
        rng.shuffle(rels)
        frames.append(f.replace(entities=tuple(ents), relations=tuple(rels)))
    shuffled = make_video(frames, v.video_id, v.fps, v.technique)
    cfg = WindowConfig(5, 0.6)
    for end in (0, 50, 150):
        a, b = build_window(v, end, cfg, onto), build_window(shuffled, end, cfg, onto)
        assert _graph_arrays(a) == _graph_arrays(b)
        assert np.array_equal(encode_features(a), encode_features(b))


def test_pure(small_videos, onto):
    cfg = WINDOW_PRESETS["10s@5fps"]
    assert _graph_arrays(build_window(small_videos[2], 99, cfg, onto)) == \
        _graph_arrays(build_window(small_videos[2], 99, cfg, onto))


def test_feature_contract(onto):
    g = Grounding(0.5, 0.5, 0.3, (0.2, 0.2, 0.8, 0.8))
    v = make_video([make_frame(onto, {"Cornea": None}, groundings={"Cornea": g})])
    graph = build_window(v, 0, WindowConfig(1), onto)
    x = encode_features(graph, spatial=True)
    want = np.zeros(32)
    want[onto.class_id("Cornea")] = 1
    want[29:] = (0.5, 0.5, 0.3)
    assert np.array_equal(x[0], want)
    assert encode_features(graph, spatial=False).shape == (1, 29)
    assert feature_dim(29, True) == 32 and feature_dim(29, False) == 29
    assert "Cornea" in describe(graph, onto)


def test_invalid_windows(small_videos, onto):
    with pytest.raises(InvalidWindow):
        build_window(small_videos[0], 0, WindowConfig(0), onto)
    with pytest.raises(InvalidWindow):
        build_window(small_videos[0], 0, WindowConfig(3, 0.0), onto)
    with pytest.raises(InvalidWindow):
        build_window(small_videos[0], 0, WindowConfig(3, 0.05), onto)
    with pytest.raises(InvalidWindow):
        build_window(small_videos[0], 10 ** 6, WindowConfig(1), onto)
    with pytest.raises(InvalidWindow):
        window_preset("weekly")


def test_presets():
    assert {k: (w.length, w.spacing_s) for k, w in WINDOW_PRESETS.items()} == {
        "single": (1, 1.0), "w30s90": (30, 3.0), "10s@5fps": (50, 0.2), "50s@1fps": (50, 1.0)}
    assert window_preset("w30s90", spatial=False).spatial is False

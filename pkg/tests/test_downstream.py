import dataclasses

import numpy as np
import pytest
import torch

from catsg.downstream import (GraphClassifier, TaskConfig, check_split, classify, classify_many,
                              collate, evaluate_task, load_model, majority_vote, save_model,
                              split_videos, train_task, window_ends)
from catsg.dynamicgraph import WindowConfig, build_window, encode_features, window_preset
from catsg.errors import DimensionMismatch, EmptySplit, NonFiniteLoss
from catsg.scenegraph import Grounding

from conftest import make_frame, make_video


def model_for(spatial=True, k=19, hidden=16, heads=4, readout="mean+last"):
    torch.manual_seed(0)
    return GraphClassifier(32 if spatial else 29, k, hidden, heads, readout=readout)


def permuted(graph, perm):
    """Same graph with node ``i`` moved to position ``perm[i]``."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    intra = graph.intra_edges.copy()
    intra[:, :2] = perm[intra[:, :2]]
    return dataclasses.replace(
        graph,
        node_slot=graph.node_slot[inv], node_class=graph.node_class[inv],
        node_grounding=graph.node_grounding[inv], intra_edges=intra,
        temporal_edges=perm[graph.temporal_edges])


@pytest.fixture(scope="module")
def windows(small_videos, onto):
    cfg = WindowConfig(4, 1.0)
    return [build_window(v, t, cfg, onto) for v in small_videos for t in range(0, len(v.frames), 40)]


def test_output_is_distribution(windows):
    model = model_for()
    probs = classify_many(model, windows)
    assert probs.shape == (len(windows), 19)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(1), 1.0, atol=1e-6)
    assert np.allclose(classify(model, windows[0]), probs[0], atol=1e-6)


def test_zeroed_head_gives_uniform(windows):
    model = model_for(k=2)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    assert np.allclose(classify(model, windows[3]), [0.5, 0.5], atol=1e-7)


@pytest.mark.parametrize("readout", ["mean", "mean+last"])
def test_node_permutation_invariance(windows, readout):
    model = model_for(readout=readout).double()
    rng = np.random.default_rng(0)
    for g in windows[:8]:
        perm = rng.permutation(g.n_nodes)
        a = classify(model, g)
        b = classify(model, permuted(g, perm))
        assert np.allclose(a, b, atol=1e-12)


def test_batching_matches_single(windows):
    model = model_for().double()
    batch = classify_many(model, windows[:6], batch_size=6)
    single = np.stack([classify(model, g) for g in windows[:6]])
    assert np.allclose(batch, single, atol=1e-12)


def test_dimension_mismatch(windows):
    model = model_for(spatial=True)
    with pytest.raises(DimensionMismatch):
        classify(model, windows[0], spatial=False)


def test_gradient_check(windows, onto):
    torch.manual_seed(1)
    model = GraphClassifier(32, 5, hidden=8, heads=2).double()
    batch = collate(windows[:3], True, len(onto.predicates), torch.double)
    y = torch.tensor([0, 3, 4])

    def loss():
        return torch.nn.functional.cross_entropy(model(batch), y)

    model.zero_grad()
    loss().backward()
    eps = 1e-6
    num_all, ana_all = [], []
    for p in model.parameters():
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss().item()
            flat[i] = old - eps
            down = loss().item()
            flat[i] = old
            num_all.append((up - down) / (2 * eps))
        ana_all.extend(p.grad.view(-1).tolist())
    num, ana = np.array(num_all), np.array(ana_all)
    rel = np.linalg.norm(num - ana) / (np.linalg.norm(num) + np.linalg.norm(ana))
    assert rel <= 1e-3
    big = np.abs(num) > 1e-4
    assert np.median(np.abs(num[big] - ana[big]) / np.abs(num[big])) <= 1e-3


# --- tasks ------------------------------------------------------------------------------

def test_majority_vote():
    assert majority_vote([1, 0, 1]) == 1
    assert majority_vote([1, 0]) == 0
    assert majority_vote([3]) == 3


def test_split_is_stratified_and_disjoint(seed42_videos):
    train, test = split_videos(seed42_videos, 0.3, seed=0)
    assert {v.video_id for v in train}.isdisjoint({v.video_id for v in test})
    assert len(train) + len(test) == len(seed42_videos)
    assert {v.technique for v in train} == {0, 1} == {v.technique for v in test}
    check_split(train, test)


def test_split_errors(small_videos):
    with pytest.raises(EmptySplit):
        check_split(small_videos, small_videos[:1])
    with pytest.raises(EmptySplit):
        check_split([], small_videos)
    with pytest.raises(EmptySplit):
        train_task([], TaskConfig())
    with pytest.raises(EmptySplit):
        train_task(small_videos, TaskConfig(epochs=1), val_videos=small_videos[:1])


def test_technique_windows_inside_nucleus_breaking(small_videos, onto):
    nb = onto.phase_id("Nucleus Breaking")
    cfg = TaskConfig(task="technique", window=window_preset("10s@5fps"))
    for v in small_videos:
        ends = window_ends(v, cfg, onto)
        assert ends and all(v.frames[t].phase == nb for t in ends)
        assert ends == [t for t, f in enumerate(v.frames) if f.phase == nb]


def test_training_deterministic_and_logged(small_videos, onto):
    cfg = TaskConfig(task="phase", window=WindowConfig(1), epochs=2, hidden=16, heads=2, seed=3)
    logs = []
    for _ in range(2):
        model, log = train_task(small_videos[:2], cfg, small_videos[2:], onto)
        logs.append(log.epochs)
    assert logs[0] == logs[1]
    assert set(logs[0][0]) == {"epoch", "loss", "train_acc", "val_acc"}


def test_nonfinite_loss(onto):
    bad = Grounding(float("nan"), 0.5, 0.1, (0, 0, 1, 1))
    frames = [make_frame(onto, {"Cornea": None}, frame_idx=t, groundings={"Cornea": bad})
              for t in range(10)]
    with pytest.raises(NonFiniteLoss):
        train_task([make_video(frames)], TaskConfig(epochs=1, stride_s=0.2), ontology=onto)


def test_technique_evaluation_votes(small_videos, onto, tmp_path):
    cfg = TaskConfig(task="technique", window=WindowConfig(2, 1.0), epochs=1, hidden=8, heads=2)
    model, _ = train_task(small_videos[:2], cfg, ontology=onto)
    result = evaluate_task(model, small_videos, cfg, onto)
    assert set(result.video_predictions) == {v.video_id for v in small_videos}
    assert result.video_report.support == {
        name: sum(v.technique == i for v in small_videos) for i, name in enumerate(onto.techniques)}
    d = result.to_dict()
    assert "per_window" in d and "per_video" in d

    save_model(tmp_path / "m.npz", model, cfg, onto)
    again, cfg2, _ = load_model(tmp_path / "m.npz", onto)
    assert cfg2 == cfg
    g = build_window(small_videos[0], 50, cfg.window, onto)
    assert np.array_equal(classify(model, g), classify(again, g))

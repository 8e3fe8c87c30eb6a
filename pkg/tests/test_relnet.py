import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from catsg.errors import (DimensionMismatch, FingerprintMismatch, InconsistentDim,
                          NoQualifyingChunk)
from catsg.relnet import (GateTrace, RelHeads, TrainConfig, Variant, build_pair_proposals,
                          chunk_positions, chunk_queries, head_losses, infer_frame, load_heads,
                          make_heads, pair_targets, pool_chunk_queries, predict, sample_training_chunks,
                          save_heads, train)
from catsg.scenegraph import RelationInstance
from catsg.synthdata import SyntheticQueryProvider

from conftest import make_frame, make_video, rect


def proposal_oracle(classes, onto):
    return {(s, o) for s, o in itertools.product(classes, classes) if s != o and onto.is_tool(s)}


def random_queries(rng, onto, dim=4):
    k = int(rng.integers(0, 12))
    classes = rng.choice(onto.n_classes, size=k, replace=False)
    return {int(c): rng.standard_normal(dim) for c in classes}


# --- proposals ------------------------------------------------------------------

def test_two_tools_two_anatomy(onto):
    q = {onto.class_id(n): np.zeros(3) for n in ("Hand", "Micromanipulator", "Pupil", "Iris")}
    props = build_pair_proposals(q, onto)
    assert len(props) == 6
    assert all(onto.is_tool(p.subject_class) for p in props)


def test_no_tools(onto):
    q = {onto.class_id(n): np.zeros(3) for n in ("Pupil", "Iris")}
    assert build_pair_proposals(q, onto) == []


def test_proposals_match_oracle(onto):
    rng = np.random.default_rng(0)
    for _ in range(300):
        q = random_queries(rng, onto)
        props = build_pair_proposals(q, onto)
        t = sum(onto.is_tool(c) for c in q)
        a = len(q) - t
        assert len(props) == t * (t - 1 + a)
        assert {(p.subject_class, p.object_class) for p in props} == proposal_oracle(list(q), onto)
        for p in props:
            assert np.array_equal(p.embedding, np.concatenate([q[p.subject_class], q[p.object_class]]))


# --- pooling ------------------------------------------------------------------------

def test_pool_example():
    out = pool_chunk_queries([{3: np.array([1.0, 4.0])}, {3: np.array([3.0, 2.0])}])
    assert np.array_equal(out[3], [3.0, 4.0])


def test_pool_single_frame_class_unchanged():
    v = np.array([0.5, -1.0])
    out = pool_chunk_queries([{1: v}, {2: np.zeros(2)}])
    assert np.array_equal(out[1], v)


def test_pool_inconsistent_dim():
    with pytest.raises(InconsistentDim):
        pool_chunk_queries([{1: np.zeros(2)}, {1: np.zeros(3)}])


vec = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array)
frame_st = st.dictionaries(st.integers(0, 5), vec, max_size=4)


@settings(max_examples=100, deadline=None)
@given(st.lists(frame_st, min_size=1, max_size=8), st.randoms())
def test_pool_algebra(frames, rnd):
    pooled = pool_chunk_queries(frames)
    shuffled = list(frames)
    rnd.shuffle(shuffled)
    again = pool_chunk_queries(shuffled)
    assert pooled.keys() == again.keys()
    for k in pooled:
        assert np.array_equal(pooled[k], again[k])
        # idempotent
        assert np.array_equal(pool_chunk_queries([pooled, pooled])[k], pooled[k])
    # monotone: raising one coordinate never lowers an output
    if frames and frames[0]:
        bumped = [dict(f) for f in frames]
        key = next(iter(bumped[0]))
        bumped[0][key] = bumped[0][key] + 1.0
        raised = pool_chunk_queries(bumped)
        for k in pooled:
            assert np.all(raised[k] >= pooled[k])


def test_chunk_positions():
    assert chunk_positions(7, 8) == list(range(8))
    assert chunk_positions(0, 8) == [0] * 8
    assert chunk_positions(3, 8) == [0, 0, 0, 0, 0, 1, 2, 3]


class ConstantProvider:
    """Every frame returns the same vectors, one per present class."""

    def __init__(self, dim=8, chunk_size=8):
        self.dim, self.chunk_size = dim, chunk_size

    def chunk(self, video, frames):
        return [{e.class_id: np.full(self.dim, e.class_id / 10.0) for e in video.frames[t].entities}
                for t in frames]


def test_variants_agree_on_constant_queries(small_videos, onto):
    v = small_videos[0]
    prov = ConstantProvider()
    heads = RelHeads(8, 16, 16, 8)
    for t in (0, 5, 40):
        a = infer_frame(heads, prov, v, t, Variant.CATSGG, onto)
        b = infer_frame(heads, prov, v, t, Variant.CATSGG_PLUS, onto)
        assert a == b


def test_variants_agree_at_t0(small_videos, small_cfg, onto):
    prov = SyntheticQueryProvider(small_cfg, onto)
    v = small_videos[0]
    a = chunk_queries(prov, v, 0, "catsgg")
    b = chunk_queries(prov, v, 0, "catsgg+")
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_plus_restricted_to_last_frame_classes(small_videos, small_cfg, onto):
    prov = SyntheticQueryProvider(small_cfg, onto)
    v = small_videos[0]
    for t in range(8, len(v.frames), 13):
        assert set(chunk_queries(prov, v, t, "catsgg+")) == {e.class_id for e in v.frames[t].entities}


# --- predict ----------------------------------------------------------------------

def _logit(p):
    return float(np.log(p / (1 - p)))


def fixed_heads(e, c, dim=4):
    """Heads whose outputs ignore the input: existence ``e`` and class scores ``c``."""
    heads = RelHeads(dim, 4, 4, 4, n_predicates=7)
    with torch.no_grad():
        for p in heads.parameters():
            p.zero_()
        heads.existence[-1].bias.fill_(_logit(e))
        heads.classification[-1].bias.copy_(torch.tensor([_logit(x) for x in c]))
    return heads


def _props(onto, dim=4):
    q = {onto.class_id("Hand"): np.ones(dim), onto.class_id("Pupil"): np.ones(dim)}
    return build_pair_proposals(q, onto)


def test_gate_closed(onto):
    trace = GateTrace()
    (pred,) = predict(fixed_heads(0.49, [0.9] * 7), _props(onto), trace)
    assert pred.labels == frozenset()
    assert pred.existence == pytest.approx(0.49)
    assert trace.n_classified == 0


def test_gate_open_per_output_threshold(onto):
    c = [0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.6]
    (pred,) = predict(fixed_heads(0.73, c), _props(onto))
    names = {onto.semantic_predicates[k].name for k in pred.labels}
    assert names == {"Holding", "Retracting"}


def test_gate_open_nothing_above_threshold(onto):
    (pred,) = predict(fixed_heads(0.9, [0.2] * 7), _props(onto))
    assert pred.labels == frozenset()


def test_predict_order_invariant(onto):
    rng = np.random.default_rng(1)
    heads = RelHeads(4, 8, 8, 8)
    q = {c: rng.standard_normal(4) for c in range(10)}
    props = build_pair_proposals(q, onto)
    a = {(p.pair.subject_class, p.pair.object_class): (p.existence, p.labels) for p in predict(heads, props)}
    b = {(p.pair.subject_class, p.pair.object_class): (p.existence, p.labels)
         for p in predict(heads, props[::-1])}
    assert a.keys() == b.keys()
    for k in a:
        assert a[k][0] == pytest.approx(b[k][0], abs=1e-6) and a[k][1] == b[k][1]


def test_predict_dimension_mismatch(onto):
    with pytest.raises(DimensionMismatch):
        predict(RelHeads(5, 4, 4, 4), _props(onto, dim=4))


# --- chunks and targets ------------------------------------------------------------

def _video_with_relation_frames(onto, n, relation_at):
    frames = []
    for t in range(n):
        rels = [("Hand", "Holding", "Pupil")] if relation_at(t) else []
        frames.append(make_frame(onto, {"Hand": rect(8, 8, 0, 2, 0, 2), "Pupil": rect(8, 8, 4, 6, 4, 6)},
                                 rels, frame_idx=t))
    return make_video(frames)


def test_chunks_all_qualify(onto):
    v = _video_with_relation_frames(onto, 300, lambda t: True)
    chunks = sample_training_chunks(v, TrainConfig(), np.random.default_rng(0), onto)
    assert len(chunks) == 18
    assert all(len(c) == 8 and c[-1] >= 7 for c in chunks)


def test_chunks_single_qualifying(onto):
    v = _video_with_relation_frames(onto, 50, lambda t: t == 20)
    chunks = sample_training_chunks(v, TrainConfig(), np.random.default_rng(0), onto)
    assert chunks == [range(13, 21)] * 18


def test_chunks_none_qualifying(onto):
    v = _video_with_relation_frames(onto, 50, lambda t: False)
    with pytest.raises(NoQualifyingChunk):
        sample_training_chunks(v, TrainConfig(), np.random.default_rng(0), onto)


def test_pair_targets_ignore_close_to(onto):
    f = make_frame(onto, {"Hand": rect(8, 8, 0, 2, 0, 2), "Pupil": rect(8, 8, 2, 4, 2, 4)},
                   [("Hand", "Holding", "Pupil"), ("Hand", "close_to", "Pupil")])
    props = build_pair_proposals({e.class_id: np.zeros(2) for e in f.entities}, onto)
    y = pair_targets(f, props, onto)
    assert y.sum() == 1
    hand, pupil = onto.class_id("Hand"), onto.class_id("Pupil")
    row = [i for i, p in enumerate(props) if (p.subject_class, p.object_class) == (hand, pupil)][0]
    assert y[row, 0] == 1


# --- gradients -------------------------------------------------------------------

def test_gradient_check_bce_heads():
    torch.manual_seed(0)
    heads = RelHeads(8, 8, 8, 8).double()
    x = torch.randn(12, 16, dtype=torch.double)
    y = (torch.rand(12, 7) < 0.3).double()
    y[:3] = 0
    y[3, 0] = 1

    def loss():
        le, lc = head_losses(heads, x, y)
        return le + lc

    heads.zero_grad()
    loss().backward()
    eps = 1e-6
    worst = 0.0
    for p in heads.parameters():
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss().item()
            flat[i] = old - eps
            down = loss().item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            rel = abs(num - grad[i].item()) / max(abs(num) + abs(grad[i].item()), 1e-8)
            worst = max(worst, rel if abs(num) > 1e-7 else 0.0)
    assert worst <= 1e-4


# --- training ----------------------------------------------------------------------

def test_zero_epochs(small_videos, small_cfg, onto):
    cfg = TrainConfig(epochs=0, hidden=(16, 16, 8))
    heads = make_heads(small_cfg.embed_dim, cfg, onto)
    before = {k: v.clone() for k, v in heads.state_dict().items()}
    heads, log = train(heads, SyntheticQueryProvider(small_cfg, onto), small_videos, cfg, onto)
    assert log.epochs == []
    assert all(torch.equal(before[k], v) for k, v in heads.state_dict().items())


def test_training_deterministic(small_videos, small_cfg, onto):
    cfg = TrainConfig(epochs=3, hidden=(32, 32, 16), seed=5)
    prov = SyntheticQueryProvider(small_cfg, onto)
    losses = []
    for _ in range(2):
        heads = make_heads(small_cfg.embed_dim, cfg, onto)
        _, log = train(heads, prov, small_videos, cfg, onto)
        losses.append(log.losses())
    assert losses[0] == losses[1]
    assert all(np.isfinite(losses[0]))


def test_separable_training_fits(small_videos, small_cfg, onto):
    """On noise-free queries the heads reproduce the training labels."""
    cfg = TrainConfig(epochs=60, hidden=(128, 128, 64), seed=0, chunks_per_video=60)
    prov = SyntheticQueryProvider(small_cfg, onto, noise=0.0)
    heads, log = train(make_heads(small_cfg.embed_dim, cfg, onto), prov, small_videos, cfg, onto)
    assert log.losses()[-1] < log.losses()[0]
    tp = fp = fn = 0
    v = small_videos[0]
    for t in range(0, len(v.frames), 2):
        pred = infer_frame(heads, prov, v, t, "catsgg", onto)
        p = set(pred.relations)
        g = set(v.frames[t].semantic_relations(onto))
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    assert 2 * tp / (2 * tp + fp + fn) >= 0.99


def test_checkpoint_roundtrip(tmp_path, onto):
    from catsg.ontology import ontology_from_dict
    cfg = TrainConfig(hidden=(8, 8, 4))
    heads = make_heads(6, cfg, onto)
    save_heads(tmp_path / "h.npz", heads, cfg, onto)
    again, header = load_heads(tmp_path / "h.npz", onto)
    for (k, a), (_, b) in zip(heads.state_dict().items(), again.state_dict().items()):
        assert torch.equal(a, b), k
    assert header["config"]["train"]["hidden"] == [8, 8, 4]
    doc = json.loads(json.dumps(onto.to_dict()))
    doc["phases"][0] = "Waiting"
    with pytest.raises(FingerprintMismatch):
        load_heads(tmp_path / "h.npz", ontology_from_dict(doc))

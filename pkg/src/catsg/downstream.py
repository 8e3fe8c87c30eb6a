"""Graph-attention classifier over dynamic scene graphs.

Three GATv2-style attention layers (dynamic attention: the score of edge
j -> i is ``a . LeakyReLU(W_l x_j + W_r x_i + W_e type_ij)``) feed a mean-pool
readout and a linear head. Relation edges are traversed in both directions
with direction-specific edge types; temporal edges and self loops have their
own types.

Used for 19-way phase recognition (label = phase of the window's last frame)
and 2-way technique recognition (label = the video's technique; windows end
inside the nucleus-breaking phase and per-video predictions are a majority
vote over windows).
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dynamicgraph import DynamicSceneGraph, WindowConfig, build_window, encode_features, feature_dim
from .errors import DimensionMismatch, EmptySplit, NonFiniteLoss
from .evaluation import EvalReport, evaluate_classification
from .ontology import Ontology, default_ontology
from .scenegraph import VideoRecord

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "graph_classifier"
N_LAYERS = 3


def n_edge_types(n_predicates: int) -> int:
    # forward and reverse per predicate, temporal, self loop
    return 2 * n_predicates + 2


@dataclass
class GraphBatch:
    x: torch.Tensor            # (N, F)
    src: torch.Tensor          # (E,)
    dst: torch.Tensor          # (E,)
    edge_type: torch.Tensor    # (E,)
    graph: torch.Tensor        # (N,) graph index per node
    last: torch.Tensor         # (N,) bool, node sits in its window's last slot
    n_graphs: int


def collate(graphs: Sequence[DynamicSceneGraph], spatial: bool, n_predicates: int,
            dtype=torch.float32) -> GraphBatch:
    xs, src, dst, etype, gidx, last = [], [], [], [], [], []
    offset = 0
    temporal_type = 2 * n_predicates
    self_type = temporal_type + 1
    for g_i, g in enumerate(graphs):
        n = g.n_nodes
        xs.append(encode_features(g, spatial))
        if len(g.intra_edges):
            s, o, p = g.intra_edges.T
            src += [s + offset, o + offset]
            dst += [o + offset, s + offset]
            etype += [p, p + n_predicates]
        if len(g.temporal_edges):
            a, b = g.temporal_edges.T
            src += [a + offset, b + offset]
            dst += [b + offset, a + offset]
            etype += [np.full(len(a), temporal_type)] * 2
        loop = np.arange(n) + offset
        src.append(loop)
        dst.append(loop)
        etype.append(np.full(n, self_type))
        gidx.append(np.full(n, g_i))
        last.append(g.last_slot_mask())
        offset += n

    def cat(parts, dt=torch.long):
        return torch.as_tensor(np.concatenate(parts) if parts else np.zeros(0), dtype=dt)

    return GraphBatch(
        x=cat(xs, dtype) if xs else torch.zeros((0, 0), dtype=dtype),
        src=cat(src), dst=cat(dst), edge_type=cat(etype),
        graph=cat(gidx), last=cat(last, torch.bool), n_graphs=len(graphs),
    )


def _segment_softmax(scores: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of ``scores`` (E, H) over edges sharing the same ``index``."""
    h = scores.shape[1]
    idx = index.unsqueeze(1).expand(-1, h)
    smax = scores.new_full((n, h), float("-inf")).scatter_reduce(0, idx, scores, "amax", include_self=True)
    ex = torch.exp(scores - smax[index].detach())
    denom = scores.new_zeros((n, h)).index_add(0, index, ex)
    return ex / denom[index]


class GATv2Layer(nn.Module):
    def __init__(self, in_dim: int, out_per_head: int, heads: int, n_types: int,
                 negative_slope: float = 0.2):
        super().__init__()
        self.heads = heads
        self.out = out_per_head
        self.lin_l = nn.Linear(in_dim, heads * out_per_head, bias=False)
        self.lin_r = nn.Linear(in_dim, heads * out_per_head, bias=False)
        self.edge = nn.Embedding(n_types, heads * out_per_head)
        self.att = nn.Parameter(torch.empty(heads, out_per_head))
        self.bias = nn.Parameter(torch.zeros(heads * out_per_head))
        self.slope = negative_slope
        nn.init.xavier_uniform_(self.lin_l.weight)
        nn.init.xavier_uniform_(self.lin_r.weight)
        nn.init.normal_(self.edge.weight, std=0.1)
        nn.init.xavier_uniform_(self.att)

    def forward(self, x, src, dst, edge_type):
        n = x.shape[0]
        h, c = self.heads, self.out
        xl = self.lin_l(x).view(n, h, c)
        xr = self.lin_r(x).view(n, h, c)
        m = xl[src] + xr[dst] + self.edge(edge_type).view(-1, h, c)
        score = (nn.functional.leaky_relu(m, self.slope) * self.att).sum(-1)
        alpha = _segment_softmax(score, dst, n)
        msg = xl[src] * alpha.unsqueeze(-1)
        out = x.new_zeros((n, h, c)).index_add(0, dst, msg)
        return out.reshape(n, h * c) + self.bias


class GraphClassifier(nn.Module):
    """Three attention layers, graph readout, linear head.

    ``readout="mean"`` averages all nodes of the window. ``"mean+last"``
    concatenates that with the average over the window's last slot so the
    head can tell the current frame from its context.
    """

    def __init__(self, in_dim: int, n_classes: int, hidden: int = 64, heads: int = 4,
                 n_predicates: int = 8, readout: str = "mean+last"):
        super().__init__()
        if hidden % heads:
            raise ValueError("hidden width must be divisible by the number of heads")
        if readout not in ("mean", "mean+last"):
            raise ValueError(f"unknown readout {readout!r}")
        self.config = dict(in_dim=in_dim, n_classes=n_classes, hidden=hidden, heads=heads,
                           n_predicates=n_predicates, readout=readout)
        n_types = n_edge_types(n_predicates)
        dims = [in_dim] + [hidden] * N_LAYERS
        self.layers = nn.ModuleList(
            GATv2Layer(dims[i], hidden // heads, heads, n_types) for i in range(N_LAYERS))
        self.readout = readout
        width = hidden * (2 if readout == "mean+last" else 1)
        self.head = nn.Linear(width, n_classes)

    @property
    def in_dim(self) -> int:
        return self.config["in_dim"]

    @property
    def n_classes(self) -> int:
        return self.config["n_classes"]

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        """Class logits, one row per graph."""
        if batch.x.shape[1] != self.in_dim:
            raise DimensionMismatch(f"node features have width {batch.x.shape[1]}, model expects {self.in_dim}")
        h = batch.x
        for layer in self.layers:
            h = nn.functional.elu(layer(h, batch.src, batch.dst, batch.edge_type))
        pooled = _mean_pool(h, batch.graph, batch.n_graphs)
        if self.readout == "mean+last":
            keep = batch.last
            pooled = torch.cat([pooled, _mean_pool(h[keep], batch.graph[keep], batch.n_graphs)], dim=1)
        return self.head(pooled)


def _mean_pool(h: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    total = h.new_zeros((n, h.shape[1])).index_add(0, index, h)
    count = h.new_zeros(n).index_add(0, index, torch.ones_like(index, dtype=h.dtype))
    return total / count.clamp(min=1).unsqueeze(1)


@torch.no_grad()
def classify(model: GraphClassifier, graph: DynamicSceneGraph, spatial: bool | None = None) -> np.ndarray:
    """Class distribution for one window."""
    return classify_many(model, [graph], spatial)[0]


@torch.no_grad()
def classify_many(model: GraphClassifier, graphs: Sequence[DynamicSceneGraph],
                  spatial: bool | None = None, batch_size: int = 64) -> np.ndarray:
    spatial = graphs[0].window.spatial if spatial is None and graphs else spatial
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(graphs), batch_size):
        batch = collate(graphs[i:i + batch_size], spatial, model.config["n_predicates"], dtype)
        out.append(torch.softmax(model(batch), dim=1).numpy())
    model.train(was)
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class TaskConfig:
    task: str = "phase"  # "phase" or "technique"
    window: WindowConfig = WindowConfig(1, 1.0)
    epochs: int = 30
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    hidden: int = 64
    heads: int = 4
    readout: str = "mean+last"
    stride_s: float | None = None  # None: 1 s for phase, every frame for technique
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        d = dict(d)
        if isinstance(d.get("window"), dict):
            d["window"] = WindowConfig(**d["window"])
        return cls(**d)


@dataclass
class TaskLog:
    epochs: list[dict] = field(default_factory=list)


def n_task_classes(task: str, onto: Ontology) -> int:
    if task == "phase":
        return len(onto.phases)
    if task == "technique":
        return len(onto.techniques)
    raise ValueError(f"unknown task {task!r}")


def window_ends(video: VideoRecord, cfg: TaskConfig, onto: Ontology) -> list[int]:
    """Frame positions at which windows end for this task."""
    stride_s = cfg.stride_s if cfg.stride_s is not None else (1.0 if cfg.task == "phase" else 0.0)
    stride = max(1, int(round(stride_s * video.fps)))
    if cfg.task == "phase":
        return list(range(len(video.frames) - 1, -1, -stride))[::-1]
    nucleus = onto.phase_id("Nucleus Breaking")
    ends = [t for t, f in enumerate(video.frames) if f.phase == nucleus]
    return ends[::stride]


def task_windows(videos: Sequence[VideoRecord], cfg: TaskConfig,
                 onto: Ontology) -> tuple[list[DynamicSceneGraph], np.ndarray]:
    graphs = [build_window(v, t, cfg.window, onto) for v in videos for t in window_ends(v, cfg, onto)]
    labels = np.array([g.phase if cfg.task == "phase" else g.technique for g in graphs], dtype=np.int64)
    return graphs, labels


def split_videos(videos: Sequence[VideoRecord], test_fraction: float = 0.3,
                 seed: int = 0) -> tuple[list[VideoRecord], list[VideoRecord]]:
    """Video-level split, stratified by technique so both sides see both techniques."""
    rng = np.random.default_rng(seed)
    by_tech: dict[int, list[VideoRecord]] = {}
    for v in videos:
        by_tech.setdefault(v.technique, []).append(v)
    train, test = [], []
    for tech in sorted(by_tech):
        group = [by_tech[tech][i] for i in rng.permutation(len(by_tech[tech]))]
        k = int(round(test_fraction * len(group)))
        if len(group) > 1:
            k = min(max(k, 1), len(group) - 1)
        test += group[:k]
        train += group[k:]
    key = lambda v: v.video_id
    return sorted(train, key=key), sorted(test, key=key)


def check_split(train: Sequence[VideoRecord], test: Sequence[VideoRecord]) -> None:
    if not train:
        raise EmptySplit("training split is empty")
    if not test:
        raise EmptySplit("evaluation split is empty")
    shared = {v.video_id for v in train} & {v.video_id for v in test}
    if shared:
        raise EmptySplit(f"videos appear in both splits: {sorted(shared)}")


def make_model(cfg: TaskConfig, ontology: Ontology | None = None) -> GraphClassifier:
    onto = ontology or default_ontology()
    torch.manual_seed(cfg.seed)
    return GraphClassifier(feature_dim(onto.n_classes, cfg.window.spatial),
                           n_task_classes(cfg.task, onto), cfg.hidden, cfg.heads,
                           n_predicates=len(onto.predicates), readout=cfg.readout)


def _accuracy(model, graphs, labels, cfg) -> float:
    if not graphs:
        return float("nan")
    probs = classify_many(model, graphs, cfg.window.spatial)
    return float((probs.argmax(1) == labels).mean())


def train_task(train_videos: Sequence[VideoRecord], cfg: TaskConfig,
               val_videos: Sequence[VideoRecord] = (),
               ontology: Ontology | None = None) -> tuple[GraphClassifier, TaskLog]:
    """Cross-entropy training on windows of the training videos."""
    onto = ontology or default_ontology()
    if not train_videos:
        raise EmptySplit("training split is empty")
    if val_videos:
        check_split(train_videos, val_videos)
    graphs, labels = task_windows(train_videos, cfg, onto)
    if not graphs:
        raise EmptySplit("no training windows")
    val_graphs, val_labels = task_windows(val_videos, cfg, onto) if val_videos else ([], np.zeros(0))
    model = make_model(cfg, onto)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    n_pred = len(onto.predicates)
    y_all = torch.as_tensor(labels)
    history = TaskLog()
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(graphs), generator=gen).tolist()
        total, correct = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = collate([graphs[j] for j in idx], cfg.window.spatial, n_pred)
            logits = model(batch)
            loss = nn.functional.cross_entropy(logits, y_all[idx])
            correct += int((logits.argmax(1) == y_all[idx]).sum())
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: loss {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        # running accuracy over the epoch's batches, saves a second pass
        entry = {"epoch": epoch, "loss": total / len(graphs), "train_acc": correct / len(graphs)}
        if val_graphs:
            entry["val_acc"] = _accuracy(model, val_graphs, val_labels, cfg)
        history.epochs.append(entry)
        log.info("epoch %d: %s", epoch, entry)
    return model, history


@dataclass
class TaskEvaluation:
    window_report: EvalReport
    video_report: EvalReport | None = None
    video_predictions: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"per_window": self.window_report.to_dict()}
        if self.video_report is not None:
            d["per_video"] = self.video_report.to_dict()
            d["video_predictions"] = self.video_predictions
        return d


def majority_vote(preds: Sequence[int]) -> int:
    """Most frequent label; ties go to the smallest label."""
    counts = Counter(preds)
    return min(counts, key=lambda k: (-counts[k], k))


def evaluate_task(model: GraphClassifier, videos: Sequence[VideoRecord], cfg: TaskConfig,
                  ontology: Ontology | None = None) -> TaskEvaluation:
    onto = ontology or default_ontology()
    graphs, labels = task_windows(videos, cfg, onto)
    if not graphs:
        raise EmptySplit("no evaluation windows")
    preds = classify_many(model, graphs, cfg.window.spatial).argmax(1)
    names = list(onto.phases if cfg.task == "phase" else onto.techniques)
    k = len(names)
    result = TaskEvaluation(evaluate_classification(preds.tolist(), labels.tolist(), k, names))
    if cfg.task == "technique":
        per_video: dict[str, list[int]] = {}
        for g, p in zip(graphs, preds):
            per_video.setdefault(g.video_id, []).append(int(p))
        voted = {vid: majority_vote(ps) for vid, ps in per_video.items()}
        truth = {v.video_id: v.technique for v in videos}
        ids = sorted(voted)
        result.video_report = evaluate_classification([voted[i] for i in ids], [truth[i] for i in ids], k, names)
        result.video_predictions = voted
    return result


# ---------------------------------------------------------------------------
# persistence


def save_model(path: str | Path, model: GraphClassifier, cfg: TaskConfig, ontology: Ontology,
               extra: dict | None = None) -> None:
    params = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, CHECKPOINT_KIND, params, ontology.fingerprint,
                    {"task": cfg.to_dict(), "model": model.config}, extra)


def load_model(path: str | Path, ontology: Ontology) -> tuple[GraphClassifier, TaskConfig, dict]:
    header, params = load_checkpoint(path, CHECKPOINT_KIND, ontology.fingerprint)
    model = GraphClassifier(**header["config"]["model"])
    model.load_state_dict({k: torch.as_tensor(v) for k, v in params.items()})
    return model, TaskConfig.from_dict(header["config"]["task"]), header

"""Semantic relation prediction from per-instance query embeddings.

Pair proposals concatenate a tool subject's query with the query of any other
present tool or anatomy. A two-layer existence head gates each pair; pairs
that pass go through a three-layer multi-label classifier over the seven
semantic predicates. The ``catsgg+`` variant max-pools each class's queries
over the chunk before building pairs; ``catsgg`` uses the chunk's last frame.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import config_fingerprint, load_checkpoint, save_checkpoint
from .errors import DimensionMismatch, EmptyDataset, InconsistentDim, NoQualifyingChunk, NonFiniteLoss
from .geometry import infer_close_to
from .ontology import Ontology, default_ontology
from .scenegraph import FrameSceneGraph, RelationInstance, VideoRecord
from .synthdata import QueryProvider

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "relnet"


class Variant(str, Enum):
    CATSGG = "catsgg"
    CATSGG_PLUS = "catsgg+"


@dataclass(frozen=True)
class PairProposal:
    subject_class: int
    object_class: int
    embedding: np.ndarray


@dataclass(frozen=True)
class PairPrediction:
    pair: PairProposal
    existence: float
    labels: frozenset[int]  # semantic predicate ids


class RelHeads(nn.Module):
    def __init__(self, dim: int, h1: int = 512, h2: int = 512, h3: int = 256,
                 n_predicates: int = 7, tau_e: float = 0.5, tau_c: float = 0.5):
        super().__init__()
        self.dim = dim
        self.hidden = (h1, h2, h3)
        self.n_predicates = n_predicates
        self.tau_e = tau_e
        self.tau_c = tau_c
        self.existence = nn.Sequential(nn.Linear(2 * dim, h1), nn.ReLU(), nn.Linear(h1, 1))
        self.classification = nn.Sequential(
            nn.Linear(2 * dim, h2), nn.ReLU(),
            nn.Linear(h2, h3), nn.ReLU(),
            nn.Linear(h3, n_predicates),
        )

    def existence_logits(self, pairs: torch.Tensor) -> torch.Tensor:
        return self.existence(pairs).squeeze(-1)

    def classification_logits(self, pairs: torch.Tensor) -> torch.Tensor:
        return self.classification(pairs)

    def spec(self) -> dict:
        h1, h2, h3 = self.hidden
        return dict(dim=self.dim, h1=h1, h2=h2, h3=h3, n_predicates=self.n_predicates,
                    tau_e=self.tau_e, tau_c=self.tau_c)


# ---------------------------------------------------------------------------
# proposals and pooling


def build_pair_proposals(queries: dict[int, np.ndarray],
                         ontology: Ontology | None = None) -> list[PairProposal]:
    """All ordered (tool, tool-or-anatomy) pairs of distinct present classes,
    sorted by (subject class, object class)."""
    onto = ontology or default_ontology()
    present = sorted(queries)
    out = []
    for s in present:
        if not onto.is_tool(s):
            continue
        for o in present:
            if o == s:
                continue
            out.append(PairProposal(s, o, np.concatenate([queries[s], queries[o]])))
    return out


def pool_chunk_queries(per_frame: Sequence[dict[int, np.ndarray]]) -> dict[int, np.ndarray]:
    """Element-wise max of each class's vectors over the frames it appears in."""
    pooled: dict[int, np.ndarray] = {}
    dim = None
    for frame in per_frame:
        for cid, vec in frame.items():
            vec = np.asarray(vec)
            if dim is None:
                dim = vec.shape
            elif vec.shape != dim:
                raise InconsistentDim(f"query of shape {vec.shape} among queries of shape {dim}")
            pooled[cid] = np.maximum(pooled[cid], vec) if cid in pooled else vec.copy()
    return pooled


def chunk_positions(t: int, chunk_size: int) -> list[int]:
    """Frame positions of the chunk ending at ``t``, left-padded with frame 0."""
    return [max(0, t - chunk_size + 1 + k) for k in range(chunk_size)]


def chunk_queries(provider: QueryProvider, video: VideoRecord, t: int,
                  variant: Variant | str) -> dict[int, np.ndarray]:
    """Per-class query vectors for the chunk ending at frame position ``t``,
    restricted to the classes present in frame ``t``."""
    variant = Variant(variant)
    frames = provider.chunk(video, chunk_positions(t, provider.chunk_size))
    last = frames[-1]
    if variant is Variant.CATSGG:
        return last
    pooled = pool_chunk_queries(frames)
    return {cid: pooled[cid] for cid in last}


# ---------------------------------------------------------------------------
# prediction


@dataclass
class GateTrace:
    """Instrumentation for the existence gate; filled in by :func:`predict`."""

    n_pairs: int = 0
    n_classified: int = 0
    labelled_existence: list[float] = field(default_factory=list)


def _stack(proposals: Sequence[PairProposal], dim: int) -> np.ndarray:
    if not proposals:
        return np.zeros((0, 2 * dim))
    emb = np.stack([p.embedding for p in proposals])
    if emb.shape[1] != 2 * dim:
        raise DimensionMismatch(f"pair embeddings have width {emb.shape[1]}, heads expect {2 * dim}")
    return emb


@torch.no_grad()
def predict(heads: RelHeads, proposals: Sequence[PairProposal],
            trace: GateTrace | None = None) -> list[PairPrediction]:
    """Gate every pair, classify only pairs with existence >= tau_e."""
    emb = _stack(proposals, heads.dim)
    dtype = next(heads.parameters()).dtype
    x = torch.as_tensor(emb, dtype=dtype)
    was_training = heads.training
    heads.eval()
    e = torch.sigmoid(heads.existence_logits(x)) if len(x) else torch.zeros(0, dtype=dtype)
    gate = e >= heads.tau_e
    labels: list[frozenset[int]] = [frozenset()] * len(proposals)
    idx = torch.nonzero(gate).flatten()
    if len(idx):
        c = torch.sigmoid(heads.classification_logits(x[idx]))
        on = (c >= heads.tau_c).numpy()
        for row, i in enumerate(idx.tolist()):
            labels[i] = frozenset(int(k) for k in np.flatnonzero(on[row]))
    heads.train(was_training)
    if trace is not None:
        trace.n_pairs += len(proposals)
        trace.n_classified += len(idx)
        trace.labelled_existence.extend(float(e[i]) for i, lab in enumerate(labels) if lab)
    return [PairPrediction(p, float(e[i]), labels[i]) for i, p in enumerate(proposals)]


def _frame_with_predictions(frame: FrameSceneGraph, preds: Sequence[PairPrediction],
                            onto: Ontology) -> FrameSceneGraph:
    sem = [p.id for p in onto.semantic_predicates]
    inst = {e.class_id: e.instance_id for e in frame.entities}
    rels = []
    for p in preds:
        for k in sorted(p.labels):
            rels.append(RelationInstance(inst[p.pair.subject_class], inst[p.pair.object_class], sem[k]))
    return frame.replace(relations=tuple(rels))


def infer_frame(heads: RelHeads, provider: QueryProvider, video: VideoRecord, t: int,
                variant: Variant | str = Variant.CATSGG, ontology: Ontology | None = None,
                trace: GateTrace | None = None) -> FrameSceneGraph:
    """Scene graph for frame position ``t`` holding predicted semantic relations only."""
    onto = ontology or default_ontology()
    proposals = build_pair_proposals(chunk_queries(provider, video, t, variant), onto)
    return _frame_with_predictions(video.frames[t], predict(heads, proposals, trace), onto)


def infer_video(heads: RelHeads, provider: QueryProvider, video: VideoRecord,
                variant: Variant | str = Variant.CATSGG, ontology: Ontology | None = None,
                trace: GateTrace | None = None) -> list[FrameSceneGraph]:
    """:func:`infer_frame` for every frame, batched into one forward pass."""
    onto = ontology or default_ontology()
    per_frame = [build_pair_proposals(chunk_queries(provider, video, t, variant), onto)
                 for t in range(len(video.frames))]
    flat = [p for props in per_frame for p in props]
    preds = predict(heads, flat, trace)
    out, i = [], 0
    for t, props in enumerate(per_frame):
        out.append(_frame_with_predictions(video.frames[t], preds[i:i + len(props)], onto))
        i += len(props)
    return out


def predict_video_graphs(heads: RelHeads, provider: QueryProvider, video: VideoRecord,
                         variant: Variant | str = Variant.CATSGG, gap: int = 0,
                         ontology: Ontology | None = None,
                         trace: GateTrace | None = None) -> VideoRecord:
    """Full predicted scene graphs: semantic relations from the heads plus close_to from masks."""
    onto = ontology or default_ontology()
    frames = []
    for f in infer_video(heads, provider, video, variant, onto, trace):
        frames.append(f.replace(relations=f.relations + tuple(infer_close_to(f, gap, onto))))
    return replace(video, frames=tuple(frames))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    chunks_per_video: int = 18
    chunk_size: int = 8
    epochs: int = 100
    lr: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"
    batch_size: int = 128
    seed: int = 0
    variant: str = Variant.CATSGG.value
    hidden: tuple[int, int, int] = (512, 512, 256)
    tau_e: float = 0.5
    tau_c: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def sample_training_chunks(video: VideoRecord, config: TrainConfig, rng: np.random.Generator,
                           ontology: Ontology | None = None) -> list[range]:
    """Chunk ranges whose last frame has at least one ground-truth semantic relation."""
    onto = ontology or default_ontology()
    c = config.chunk_size
    if len(video.frames) < c:
        raise NoQualifyingChunk(f"video {video.video_id} is shorter than one chunk")
    sem = onto.semantic_ids
    ends = [t for t in range(c - 1, len(video.frames))
            if any(r.predicate in sem for r in video.frames[t].relations)]
    if not ends:
        raise NoQualifyingChunk(f"video {video.video_id} has no frame with a semantic relation")
    replace = len(ends) < config.chunks_per_video
    picks = rng.choice(len(ends), size=config.chunks_per_video, replace=replace)
    return [range(ends[i] - c + 1, ends[i] + 1) for i in picks]


def pair_targets(frame: FrameSceneGraph, proposals: Sequence[PairProposal],
                 onto: Ontology) -> np.ndarray:
    """Multi-hot semantic targets (n_pairs x 7) for proposals of ``frame``."""
    slot = {p.id: k for k, p in enumerate(onto.semantic_predicates)}
    cls = {e.instance_id: e.class_id for e in frame.entities}
    by_pair: dict[tuple[int, int], list[int]] = {}
    for r in frame.relations:
        if r.predicate in slot:
            by_pair.setdefault((cls[r.subject], cls[r.object]), []).append(slot[r.predicate])
    y = np.zeros((len(proposals), len(slot)))
    for i, p in enumerate(proposals):
        for k in by_pair.get((p.subject_class, p.object_class), ()):
            y[i, k] = 1.0
    return y


def head_losses(heads: RelHeads, x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Existence BCE over all pairs and classification BCE over relation-bearing pairs."""
    exists = (y.sum(dim=1) > 0).to(x.dtype)
    loss_e = nn.functional.binary_cross_entropy_with_logits(heads.existence_logits(x), exists)
    pos = exists > 0
    if pos.any():
        loss_c = nn.functional.binary_cross_entropy_with_logits(
            heads.classification_logits(x[pos]), y[pos])
    else:
        loss_c = x.new_zeros(())
    return loss_e, loss_c


def _epoch_pairs(provider, videos, config, rng, onto) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for video in videos:
        try:
            chunks = sample_training_chunks(video, config, rng, onto)
        except NoQualifyingChunk as exc:
            log.warning("skipping video: %s", exc)
            continue
        for ch in chunks:
            t = ch[-1]
            props = build_pair_proposals(chunk_queries(provider, video, t, config.variant), onto)
            if not props:
                continue
            xs.append(np.stack([p.embedding for p in props]))
            ys.append(pair_targets(video.frames[t], props, onto))
    if not xs:
        raise EmptyDataset("no training pairs could be sampled")
    return np.concatenate(xs), np.concatenate(ys)


def make_heads(dim: int, config: TrainConfig, ontology: Ontology | None = None) -> RelHeads:
    onto = ontology or default_ontology()
    torch.manual_seed(config.seed)
    return RelHeads(dim, *config.hidden, n_predicates=len(onto.semantic_predicates),
                    tau_e=config.tau_e, tau_c=config.tau_c)


def train(heads: RelHeads, provider: QueryProvider, dataset: Sequence[VideoRecord],
          config: TrainConfig, ontology: Ontology | None = None) -> tuple[RelHeads, TrainingLog]:
    """Optimise both heads with binary cross-entropy on freshly sampled chunks each epoch."""
    onto = ontology or default_ontology()
    if not dataset:
        raise EmptyDataset("train() needs at least one video")
    if provider.chunk_size != config.chunk_size:
        raise DimensionMismatch(
            f"provider chunk size {provider.chunk_size} != config chunk size {config.chunk_size}")
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    params = list(heads.parameters())
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    elif config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.lr)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    dtype = params[0].dtype
    history = TrainingLog()
    heads.train()
    for epoch in range(config.epochs):
        x_np, y_np = _epoch_pairs(provider, dataset, config, rng, onto)
        x = torch.as_tensor(x_np, dtype=dtype)
        y = torch.as_tensor(y_np, dtype=dtype)
        order = torch.randperm(len(x), generator=gen)
        tot_e = tot_c = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss_e, loss_c = head_losses(heads, x[idx], y[idx])
            loss = loss_e + loss_c
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"epoch {epoch}, batch at {start}: existence loss {loss_e.item()}, "
                    f"classification loss {loss_c.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(idx)
            tot_e += loss_e.item() * n
            tot_c += loss_c.item() * n
        entry = {"epoch": epoch, "pairs": len(x), "loss_existence": tot_e / len(x),
                 "loss_classification": tot_c / len(x)}
        entry["loss"] = entry["loss_existence"] + entry["loss_classification"]
        history.epochs.append(entry)
        log.info("epoch %d: loss %.5f (existence %.5f, classification %.5f)", epoch,
                 entry["loss"], entry["loss_existence"], entry["loss_classification"])
    return heads, history


# ---------------------------------------------------------------------------
# persistence


def save_heads(path: str | Path, heads: RelHeads, config: TrainConfig, ontology: Ontology,
               extra: dict | None = None) -> None:
    params = {k: v.detach().cpu().numpy() for k, v in heads.state_dict().items()}
    save_checkpoint(path, CHECKPOINT_KIND, params, ontology.fingerprint,
                    {"train": config.to_dict(), "heads": heads.spec()},
                    {"thresholds": {"existence": heads.tau_e, "classification": heads.tau_c},
                     **(extra or {})})


def load_heads(path: str | Path, ontology: Ontology) -> tuple[RelHeads, dict]:
    header, params = load_checkpoint(path, CHECKPOINT_KIND, ontology.fingerprint)
    heads = RelHeads(**header["config"]["heads"])
    heads.load_state_dict({k: torch.as_tensor(v) for k, v in params.items()})
    return heads, header


def fingerprint(config: TrainConfig) -> str:
    return config_fingerprint(config.to_dict())

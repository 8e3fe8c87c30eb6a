"""Command-line entry points.

Commands::

    catsg generate   --out DATA [--seed N] [--config FILE]
    catsg train-rel  --data DATA [--out RUNS] [--variant catsgg|catsgg+]
    catsg eval-rel   --checkpoint RUN [--data DATA] [--save-graphs DIR]
    catsg train-task --data DATA --task phase|technique --window PRESET [--no-spatial] [--graphs DIR]
    catsg eval-task  --checkpoint RUN [--data DATA] [--graphs DIR]

``--data`` defaults to ``$CATSG_DATA_DIR``. Training commands write to
``<out>/<kind>-<config hash>/`` and never overwrite an existing run.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or data error,
4 checkpoint fingerprint mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import downstream, relnet
from .checkpoint import config_fingerprint
from .dynamicgraph import WINDOW_PRESETS, window_preset
from .errors import CatsgError, ConfigError, FingerprintMismatch, InvalidWindow
from .evaluation import evaluate_relations
from .ontology import Ontology, load_ontology
from .scenegraph import VideoRecord, dataset_stats, read_dataset, write_dataset
from .synthdata import SimConfig, SyntheticQueryProvider, generate, load_external_queries

log = logging.getLogger("catsg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FINGERPRINT = 0, 2, 3, 4


class UsageError(CatsgError):
    pass


@dataclass
class RunConfig:
    """Everything a command needs, resolved before it starts and saved next to its outputs."""

    command: str
    seed: int = 42
    ontology: str | None = None
    data: str | None = None
    sim: dict = field(default_factory=dict)
    rel: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    test_fraction: float = 0.3
    queries: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())


def stage_seed(root: int, stage: str) -> int:
    """Independent per-stage seed derived from the root seed."""
    return int(np.random.SeedSequence([root, zlib.crc32(stage.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# helpers


def _dump(path: Path, obj, sort_keys: bool = True) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=sort_keys) + "\n")


def _read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(doc) - {"seed", "ontology", "sim", "rel", "task", "test_fraction"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    return doc


def _base_config(args, command: str) -> RunConfig:
    doc = _read_config_file(getattr(args, "config", None))
    cfg = RunConfig(command=command,
                    seed=doc.get("seed", 42),
                    ontology=doc.get("ontology"),
                    sim=dict(doc.get("sim", {})),
                    rel=dict(doc.get("rel", {})),
                    task=dict(doc.get("task", {})),
                    test_fraction=doc.get("test_fraction", 0.3))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "ontology", None):
        cfg.ontology = args.ontology
    return cfg


def _ontology(path: str | None) -> Ontology:
    return load_ontology(path)


def _data_root(args) -> Path:
    root = getattr(args, "data", None) or os.environ.get("CATSG_DATA_DIR")
    if not root:
        raise UsageError("no dataset given: pass --data or set CATSG_DATA_DIR")
    return Path(root)


def _videos_dir(root: Path) -> Path:
    return root / "videos" if (root / "videos").is_dir() else root


def _load_videos(root: Path, onto: Ontology) -> list[VideoRecord]:
    return read_dataset(_videos_dir(root), onto)


def _sim_config(root: Path) -> SimConfig:
    path = root / "config.json"
    if not path.exists():
        return SimConfig()
    return SimConfig.from_dict(json.loads(path.read_text())["sim"])


def _new_run_dir(out: Path, kind: str, cfg: RunConfig) -> Path:
    run = out / f"{kind}-{cfg.fingerprint()}"
    if run.exists():
        raise FileExistsError(f"run directory {run} already exists; refusing to overwrite")
    run.mkdir(parents=True)
    return run


def _checkpoint_file(path: str, name: str) -> Path:
    p = Path(path)
    return p / name if p.is_dir() else p


def _split(videos, cfg: RunConfig):
    return downstream.split_videos(videos, cfg.test_fraction, stage_seed(cfg.seed, "split"))


def _by_ids(videos, ids) -> list[VideoRecord]:
    table = {v.video_id: v for v in videos}
    missing = [i for i in ids if i not in table]
    if missing:
        raise FileNotFoundError(f"videos missing from dataset: {missing}")
    return [table[i] for i in ids]


def _provider(cfg: RunConfig, sim: SimConfig, onto: Ontology, noise: float | None):
    if cfg.queries:
        return load_external_queries(cfg.queries, chunk_size=cfg.rel.get("chunk_size", sim.chunk_size))
    return SyntheticQueryProvider(sim, onto, noise=noise)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _base_config(args, "generate")
    sim = SimConfig.from_dict({**cfg.sim, "seed": cfg.seed})
    onto = _ontology(cfg.ontology)
    sim.validate(onto)
    cfg.sim = sim.to_dict()
    out = Path(args.out)
    snapshot = out / "config.json"
    if snapshot.exists() and json.loads(snapshot.read_text()) != json.loads(json.dumps(cfg.to_dict())):
        raise FileExistsError(f"{out} holds a dataset generated with a different config")
    videos = generate(sim, onto)
    write_dataset(videos, out / "videos")
    _dump(out / "stats.json", dataset_stats(videos, onto).to_dict(), sort_keys=False)
    _dump(snapshot, cfg.to_dict())
    print(f"wrote {len(videos)} videos to {out}")
    return EXIT_OK


def cmd_train_rel(args) -> int:
    cfg = _base_config(args, "train-rel")
    root = _data_root(args)
    cfg.data = str(root)
    cfg.queries = args.queries
    rel = {**cfg.rel, "seed": stage_seed(cfg.seed, "rel")}
    if args.variant:
        rel["variant"] = args.variant
    if args.epochs is not None:
        rel["epochs"] = args.epochs
    if args.noise is not None:
        rel["noise"] = args.noise
    noise = rel.pop("noise", None)
    train_cfg = relnet.TrainConfig.from_dict(rel)
    cfg.rel = {**train_cfg.to_dict(), "noise": noise}
    onto = _ontology(cfg.ontology)
    sim = _sim_config(root)
    cfg.sim = sim.to_dict()
    videos = _load_videos(root, onto)
    train_v, test_v = _split(videos, cfg)
    provider = _provider(cfg, sim, onto, noise)
    run = _new_run_dir(Path(args.out), "rel", cfg)
    heads = relnet.make_heads(provider.dim, train_cfg, onto)
    heads, history = relnet.train(heads, provider, train_v, train_cfg, onto)
    split = {"train": [v.video_id for v in train_v], "test": [v.video_id for v in test_v]}
    relnet.save_heads(run / "heads.npz", heads, train_cfg, onto,
                      {"split": split, "noise": noise, "run": cfg.to_dict()})
    _dump(run / "losses.json", history.epochs)
    _dump(run / "split.json", split)
    _dump(run / "config.json", cfg.to_dict())
    print(run)
    return EXIT_OK


def cmd_eval_rel(args) -> int:
    ckpt = _checkpoint_file(args.checkpoint, "heads.npz")
    onto = _ontology(args.ontology)
    heads, header = relnet.load_heads(ckpt, onto)
    cfg = RunConfig(**header["run"])
    root = Path(args.data) if args.data else Path(cfg.data) if cfg.data else _data_root(args)
    sim = _sim_config(root)
    videos = _load_videos(root, onto)
    test_v = _by_ids(videos, header["split"]["test"])
    variant = args.variant or header["config"]["train"]["variant"]
    provider = _provider(cfg, sim, onto, header.get("noise"))
    trace = relnet.GateTrace()
    targets = videos if args.save_graphs else test_v
    predicted = {v.video_id: relnet.predict_video_graphs(heads, provider, v, variant, sim.close_gap, onto, trace)
                 for v in targets}
    pred_frames = [f for v in test_v for f in predicted[v.video_id].frames]
    gt_frames = [f for v in test_v for f in v.frames]
    report = evaluate_relations(pred_frames, gt_frames, onto)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / f"report-{variant}.json", report.to_dict(), sort_keys=False)
    (out / f"report-{variant}.txt").write_text(report.to_table() + "\n")
    if args.save_graphs:
        gdir = Path(args.save_graphs)
        write_dataset(predicted.values(), gdir)
        _dump(gdir / "split.json", header["split"])
    print(report.to_table())
    return EXIT_OK


def _task_videos(args, root: Path | None, onto: Ontology) -> list[VideoRecord]:
    if args.graphs:
        return read_dataset(Path(args.graphs), onto, check_masks=False)
    return _load_videos(root, onto)


def cmd_train_task(args) -> int:
    cfg = _base_config(args, "train-task")
    root = None if args.graphs and not (args.data or os.environ.get("CATSG_DATA_DIR")) else _data_root(args)
    cfg.data = str(root) if root else None
    task = dict(cfg.task)
    task["task"] = args.task or task.get("task", "phase")
    preset = args.window or task.pop("window_preset", None) or ("w30s90" if task["task"] == "phase" else "10s@5fps")
    task["window"] = asdict(window_preset(preset, spatial=not args.no_spatial))
    task["seed"] = stage_seed(cfg.seed, "task")
    if args.epochs is not None:
        task["epochs"] = args.epochs
    task_cfg = downstream.TaskConfig.from_dict(task)
    cfg.task = {**task_cfg.to_dict(), "window_preset": preset, "graphs": args.graphs}
    onto = _ontology(cfg.ontology)
    videos = _task_videos(args, root, onto)
    train_v, test_v = _split(videos, cfg)
    downstream.check_split(train_v, test_v)
    run = _new_run_dir(Path(args.out), f"{task_cfg.task}", cfg)
    model, history = downstream.train_task(train_v, task_cfg, test_v, onto)
    split = {"train": [v.video_id for v in train_v], "test": [v.video_id for v in test_v]}
    downstream.save_model(run / "model.npz", model, task_cfg, onto, {"split": split, "run": cfg.to_dict()})
    _dump(run / "log.json", history.epochs)
    _dump(run / "split.json", split)
    _dump(run / "config.json", cfg.to_dict())
    print(run)
    return EXIT_OK


def cmd_eval_task(args) -> int:
    ckpt = _checkpoint_file(args.checkpoint, "model.npz")
    onto = _ontology(args.ontology)
    model, task_cfg, header = downstream.load_model(ckpt, onto)
    run_cfg = header["run"]
    if not args.graphs and run_cfg["task"].get("graphs"):
        args.graphs = run_cfg["task"]["graphs"]
    root = Path(args.data) if args.data else Path(run_cfg["data"]) if run_cfg.get("data") else None
    if root is None and not args.graphs:
        root = _data_root(args)
    videos = _task_videos(args, root, onto)
    result = downstream.evaluate_task(model, _by_ids(videos, header["split"]["test"]), task_cfg, onto)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "report.json", result.to_dict(), sort_keys=False)
    text = "per window\n" + result.window_report.to_table()
    if result.video_report is not None:
        text += "\n\nper video (majority vote)\n" + result.video_report.to_table()
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catsg", description="Dynamic surgical scene graph pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--ontology", help="ontology JSON (default: packaged)")
        if seed:
            sp.add_argument("--seed", type=int, help="root seed (default 42)")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True, help="dataset directory")
    g.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train-rel", help="train the relation heads")
    common(tr)
    tr.add_argument("--data", help="dataset directory (default $CATSG_DATA_DIR)")
    tr.add_argument("--out", default="runs", help="root for run directories")
    tr.add_argument("--variant", choices=[v.value for v in relnet.Variant])
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--noise", type=float, help="override query noise sigma")
    tr.add_argument("--queries", help="external query JSONL instead of synthetic queries")
    tr.set_defaults(func=cmd_train_rel)

    er = sub.add_parser("eval-rel", help="evaluate relation heads on the held-out split")
    common(er, seed=False)
    er.add_argument("--checkpoint", required=True, help="run directory or heads.npz")
    er.add_argument("--data")
    er.add_argument("--out", help="report directory (default: the run directory)")
    er.add_argument("--variant", choices=[v.value for v in relnet.Variant])
    er.add_argument("--save-graphs", help="also write predicted graphs for every video here")
    er.set_defaults(func=cmd_eval_rel)

    tt = sub.add_parser("train-task", help="train a phase or technique classifier")
    common(tt)
    tt.add_argument("--data")
    tt.add_argument("--out", default="runs")
    tt.add_argument("--task", choices=["phase", "technique"])
    tt.add_argument("--window", choices=sorted(WINDOW_PRESETS))
    tt.add_argument("--no-spatial", action="store_true", help="class one-hot node features only")
    tt.add_argument("--graphs", help="train on these (predicted) graphs instead of the ground truth")
    tt.add_argument("--epochs", type=int)
    tt.set_defaults(func=cmd_train_task)

    et = sub.add_parser("eval-task", help="evaluate a phase or technique classifier")
    common(et, seed=False)
    et.add_argument("--checkpoint", required=True, help="run directory or model.npz")
    et.add_argument("--data")
    et.add_argument("--graphs")
    et.add_argument("--out")
    et.set_defaults(func=cmd_eval_task)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FingerprintMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (UsageError, ConfigError, InvalidWindow) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CatsgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Versioned checkpoint container shared by the relation heads and graph classifiers.

A checkpoint is a ``.npz`` archive holding flat parameter arrays plus a JSON
header (``__header__``) with the kind, format version, parameter shapes, the
ontology fingerprint, and the producing config with its fingerprint.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FingerprintMismatch, SchemaError

CHECKPOINT_VERSION = 1


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, kind: str, params: dict[str, np.ndarray],
                    ontology_fingerprint: str, config: dict, extra: dict | None = None) -> None:
    header = {
        "kind": kind,
        "version": CHECKPOINT_VERSION,
        "ontology_fingerprint": ontology_fingerprint,
        "config": config,
        "config_fingerprint": config_fingerprint(config),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        **(extra or {}),
    }
    arrays = {f"param/{k}": np.ascontiguousarray(v) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path, kind: str,
                    ontology_fingerprint: str | None = None) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Return ``(header, params)``; refuses other kinds, versions or ontologies."""
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data:
            raise SchemaError(f"{path}: not a checkpoint")
        header = json.loads(str(data["__header__"]))
        params = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("param/")}
    if header.get("kind") != kind:
        raise SchemaError(f"{path}: checkpoint kind {header.get('kind')!r}, expected {kind!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {header.get('version')}")
    for name, shape in header["shapes"].items():
        if list(params[name].shape) != shape:
            raise SchemaError(f"{path}: parameter {name} has shape {params[name].shape}, header says {shape}")
    if ontology_fingerprint is not None and header["ontology_fingerprint"] != ontology_fingerprint:
        raise FingerprintMismatch(
            f"{path}: checkpoint ontology {header['ontology_fingerprint']} "
            f"!= loaded ontology {ontology_fingerprint}")
    if config_fingerprint(header["config"]) != header["config_fingerprint"]:
        raise FingerprintMismatch(f"{path}: stored config does not match its fingerprint")
    return header, params

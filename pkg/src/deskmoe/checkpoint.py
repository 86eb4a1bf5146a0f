"""Checkpoint directories: ``manifest.json`` + one ``tensors.bin`` blob.

The manifest holds the format version, configs, step, RNG state and an index
of ``name -> (offset, nbytes, shape)`` into the blob. Each blob record uses
the float32 tensor serialization of :mod:`deskmoe.core.serialize`, so a
float32 model round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core.serialize import read_tensor, write_tensor
from .errors import CheckpointError, StorageError

FORMAT = "deskmoe-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


@dataclass
class Checkpoint:
    step: int
    model_config: dict
    params: dict[str, np.ndarray]
    train_config: dict = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _groups(ck: Checkpoint):
    yield "param", ck.params
    yield "adam_m", ck.adam_m
    yield "adam_v", ck.adam_v


def save_checkpoint(path: str | Path, ck: Checkpoint) -> Path:
    """Write atomically: a temporary sibling directory is renamed into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        index = []
        buf = io.BytesIO()
        for group, tensors in _groups(ck):
            for name, arr in tensors.items():
                offset = buf.tell()
                nbytes = write_tensor(buf, arr)
                index.append({"group": group, "name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": nbytes})
        blob = buf.getvalue()
        (tmp / BLOB).write_bytes(blob)
        manifest = {
            "format": FORMAT,
            "version": VERSION,
            "step": int(ck.step),
            "model_config": ck.model_config,
            "train_config": ck.train_config,
            "rng_state": ck.rng_state,
            "extra": ck.extra,
            "blob_sha256": hashlib.sha256(blob).hexdigest(),
            "tensors": index,
        }
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}") from e
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise CheckpointError(f"{path} is not a checkpoint (no {MANIFEST})", "pass a checkpoint directory") from e
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint manifest in {path}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} has format {manifest.get('format')!r}, expected {FORMAT!r}")
    if manifest.get("version") != VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} is not supported (this build reads version {VERSION})"
        )
    return manifest


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / BLOB).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path / BLOB}: {e}") from e
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path / BLOB} does not match its manifest checksum")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in manifest["tensors"]:
        f = io.BytesIO(blob[entry["offset"] : entry["offset"] + entry["nbytes"]])
        arr = read_tensor(f)
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"tensor {entry['name']} has shape {arr.shape}, index says {entry['shape']}")
        groups[entry["group"]][entry["name"]] = arr
    return Checkpoint(
        step=manifest["step"],
        model_config=manifest["model_config"],
        params=groups["param"],
        train_config=manifest.get("train_config", {}),
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        rng_state=manifest.get("rng_state"),
        extra=manifest.get("extra", {}),
    )


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    ck_dir = Path(run_dir) / "checkpoints"
    if not ck_dir.is_dir():
        return None
    found = sorted(p for p in ck_dir.glob("step_*") if (p / MANIFEST).is_file())
    return found[-1] if found else None

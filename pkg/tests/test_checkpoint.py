import json

import numpy as np
import pytest

from deskmoe.checkpoint import Checkpoint, latest_checkpoint, load_checkpoint, read_manifest, save_checkpoint
from deskmoe.errors import CheckpointError


def _ck(rng, step=7):
    params = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=(5,)).astype(np.float32)}
    return Checkpoint(
        step=step,
        model_config={"model_dim": 4},
        params=params,
        train_config={"lr_peak": 0.1},
        adam_m={n: np.full_like(a, 0.5) for n, a in params.items()},
        adam_v={n: np.full_like(a, 0.25) for n, a in params.items()},
        rng_state={"seed": 3},
        extra={"note": "x"},
    )


def test_round_trip_is_bit_exact(tmp_path, rng):
    ck = _ck(rng)
    save_checkpoint(tmp_path / "ck", ck)
    back = load_checkpoint(tmp_path / "ck")
    assert back.step == 7 and back.model_config == ck.model_config and back.train_config == ck.train_config
    assert back.rng_state == ck.rng_state and back.extra == ck.extra
    for group in ("params", "adam_m", "adam_v"):
        a, b = getattr(ck, group), getattr(back, group)
        assert set(a) == set(b)
        for n in a:
            assert a[n].tobytes() == b[n].tobytes()


def test_overwrite_leaves_no_temporary(tmp_path, rng):
    save_checkpoint(tmp_path / "ck", _ck(rng, 1))
    save_checkpoint(tmp_path / "ck", _ck(rng, 2))
    assert load_checkpoint(tmp_path / "ck").step == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]


def test_corrupt_blob_is_detected(tmp_path, rng):
    path = save_checkpoint(tmp_path / "ck", _ck(rng))
    blob = bytearray((path / "tensors.bin").read_bytes())
    blob[20] ^= 0xFF
    (path / "tensors.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_version_and_format_checks(tmp_path, rng):
    path = save_checkpoint(tmp_path / "ck", _ck(rng))
    m = json.loads((path / "manifest.json").read_text())
    m["version"] = 99
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="version"):
        read_manifest(path)
    m["version"], m["format"] = 1, "other"
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="format"):
        read_manifest(path)
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "missing")


def test_latest_checkpoint(tmp_path, rng):
    assert latest_checkpoint(tmp_path) is None
    for s in (100, 20, 300):
        save_checkpoint(tmp_path / "checkpoints" / f"step_{s:06d}", _ck(rng, s))
    (tmp_path / "checkpoints" / "step_999999").mkdir()  # incomplete: no manifest
    assert latest_checkpoint(tmp_path).name == "step_000300"

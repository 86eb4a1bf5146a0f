"""Paired-run comparison reports: merged loss curves (CSV) and a summary table (CSV + JSON)."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .config import RunConfig, diff
from .errors import ConfigError, StorageError
from .presets import families
from .train import read_metrics

SCALARS = ("ce", "lb", "rz", "total", "lr", "grad_norm")
CONVENTIONS = {
    "load_balancing_f": "assignments to expert i / (tokens x k); sums to 1",
    "load_balancing_P": "mean softmax probability of expert i over tokens",
    "cross_layer_reduction": "mean over MoE layers (per_layer) or pooled counts (model_level)",
    "router_z_loss": "mean over tokens of logsumexp(logits)^2, mean over MoE layers",
    "precision": "auxiliary losses accumulated in float64",
}


def load_run(run_dir: str | Path) -> tuple[RunConfig, list[dict]]:
    run_dir = Path(run_dir)
    cfg_path, metrics_path = run_dir / "effective_config.yaml", run_dir / "metrics.jsonl"
    if not cfg_path.is_file() or not metrics_path.is_file():
        raise StorageError(f"{run_dir} is not a finished run (need effective_config.yaml and metrics.jsonl)")
    cfg = RunConfig.from_dict(yaml.safe_load(cfg_path.read_text(encoding="utf-8")))
    return cfg, read_metrics(metrics_path)


def _tail_mean(records: list[dict], metric: str, fraction: float = 0.1) -> float | None:
    vals = [r["value"] for r in records if r["metric"] == metric]
    if not vals:
        return None
    n = max(1, int(round(len(vals) * fraction)))
    return float(np.mean(vals[-n:]))


def _max_assignment(records: list[dict], layer: int = 0) -> float | None:
    vals = [r["value"] for r in records if r["metric"] == f"assignment_fraction/layer_{layer}"]
    return float(max(vals[-1])) if vals else None


def summarize(run_dir: str | Path) -> dict:
    cfg, records = load_run(run_dir)
    first_ce = next((r["value"] for r in records if r["metric"] == "ce"), None)
    return {
        "run": str(run_dir),
        "preset": cfg.preset,
        "seed": cfg.seed,
        "steps": max((r["step"] for r in records), default=0),
        "initial_ce": first_ce,
        "final_ce": _tail_mean(records, "ce"),
        "final_lb": _tail_mean(records, "lb"),
        "final_rz": _tail_mean(records, "rz"),
        "layer0_max_assignment": _max_assignment(records),
    }


def compare_runs(run_dirs: Sequence[str | Path], out_dir: str | Path) -> dict:
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = [(Path(d), *load_run(d)) for d in run_dirs]
    with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["run", "preset", "step", "metric", "value"])
        for d, cfg, records in loaded:
            for r in records:
                if r["metric"] in SCALARS:
                    w.writerow([d.name, cfg.preset or "", r["step"], r["metric"], r["value"]])
    summary = [summarize(d) for d, _, _ in loaded]
    base_cfg = loaded[0][1]
    for row, (_, cfg, _) in zip(summary, loaded):
        row["differs_from_first"] = {k: list(v) for k, v in diff(base_cfg, cfg).items()}
    cols = ["run", "preset", "seed", "steps", "initial_ce", "final_ce", "final_lb", "final_rz", "layer0_max_assignment"]
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in summary:
            w.writerow(["" if row[c] is None else row[c] for c in cols])
    payload = {"runs": summary, "loss_conventions": CONVENTIONS}
    (out_dir / "summary.json").write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    return payload


def family_runs(family: str, root: str | Path) -> list[Path]:
    fams = families()
    if family not in fams:
        raise ConfigError(f"unknown preset family {family!r}", f"choose from {sorted(fams)}")
    runs = [Path(root) / name for name in fams[family] if (Path(root) / name / "metrics.jsonl").is_file()]
    if not runs:
        raise StorageError(f"no runs of family {family!r} under {root}", "train them with --out ROOT/<preset>")
    return runs

"""Single-process training: AdamW, warmup + cosine + linear anneal, global clipping.

Every update is a deterministic function of (configs, seed, step), so a run
resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, latest_checkpoint, load_checkpoint, save_checkpoint
from .core.rng import RngStreams
from .core.tensor import Tape, Tensor, parameter
from .data import Batch, BatchPlan
from .errors import ConfigError, NumericAbort, ParameterError
from .losses import LossBreakdown, objective
from .model import ModelConfig, Params, init_model, lm_loss
from .moe import RoutingDecision

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 3e-3
    lr_min: float = 3e-4
    warmup_steps: int = 50
    total_steps: int = 500
    anneal_steps: int = 50
    batch_size: int = 8  # sequences per batch
    seq_len: int = 129  # tokens per sequence; the model predicts seq_len - 1 of them
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    alpha: float = 0.01  # load-balancing loss weight
    beta: float = 0.001  # router z-loss weight
    log_every: int = 10
    checkpoint_every: int = 100
    capture_tokens: int = 4096  # eval tokens routed into a log at every checkpoint (0 = off)
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.warmup_steps < 0 or self.anneal_steps < 0:
            raise ConfigError("warmup_steps and anneal_steps must be >= 0")
        if self.warmup_steps + self.anneal_steps > self.total_steps:
            raise ConfigError(
                f"warmup_steps + anneal_steps = {self.warmup_steps + self.anneal_steps} exceeds total_steps {self.total_steps}"
            )
        if self.eps <= 0:
            raise ConfigError("AdamW eps must be > 0")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha and beta must be >= 0")
        if self.lr_peak < 0 or self.lr_min < 0 or self.lr_min > self.lr_peak:
            raise ConfigError("need 0 <= lr_min <= lr_peak")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")

    @property
    def batch_size_tokens(self) -> int:
        return self.batch_size * (self.seq_len - 1)

    @property
    def anneal_fraction(self) -> float:
        return self.anneal_steps / self.total_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak``, cosine to ``lr_min`` until the anneal phase, then linear to 0."""
    if not 0 <= step <= cfg.total_steps:
        raise ParameterError(f"step {step} outside [0, {cfg.total_steps}]")
    w, a, T = cfg.warmup_steps, cfg.anneal_steps, cfg.total_steps
    if step < w:
        return cfg.lr_peak * step / w
    cos_end = T - a
    if step <= cos_end:
        span = cos_end - w
        if span == 0:
            return cfg.lr_peak
        progress = (step - w) / span
        return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))
    start = cfg.lr_min if cos_end > w else cfg.lr_peak
    return start * (T - step) / a


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()}, {n: np.zeros_like(p.data) for n, p in params.items()})


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[float, float]:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns ``(pre-clip norm, scale applied)``.
    """
    if max_norm <= 0:
        raise ParameterError("max_norm must be > 0")
    total = math.sqrt(sum(float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64))) for g in grads.values()))
    scale = 1.0 if total <= max_norm else max_norm / total
    if scale != 1.0:
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total, scale


def adamw_step(params: Params, grads: dict[str, np.ndarray], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Decoupled weight decay on every parameter, then the bias-corrected Adam update."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay:
            p.data *= p.dtype.type(1.0 - lr * cfg.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= (lr * update).astype(p.dtype)


@dataclass
class StepResult:
    breakdown: LossBreakdown
    grad_norm: float
    clip_scale: float
    routings: list[RoutingDecision]


def train_step(params: Params, cfg: ModelConfig, tcfg: TrainConfig, tokens: np.ndarray, state: AdamState, lr: float) -> StepResult:
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        ce, _, routings = lm_loss(params, cfg, tokens)
        total, breakdown = objective(ce, routings, tcfg.alpha, tcfg.beta, cfg.lbl_level)
    if not math.isfinite(breakdown.total):
        raise NumericAbort(f"non-finite loss {breakdown.total} (ce={breakdown.ce})")
    tape.backward(total)
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient in parameter {name!r}")
    norm, scale = clip_global_norm(grads, tcfg.grad_clip_norm)
    adamw_step(params, grads, state, lr, tcfg)
    return StepResult(breakdown, norm, scale, routings)


def assignment_fractions(routings: Sequence[RoutingDecision]) -> list[list[float]]:
    return [r.assignment_fractions.tolist() for r in routings]


class MetricsWriter:
    """Append-only ``{step, metric, value}`` lines."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "a", encoding="utf-8")

    def write(self, step: int, metric: str, value) -> None:
        self._f.write(json.dumps({"step": step, "metric": metric, "value": value}) + "\n")

    def flush(self) -> None:
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def truncate_metrics(path: Path, after_step: int) -> None:
    """Drop records logged after ``after_step`` (left behind by an interrupted run)."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln and json.loads(ln)["step"] <= after_step]
    path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(ln) for ln in f if ln.strip()]


@dataclass
class TrainResult:
    params: Params
    step: int
    run_dir: Path
    checkpoints: list[Path] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def checkpoint_path(run_dir: Path, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:06d}"


def params_from_arrays(arrays: dict[str, np.ndarray]) -> Params:
    return {n: parameter(np.array(a, dtype=np.float32), name=n) for n, a in arrays.items()}


def train(
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    plan: BatchPlan,
    run_dir: str | Path,
    init_params: Params | None = None,
    eval_batches: Sequence[Batch] | None = None,
    resume: bool = True,
    stop_after: int | None = None,
    extra: dict | None = None,
    domains: Sequence[str] = (),
) -> TrainResult:
    """Run (or resume) training for ``tcfg.total_steps`` updates.

    ``stop_after`` ends the run early (after writing a checkpoint at that
    step); used to exercise resumption.
    """
    from .analysis import capture  # analysis depends on the model, not on training

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if len(plan) < tcfg.total_steps:
        raise ConfigError(f"batch plan has {len(plan)} batches but total_steps is {tcfg.total_steps}")
    metrics_path = run_dir / "metrics.jsonl"
    rng = RngStreams(tcfg.seed)
    start = 0
    ck_path = latest_checkpoint(run_dir) if resume else None
    if ck_path is not None:
        ck = load_checkpoint(ck_path)
        if ck.model_config != model_cfg.to_dict() or ck.train_config != tcfg.to_dict():
            raise ConfigError(f"checkpoint {ck_path} was written by a different configuration", "use a fresh --out directory")
        params = params_from_arrays(ck.params)
        state = AdamState({n: a.copy() for n, a in ck.adam_m.items()}, {n: a.copy() for n, a in ck.adam_v.items()}, ck.step)
        if ck.rng_state:
            rng = RngStreams.from_state(ck.rng_state)
        start = ck.step
        truncate_metrics(metrics_path, start)
        log.info("resumed from %s at step %d", ck_path, start)
    else:
        if metrics_path.exists():
            metrics_path.unlink()
        params = init_params if init_params is not None else init_model(model_cfg, tcfg.seed)
        params = params_from_arrays({n: p.data for n, p in params.items()})
        state = AdamState.zeros(params)

    writer = MetricsWriter(metrics_path)
    result = TrainResult(params, start, run_dir)
    last_ck = str(ck_path) if ck_path is not None else None
    end = tcfg.total_steps if stop_after is None else min(stop_after, tcfg.total_steps)

    def save(step: int) -> None:
        nonlocal last_ck
        path = checkpoint_path(run_dir, step)
        save_checkpoint(
            path,
            Checkpoint(
                step=step,
                model_config=model_cfg.to_dict(),
                params={n: p.data for n, p in params.items()},
                train_config=tcfg.to_dict(),
                adam_m=state.m,
                adam_v=state.v,
                rng_state=rng.state_dict(),
                extra=extra or {},
            ),
        )
        last_ck = str(path)
        result.checkpoints.append(path)
        if eval_batches and tcfg.capture_tokens > 0:
            capture(params, model_cfg, eval_batches, run_dir / "routing" / f"step_{step:06d}.jsonl", step=step,
                    max_tokens=tcfg.capture_tokens, domains=domains)

    try:
        t_last, last_logged = time.perf_counter(), start
        for step in range(start + 1, end + 1):
            batch = plan.batch(step - 1)
            lr = lr_at(step, tcfg)
            try:
                res = train_step(params, model_cfg, tcfg, batch.tokens, state, lr)
            except NumericAbort as e:
                raise NumericAbort(f"step {step}: {e.args[0]}", last_ck) from e
            if step % tcfg.log_every == 0 or step in (1, tcfg.total_steps):
                now = time.perf_counter()
                n_steps = step - last_logged
                b = res.breakdown
                rec = {"ce": b.ce, "lb": b.lb, "rz": b.rz, "total": b.total, "lr": lr, "grad_norm": res.grad_norm, "clip_scale": res.clip_scale}
                for k, v in rec.items():
                    writer.write(step, k, v)
                writer.write(step, "tokens_per_sec", n_steps * tcfg.batch_size_tokens / max(now - t_last, 1e-9))
                for l, frac in enumerate(assignment_fractions(res.routings)):
                    writer.write(step, f"assignment_fraction/layer_{l}", frac)
                writer.flush()
                result.history.append({"step": step, **rec})
                t_last, last_logged = now, step
            if step % tcfg.checkpoint_every == 0 or step == end:
                save(step)
            result.step = step
    finally:
        writer.close()
    return result

"""Glue between a RunConfig and the trainer: data loading, upcycling, run-directory lock."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .checkpoint import load_checkpoint, latest_checkpoint
from .config import UPCYCLE, RunConfig, data_root, write_effective
from .core.ops import cross_entropy
from .core.tensor import Tensor
from .data import BatchPlan, Batch, Corpus, TokenStream, concat, ingest, sequential_batches, split_eval
from .errors import ConfigError, StorageError
from .model import ModelConfig, Params, forward, upcycle
from .train import TrainResult, params_from_arrays, train

log = logging.getLogger(__name__)


@dataclass
class RunData:
    corpus: Corpus
    train: TokenStream
    eval: TokenStream


def load_data(cfg: RunConfig) -> RunData:
    corpus = ingest(data_root(cfg))
    if not corpus:
        raise ConfigError(f"no documents under {data_root(cfg)}")
    tr, ev = split_eval(corpus, cfg.data.eval_fraction)
    train_stream, eval_stream = concat(tr), concat(ev)
    if len(eval_stream) < cfg.train.seq_len:
        eval_stream = train_stream  # tiny corpora: evaluate on training text rather than fail
        log.warning("held-out split shorter than one sequence; evaluating on the training stream")
    return RunData(corpus, train_stream, eval_stream)


def batch_plan(cfg: RunConfig, stream: TokenStream, steps: int | None = None, name: str = "data") -> BatchPlan:
    t = cfg.train
    n = steps or t.total_steps
    return BatchPlan(stream, t.seq_len, t.batch_size, n_batches=n, anneal_fraction=t.anneal_steps / t.total_steps, seed=t.seed, name=name)


def eval_batches(cfg: RunConfig, data: RunData, max_tokens: int | None = None) -> list[Batch]:
    return sequential_batches(data.eval, cfg.train.seq_len, cfg.train.batch_size, max_tokens)


def dense_source_config(model: ModelConfig) -> ModelConfig:
    """Dense model whose FFN width equals the expert width, as upcycling requires."""
    return model.replace(ffn_type="dense", lbl_level="per_layer", layer_shared_moe=False)


def dense_source_train(cfg: RunConfig):
    t, n = cfg.train, cfg.init.dense_steps
    return t.replace(
        total_steps=n,
        warmup_steps=min(t.warmup_steps, n // 4),
        anneal_steps=min(t.anneal_steps, n // 4),
        checkpoint_every=n,
        capture_tokens=0,
    )


def initial_params(cfg: RunConfig, data: RunData, run_dir: Path) -> Params | None:
    if cfg.init.checkpoint:
        ck = load_checkpoint(cfg.init.checkpoint)
        if ck.model_config != cfg.model.to_dict():
            raise ConfigError(f"init checkpoint {cfg.init.checkpoint} was built for a different model config")
        return params_from_arrays(ck.params)
    if cfg.init.source != UPCYCLE:
        return None
    dense_cfg = dense_source_config(cfg.model)
    dense_tcfg = dense_source_train(cfg)
    plan = batch_plan(replace(cfg, train=dense_tcfg), data.train, name="dense-source")
    res = train(dense_cfg, dense_tcfg, plan, run_dir / "dense_source")
    return upcycle(res.params, dense_cfg, cfg.model, cfg.init.noise_fraction, cfg.seed)


def run_lock(run_dir: Path) -> FileLock:
    run_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(run_dir / ".lock"), timeout=0)


def run_training(cfg: RunConfig, run_dir: str | Path, resume: bool = True, stop_after: int | None = None) -> TrainResult:
    run_dir = Path(run_dir)
    lock = run_lock(run_dir)
    try:
        lock.acquire()
    except Timeout:
        raise StorageError(f"run directory {run_dir} is locked by another process") from None
    try:
        write_effective(cfg, run_dir)
        data = load_data(cfg)
        init = None
        if latest_checkpoint(run_dir) is None or not resume:
            init = initial_params(cfg, data, run_dir)
        plan = batch_plan(cfg, data.train)
        ev = eval_batches(cfg, data) if cfg.model.is_moe else None
        return train(
            cfg.model, cfg.train, plan, run_dir, init_params=init, eval_batches=ev, resume=resume,
            stop_after=stop_after, extra={"preset": cfg.preset, "dropped_tokens": plan.dropped_tokens},
            domains=data.corpus.domains,
        )
    finally:
        lock.release()


def evaluate(params: Params, cfg: ModelConfig, batches: list[Batch]) -> dict:
    """Token-weighted held-out cross-entropy and perplexity."""
    total, count = 0.0, 0
    for b in batches:
        tokens = np.asarray(b.tokens)
        logits, _ = forward(params, cfg, tokens[:, :-1])
        B, S, V = logits.shape
        ce = cross_entropy(Tensor(logits.data.reshape(B * S, V)), tokens[:, 1:].reshape(-1))
        total += float(ce.data) * B * S
        count += B * S
    ce = total / max(count, 1)
    return {"ce": ce, "ppl": math.exp(ce), "tokens": count}


def evaluate_checkpoint(path: str | Path, cfg: RunConfig, max_tokens: int | None = None) -> dict:
    ck = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(ck.model_config)
    data = load_data(cfg)
    res = evaluate(params_from_arrays(ck.params), model_cfg, eval_batches(cfg, data, max_tokens))
    res["step"] = ck.step
    res["checkpoint"] = str(path)
    return res


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path

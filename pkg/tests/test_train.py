import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskmoe.checkpoint import load_checkpoint
from deskmoe.core import parameter
from deskmoe.data import BatchPlan, Document, concat
from deskmoe.errors import ConfigError, NumericAbort, ParameterError
from deskmoe.model import ModelConfig, init_model
from deskmoe.train import (
    AdamState,
    TrainConfig,
    adamw_step,
    clip_global_norm,
    lr_at,
    params_from_arrays,
    read_metrics,
    train,
    train_step,
)

TINY = ModelConfig(model_dim=16, n_layers=2, n_heads=2, vocab_size=259, max_seq_len=32, ffn_dim=8, n_experts=4, n_active=2)


def tiny_train(**kw):
    base = dict(total_steps=20, warmup_steps=4, anneal_steps=4, batch_size=2, seq_len=17, log_every=5, checkpoint_every=10, capture_tokens=0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_stream():
    rng = np.random.default_rng(0)
    words = [b"alpha ", b"beta ", b"gamma ", b"delta ", b"def f(x):\n", b"return x\n"]
    docs = [Document(b"".join(rng.choice(words, size=30)), i % 2, str(i)) for i in range(12)]
    return concat(docs)


def tiny_plan(tcfg, stream=None):
    return BatchPlan(stream or tiny_stream(), tcfg.seq_len, tcfg.batch_size, n_batches=tcfg.total_steps,
                     anneal_fraction=tcfg.anneal_fraction, seed=tcfg.seed)


# ---------------------------------------------------------------- config and schedule


@pytest.mark.parametrize(
    "kw",
    [dict(warmup_steps=300, anneal_steps=300), dict(eps=0.0), dict(grad_clip_norm=0.0), dict(alpha=-1.0),
     dict(lr_min=1.0), dict(total_steps=0)],
)
def test_train_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_train_config_round_trip():
    t = tiny_train()
    assert TrainConfig.from_dict(t.to_dict()) == t
    assert t.batch_size_tokens == 2 * 16


def test_lr_schedule_examples():
    t = TrainConfig()
    assert lr_at(0, t) == 0.0
    assert lr_at(t.warmup_steps, t) == pytest.approx(t.lr_peak)
    assert lr_at(t.total_steps - t.anneal_steps, t) == pytest.approx(t.lr_min)
    assert lr_at(t.total_steps, t) == 0.0
    with pytest.raises(ParameterError):
        lr_at(t.total_steps + 1, t)
    with pytest.raises(ParameterError):
        lr_at(-1, t)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(1, 300))
def test_lr_schedule_continuity(w, a, extra):
    t = TrainConfig(warmup_steps=w, anneal_steps=a, total_steps=w + a + extra, lr_peak=1.0, lr_min=0.1)

    def lr(s):
        return lr_at(s, t)

    # each segment's endpoint value equals the next segment's starting value
    if w > 0:
        assert lr(w) == pytest.approx(t.lr_peak, abs=1e-9)
    if a > 0:
        end = t.total_steps - a
        start = t.lr_min if end > w else t.lr_peak
        assert lr(end) == pytest.approx(start, abs=1e-9)
        assert lr(end + 1) == pytest.approx(start * (a - 1) / a, abs=1e-9)
    assert all(0.0 <= lr(s) <= 1.0 + 1e-12 for s in range(t.total_steps + 1))


# ---------------------------------------------------------------- optimizer


def _scalar(v):
    return {"p": parameter(np.array([v], dtype=np.float64))}


def test_adamw_zero_gradient_no_decay_is_identity():
    params = _scalar(1.5)
    adamw_step(params, {"p": np.zeros(1)}, AdamState.zeros(params), 0.1, TrainConfig(weight_decay=0.0))
    assert params["p"].data[0] == 1.5


def test_adamw_single_step_oracle():
    params = _scalar(1.0)
    t = TrainConfig(weight_decay=0.0, beta1=0.9, beta2=0.95, eps=1e-8)
    adamw_step(params, {"p": np.ones(1)}, AdamState.zeros(params), 0.1, t)
    # m_hat = 1, v_hat = 1 => update = 1 / (1 + eps)
    assert params["p"].data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adamw_pure_decay():
    params = _scalar(2.0)
    adamw_step(params, {"p": np.zeros(1)}, AdamState.zeros(params), 0.1, TrainConfig(weight_decay=0.1))
    assert params["p"].data[0] == pytest.approx(2.0 * (1 - 0.01), abs=1e-12)


def test_adamw_matches_reference_over_several_steps(rng):
    t = TrainConfig(weight_decay=0.1, beta1=0.9, beta2=0.95, eps=1e-8)
    w0 = rng.normal(size=5)
    params = {"p": parameter(w0.copy())}
    state = AdamState.zeros(params)
    p, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for step in range(1, 6):
        g = rng.normal(size=5)
        adamw_step(params, {"p": g.copy()}, state, 0.01, t)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        p = p * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.95**step)) + 1e-8)
    np.testing.assert_allclose(params["p"].data, p, rtol=1e-12)


def test_adamw_non_finite_gradient_names_parameter():
    params = _scalar(1.0)
    with pytest.raises(NumericAbort, match="'p'"):
        adamw_step(params, {"p": np.array([np.nan])}, AdamState.zeros(params), 0.1, TrainConfig())


def test_clip_examples():
    g = {"a": np.array([0.3, 0.4])}
    assert clip_global_norm(g, 1.0) == (pytest.approx(0.5), 1.0)
    g = {"a": np.array([0.0, 4.0])}
    norm, scale = clip_global_norm(g, 1.0)
    assert (norm, scale) == (pytest.approx(4.0), pytest.approx(0.25))
    assert np.linalg.norm(g["a"]) == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        clip_global_norm(g, 0.0)


@given(st.integers(0, 2**31), st.floats(0.01, 10.0))
def test_clip_post_norm_bounded(seed, max_norm):
    rng = np.random.default_rng(seed)
    g = {"a": rng.normal(size=(3, 4)) * 5, "b": rng.normal(size=7)}
    clip_global_norm(g, max_norm)
    total = math.sqrt(sum(float((x**2).sum()) for x in g.values()))
    assert total <= max_norm + 1e-6


# ---------------------------------------------------------------- training loop


def test_train_step_reduces_loss_on_repeated_batch():
    params = init_model(TINY, 0)
    t = tiny_train()
    state = AdamState.zeros(params)
    tokens = tiny_plan(t).batch(0).tokens
    first = train_step(params, TINY, t, tokens, state, 3e-3).breakdown
    for _ in range(10):
        last = train_step(params, TINY, t, tokens, state, 3e-3).breakdown
    assert last.ce < first.ce
    assert first.total == pytest.approx(first.ce + t.alpha * first.lb + t.beta * first.rz, rel=1e-9)


def test_train_writes_metrics_and_checkpoints(tmp_path):
    t = tiny_train()
    res = train(TINY, t, tiny_plan(t), tmp_path)
    assert res.step == 20
    assert [p.name for p in res.checkpoints] == ["step_000010", "step_000020"]
    recs = read_metrics(tmp_path / "metrics.jsonl")
    steps = sorted({r["step"] for r in recs})
    assert steps == [1, 5, 10, 15, 20]
    names = {r["metric"] for r in recs}
    assert {"ce", "lb", "rz", "total", "lr", "grad_norm", "tokens_per_sec", "assignment_fraction/layer_0", "assignment_fraction/layer_1"} <= names
    frac = next(r["value"] for r in recs if r["metric"] == "assignment_fraction/layer_0")
    assert len(frac) == 4 and sum(frac) == pytest.approx(1.0)
    ck = load_checkpoint(res.checkpoints[-1])
    assert ck.rng_state is not None and ck.train_config == t.to_dict()


def test_resume_is_bit_identical(tmp_path):
    t = tiny_train()
    straight = train(TINY, t, tiny_plan(t), tmp_path / "a")
    train(TINY, t, tiny_plan(t), tmp_path / "b", stop_after=10)
    resumed = train(TINY, t, tiny_plan(t), tmp_path / "b")
    for n in straight.params:
        assert straight.params[n].data.tobytes() == resumed.params[n].data.tobytes(), n
    drop = lambda recs: [(r["step"], r["metric"], r["value"]) for r in recs if r["metric"] != "tokens_per_sec"]
    assert drop(read_metrics(tmp_path / "a" / "metrics.jsonl")) == drop(read_metrics(tmp_path / "b" / "metrics.jsonl"))


def test_checkpoint_round_trip_then_one_step_matches(tmp_path):
    t = tiny_train()
    train(TINY, t, tiny_plan(t), tmp_path, stop_after=10)
    ck = load_checkpoint(tmp_path / "checkpoints" / "step_000010")
    tokens = tiny_plan(t).batch(10).tokens

    def one_step():
        params = params_from_arrays(ck.params)
        state = AdamState({n: a.copy() for n, a in ck.adam_m.items()}, {n: a.copy() for n, a in ck.adam_v.items()}, ck.step)
        train_step(params, TINY, t, tokens, state, lr_at(11, t))
        return params

    a, b = one_step(), one_step()
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)


def test_resume_rejects_changed_config(tmp_path):
    t = tiny_train()
    train(TINY, t, tiny_plan(t), tmp_path, stop_after=10)
    t2 = t.replace(alpha=0.0)
    with pytest.raises(ConfigError):
        train(TINY, t2, tiny_plan(t2), tmp_path)


def test_plan_shorter_than_run(tmp_path):
    t = tiny_train()
    short = BatchPlan(tiny_stream(), t.seq_len, t.batch_size, n_batches=5)
    with pytest.raises(ConfigError):
        train(TINY, t, short, tmp_path)


def test_nan_aborts_with_last_checkpoint(tmp_path):
    t = tiny_train()
    train(TINY, t, tiny_plan(t), tmp_path, stop_after=10)
    ck = load_checkpoint(tmp_path / "checkpoints" / "step_000010")
    ck.params["head"][:] = np.nan
    from deskmoe.checkpoint import save_checkpoint

    save_checkpoint(tmp_path / "checkpoints" / "step_000010", ck)
    with pytest.raises(NumericAbort) as info:
        train(TINY, t, tiny_plan(t), tmp_path)
    assert info.value.exit_code == 3
    assert "step_000010" in str(info.value.last_checkpoint)


def test_dense_model_trains(tmp_path):
    cfg = TINY.replace(ffn_type="dense")
    t = tiny_train()
    res = train(cfg, t, tiny_plan(t), tmp_path)
    lb = [r["value"] for r in read_metrics(tmp_path / "metrics.jsonl") if r["metric"] == "lb"]
    assert res.step == 20 and all(v == 0.0 for v in lb)

"""Routing logs and the routing metrics computed from them.

A routing log is line-delimited JSON. The first line is a header::

    {"schema": "deskmoe.routing_log", "version": 1, "fields": [...], "step": ..., "n_layers": ...,
     "n_experts": ..., "k": ..., "routing_mode": ..., "vocab_size": ..., "domains": [...]}

and every following line is one record whose keys appear in exactly the
``RECORD_FIELDS`` order. Records are token-major: all layers of token 0,
then all layers of token 1, and so on. A record costs roughly 120 bytes
with ``k=4``, so 10^5 tokens over 4 layers is about 50 MB.

Every metric is a single-pass fold over records (``*Accumulator`` classes);
zero denominators produce NaN (reported as missing), never 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .data import Batch
from .errors import AlignmentError, ParameterError, SchemaError, StorageError
from .model import ModelConfig, Params, forward
from .moe import TOKEN_CHOICE, RoutingDecision

LOG_SCHEMA = "deskmoe.routing_log"
LOG_VERSION = 1
RECORD_FIELDS = (
    "step",
    "layer",
    "token_index",
    "token_id",
    "target_id",
    "predicted_id",
    "domain_id",
    "expert_ids",
    "probs",
)
VOCAB_VARIANTS = {"input": "token_id", "output_predicted": "predicted_id", "output_target": "target_id"}
DEFAULT_MIN_COUNT = 8


class RoutingLogRecord(NamedTuple):
    step: int
    layer: int
    token_index: int
    token_id: int
    target_id: int | None
    predicted_id: int | None
    domain_id: int
    expert_ids: tuple[int, ...]
    probs: tuple[float, ...]

    def to_json(self) -> str:
        d = dict(zip(RECORD_FIELDS, self))
        d["expert_ids"] = list(self.expert_ids)
        d["probs"] = [round(float(p), 7) for p in self.probs]
        return json.dumps(d, separators=(",", ":"))


def make_header(step: int, n_layers: int, n_experts: int, k: int, routing_mode: str = TOKEN_CHOICE,
                vocab_size: int = 259, domains: Sequence[str] = (), model_config: dict | None = None) -> dict:
    return {
        "schema": LOG_SCHEMA,
        "version": LOG_VERSION,
        "fields": list(RECORD_FIELDS),
        "step": int(step),
        "n_layers": int(n_layers),
        "n_experts": int(n_experts),
        "k": int(k),
        "routing_mode": routing_mode,
        "vocab_size": int(vocab_size),
        "domains": list(domains),
        "model_config": model_config or {},
    }


def write_log(path: str | Path, header: dict, records: Iterable[RoutingLogRecord]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for r in records:
                f.write(r.to_json() + "\n")
    except OSError as e:
        raise StorageError(f"cannot write routing log {path}: {e}") from e
    return path


def _check_header(header: dict, path) -> dict:
    if header.get("schema") != LOG_SCHEMA:
        raise SchemaError(f"{path}: not a routing log (schema {header.get('schema')!r})")
    if header.get("version") != LOG_VERSION:
        raise SchemaError(f"{path}: routing log version {header.get('version')} unsupported (expected {LOG_VERSION})")
    if tuple(header.get("fields", ())) != RECORD_FIELDS:
        raise SchemaError(f"{path}: record fields {header.get('fields')} differ from {list(RECORD_FIELDS)}")
    return header


def read_header(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            first = f.readline()
    except OSError as e:
        raise StorageError(f"cannot read routing log {path}: {e}") from e
    try:
        return _check_header(json.loads(first), path)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed header: {e}") from e


def iter_records(path: str | Path) -> Iterator[RoutingLogRecord]:
    read_header(path)
    with open(path, encoding="utf-8") as f:
        f.readline()
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: malformed record: {e}") from e
            if tuple(d) != RECORD_FIELDS:
                raise SchemaError(f"{path}:{lineno}: record keys {list(d)} differ from the schema")
            d["expert_ids"] = tuple(d["expert_ids"])
            d["probs"] = tuple(d["probs"])
            yield RoutingLogRecord(**d)


class RoutingLog:
    """A header plus its records, either in memory or streamed from a file."""

    def __init__(self, header: dict, records: Sequence[RoutingLogRecord] | None = None, path: Path | None = None):
        self.header = header
        self._records = records
        self.path = path

    @classmethod
    def open(cls, path: str | Path) -> "RoutingLog":
        return cls(read_header(path), path=Path(path))

    def __iter__(self) -> Iterator[RoutingLogRecord]:
        if self._records is not None:
            return iter(self._records)
        return iter_records(self.path)

    @property
    def n_layers(self) -> int:
        return self.header["n_layers"]

    @property
    def n_experts(self) -> int:
        return self.header["n_experts"]

    @property
    def k(self) -> int:
        return self.header["k"]


def _as_log(log) -> RoutingLog:
    if isinstance(log, RoutingLog):
        return log
    return RoutingLog.open(log)


# ---------------------------------------------------------------- capture


def _token_experts(decision: RoutingDecision, t: int, probs: np.ndarray) -> np.ndarray:
    if decision.mode == TOKEN_CHOICE:
        return decision.expert_ids[t]
    ids = np.sort(decision.experts_of_token(t))
    return ids[np.argsort(-probs[t, ids], kind="stable")]


def capture_records(params: Params, cfg: ModelConfig, batches: Sequence[Batch], step: int, max_tokens: int | None = None) -> Iterator[RoutingLogRecord]:
    """Route held-out batches through the model; one record per (token, layer)."""
    offset = 0
    for batch in batches:
        tokens = np.asarray(batch.tokens)
        inputs, targets = tokens[:, :-1], tokens[:, 1:]
        domains = np.asarray(batch.domains)[:, :-1]
        logits, routings = forward(params, cfg, inputs)
        predicted = logits.data.argmax(axis=-1)
        n = inputs.size
        if max_tokens is not None:
            n = min(n, max_tokens - offset)
        if n <= 0:
            break
        flat_in, flat_tg = inputs.reshape(-1), targets.reshape(-1)
        flat_pr, flat_dm = predicted.reshape(-1), domains.reshape(-1)
        probs = [r.probs.data for r in routings]
        for t in range(n):
            for l, decision in enumerate(routings):
                ids = _token_experts(decision, t, probs[l])
                yield RoutingLogRecord(
                    step, l, offset + t, int(flat_in[t]), int(flat_tg[t]), int(flat_pr[t]), int(flat_dm[t]),
                    tuple(int(e) for e in ids), tuple(float(probs[l][t, e]) for e in ids),
                )
        offset += n
        if max_tokens is not None and offset >= max_tokens:
            break


def capture(params: Params, cfg: ModelConfig, batches: Sequence[Batch], out: str | Path, step: int,
            max_tokens: int | None = None, domains: Sequence[str] = ()) -> Path:
    if not cfg.is_moe:
        raise SchemaError("a dense model has no routing to capture")
    header = make_header(step, cfg.n_layers, cfg.n_experts, cfg.n_active, cfg.routing_mode, cfg.vocab_size, domains, cfg.to_dict())
    return write_log(out, header, capture_records(params, cfg, batches, step, max_tokens))


# ---------------------------------------------------------------- metrics


def _top(rec: RoutingLogRecord, k_eval: int | None) -> tuple[int, ...]:
    return rec.expert_ids if k_eval is None else rec.expert_ids[:k_eval]


def _check_k(k_eval: int, k: int) -> None:
    if not 1 <= k_eval <= k:
        raise ParameterError(f"k_eval={k_eval} must lie in [1, {k}]")


class SaturationAccumulator:
    def __init__(self, n_layers: int, k_eval: int):
        self.k_eval = k_eval
        self.overlap = np.zeros(n_layers)
        self.count = np.zeros(n_layers, dtype=np.int64)

    def add(self, rec_t: RoutingLogRecord, rec_T: RoutingLogRecord) -> None:
        if (rec_t.layer, rec_t.token_index, rec_t.token_id) != (rec_T.layer, rec_T.token_index, rec_T.token_id):
            raise AlignmentError(
                f"logs diverge at token {rec_t.token_index} layer {rec_t.layer}: "
                f"(layer {rec_T.layer}, token {rec_T.token_index}, id {rec_T.token_id}) vs id {rec_t.token_id}",
                "capture both checkpoints over the same evaluation stream",
            )
        a, b = set(_top(rec_t, self.k_eval)), set(_top(rec_T, self.k_eval))
        self.overlap[rec_t.layer] += len(a & b) / self.k_eval
        self.count[rec_t.layer] += 1

    def result(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.overlap / np.maximum(self.count, 1), np.nan)


def router_saturation(log_t, log_T, k_eval: int) -> np.ndarray:
    """Per-layer mean of ``|experts_t ∩ experts_T| / k_eval`` over identical tokens."""
    log_t, log_T = _as_log(log_t), _as_log(log_T)
    if (log_t.n_layers, log_t.n_experts) != (log_T.n_layers, log_T.n_experts):
        raise AlignmentError("the two logs come from differently shaped models")
    _check_k(k_eval, min(log_t.k, log_T.k))
    acc = SaturationAccumulator(log_t.n_layers, k_eval)
    it_T = iter(log_T)
    for rec in log_t:
        other = next(it_T, None)
        if other is None:
            raise AlignmentError("the final-checkpoint log is shorter than the intermediate one")
        acc.add(rec, other)
    if next(it_T, None) is not None:
        raise AlignmentError("the final-checkpoint log is longer than the intermediate one")
    return acc.result()


class CoactivationAccumulator:
    """Per layer: ``counts[i, j]`` = tokens whose expert set holds both i and j; diagonal = activations."""

    def __init__(self, n_layers: int, n_experts: int, k_eval: int | None = None):
        self.k_eval = k_eval
        self.counts = np.zeros((n_layers, n_experts, n_experts), dtype=np.int64)

    def add(self, rec: RoutingLogRecord) -> None:
        ids = np.asarray(_top(rec, self.k_eval), dtype=np.int64)
        self.counts[rec.layer][np.ix_(ids, ids)] += 1

    def ratio(self, layer: int) -> np.ndarray:
        c = self.counts[layer].astype(np.float64)
        n = np.diag(c)[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, c / np.where(n > 0, n, 1), np.nan)


@dataclass
class Coactivation:
    layer: int
    counts: np.ndarray  # symmetric [N_E, N_E]; diagonal holds N_{E_i}
    ratio: np.ndarray  # ratio[i, j] = counts[i, j] / counts[i, i]; NaN rows for unused experts


def coactivation(log, layer: int, k_eval: int | None = None) -> Coactivation:
    log = _as_log(log)
    if not 0 <= layer < log.n_layers:
        raise ParameterError(f"layer {layer} outside [0, {log.n_layers})")
    acc = CoactivationAccumulator(log.n_layers, log.n_experts, k_eval)
    seen = False
    for rec in log:
        if rec.layer == layer:
            acc.add(rec)
            seen = True
    if not seen:
        raise ParameterError(f"log has no records for layer {layer}")
    return Coactivation(layer, acc.counts[layer].copy(), acc.ratio(layer))


class DomainAccumulator:
    def __init__(self, n_layers: int, n_experts: int, k_eval: int, n_domains: int = 0):
        self.k_eval = k_eval
        self.n_ed = np.zeros((n_layers, n_experts, n_domains), dtype=np.int64)
        self.n_d = np.zeros((n_layers, n_domains), dtype=np.int64)

    def _grow(self, d: int) -> None:
        extra = d + 1 - self.n_d.shape[1]
        if extra > 0:
            self.n_ed = np.pad(self.n_ed, ((0, 0), (0, 0), (0, extra)))
            self.n_d = np.pad(self.n_d, ((0, 0), (0, extra)))

    def add(self, rec: RoutingLogRecord) -> None:
        self._grow(rec.domain_id)
        self.n_d[rec.layer, rec.domain_id] += 1
        for e in _top(rec, self.k_eval):
            self.n_ed[rec.layer, e, rec.domain_id] += 1

    def result(self) -> np.ndarray:
        """``[layer, expert, domain]`` specialization; NaN for domains with no tokens."""
        d = self.n_d[:, None, :].astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(d > 0, self.n_ed / np.where(d > 0, d, 1), np.nan)


def domain_specialization(log, k_eval: int) -> np.ndarray:
    log = _as_log(log)
    _check_k(k_eval, log.k)
    acc = DomainAccumulator(log.n_layers, log.n_experts, k_eval, len(log.header.get("domains", ())))
    for rec in log:
        acc.add(rec)
    return acc.result()


@dataclass
class VocabSpecialization:
    variant: str
    k_eval: int
    min_count: int
    spec: np.ndarray  # [layer, token_id, expert]; NaN for ids below min_count
    token_counts: np.ndarray  # [layer, token_id]
    per_expert: np.ndarray  # [layer, expert]; occurrence-weighted mean over eligible ids
    per_layer: np.ndarray  # [layer]; mean of per_expert over experts that saw eligible tokens


class VocabAccumulator:
    def __init__(self, n_layers: int, n_experts: int, vocab_size: int, k_eval: int, variant: str):
        if variant not in VOCAB_VARIANTS:
            raise SchemaError(f"unknown vocabulary variant {variant!r}; choose from {sorted(VOCAB_VARIANTS)}")
        self.k_eval = k_eval
        self.variant = variant
        self.field = VOCAB_VARIANTS[variant]
        self.n_xe = np.zeros((n_layers, vocab_size, n_experts), dtype=np.int64)
        self.n_x = np.zeros((n_layers, vocab_size), dtype=np.int64)

    def add(self, rec: RoutingLogRecord) -> None:
        x = getattr(rec, self.field)
        if x is None:
            raise SchemaError(f"record at token {rec.token_index} has no {self.field}; variant {self.variant!r} unavailable")
        self.n_x[rec.layer, x] += 1
        for e in _top(rec, self.k_eval):
            self.n_xe[rec.layer, x, e] += 1

    def result(self, min_count: int = DEFAULT_MIN_COUNT) -> VocabSpecialization:
        if min_count < 1:
            raise ParameterError("min_count must be >= 1")
        eligible = self.n_x >= min_count
        n_x = np.where(eligible, self.n_x, 1)[:, :, None].astype(np.float64)
        spec = np.where(eligible[:, :, None], self.n_xe / n_x, np.nan)
        weights = np.where(eligible[:, :, None], self.n_xe, 0).astype(np.float64)
        w_sum = weights.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_expert = np.where(w_sum > 0, (weights * np.nan_to_num(spec)).sum(axis=1) / np.where(w_sum > 0, w_sum, 1), np.nan)
        per_layer = np.array([np.nanmean(row) if np.any(~np.isnan(row)) else np.nan for row in per_expert])
        return VocabSpecialization(self.variant, self.k_eval, min_count, spec, self.n_x.copy(), per_expert, per_layer)


def vocab_specialization(log, k_eval: int, variant: str = "input", min_count: int = DEFAULT_MIN_COUNT) -> VocabSpecialization:
    log = _as_log(log)
    _check_k(k_eval, log.k)
    if VOCAB_VARIANTS.get(variant, variant) not in log.header.get("fields", ()):
        raise SchemaError(f"variant {variant!r} is not available in this log")
    acc = VocabAccumulator(log.n_layers, log.n_experts, log.header.get("vocab_size", 259), k_eval, variant)
    for rec in log:
        acc.add(rec)
    return acc.result(min_count)


@dataclass
class AssignmentCurves:
    steps: np.ndarray  # [n_intervals]
    fractions: np.ndarray  # [layer, interval, expert]; each row sums to 1
    dead: np.ndarray  # [layer, expert]
    dead_threshold: float


def _curves_from_logs(logs: Sequence) -> tuple[list[int], list[np.ndarray]]:
    steps, rows = [], []
    for item in logs:
        log = _as_log(item)
        counts = np.zeros((log.n_layers, log.n_experts))
        for rec in log:
            for e in rec.expert_ids:
                counts[rec.layer, e] += 1
        steps.append(log.header["step"])
        rows.append(counts / np.maximum(counts.sum(axis=1, keepdims=True), 1))
    return steps, rows


def _curves_from_metrics(records: Iterable[dict]) -> tuple[list[int], list[np.ndarray]]:
    by_step: dict[int, dict[int, list[float]]] = {}
    for r in records:
        m = r["metric"]
        if m.startswith("assignment_fraction/layer_"):
            by_step.setdefault(r["step"], {})[int(m.rsplit("_", 1)[1])] = r["value"]
    steps = sorted(by_step)
    rows = [np.array([by_step[s][l] for l in sorted(by_step[s])]) for s in steps]
    return steps, rows


def assignment_curves(source, dead_factor: float = 0.1) -> AssignmentCurves:
    """Per-expert share of assignments over time, from a metrics file/records or a list of routing logs.

    An expert is flagged dead when its share stays below ``dead_factor``
    times uniform throughout the final quarter of the logged steps.
    """
    if isinstance(source, (str, Path)) and Path(source).suffix == ".jsonl" and Path(source).name.startswith("metrics"):
        with open(source, encoding="utf-8") as f:
            steps, rows = _curves_from_metrics(json.loads(ln) for ln in f if ln.strip())
    elif isinstance(source, (list, tuple)) and source and isinstance(source[0], dict):
        steps, rows = _curves_from_metrics(source)
    else:
        steps, rows = _curves_from_logs(list(source))
    if len(steps) < 2:
        raise ParameterError(f"assignment curves need >= 2 logged intervals, got {len(steps)}")
    order = np.argsort(steps, kind="stable")
    steps_arr = np.asarray(steps)[order]
    fractions = np.stack([rows[i] for i in order], axis=1)  # [layer, interval, expert]
    n_experts = fractions.shape[2]
    threshold = dead_factor / n_experts
    cut = steps_arr[0] + 0.75 * (steps_arr[-1] - steps_arr[0])
    tail = steps_arr >= cut
    dead = np.all(fractions[:, tail, :] < threshold, axis=1)
    return AssignmentCurves(steps_arr, fractions, dead, threshold)


@dataclass
class FlowTable:
    layer_a: int
    layer_b: int
    counts: np.ndarray  # [N_E, N_E]: tokens with top-1 p at layer_a and q at layer_b
    kept_a: np.ndarray  # experts of layer_a above the threshold
    kept_b: np.ndarray
    threshold: float

    def table(self) -> np.ndarray:
        return self.counts[np.ix_(self.kept_a, self.kept_b)]


def cross_layer_flows(log, layer_a: int, layer_b: int, threshold: float = 1.5, domain_id: int | None = None) -> FlowTable:
    """Top-1 expert transitions between two layers.

    Experts are kept when their top-1 share exceeds ``threshold / N_E``;
    ``threshold=1.5`` is "50% above random chance", ``0`` keeps every used expert.
    """
    log = _as_log(log)
    for layer in (layer_a, layer_b):
        if not 0 <= layer < log.n_layers:
            raise ParameterError(f"layer {layer} outside [0, {log.n_layers})")
    E = log.n_experts
    top_a: dict[int, int] = {}
    top_b: dict[int, int] = {}
    for rec in log:
        if domain_id is not None and rec.domain_id != domain_id:
            continue
        if rec.layer == layer_a and rec.expert_ids:
            top_a[rec.token_index] = rec.expert_ids[0]
        if rec.layer == layer_b and rec.expert_ids:
            top_b[rec.token_index] = rec.expert_ids[0]
    counts = np.zeros((E, E), dtype=np.int64)
    for t, p in top_a.items():
        q = top_b.get(t)
        if q is not None:
            counts[p, q] += 1
    total = counts.sum()
    share_a = counts.sum(axis=1) / max(total, 1)
    share_b = counts.sum(axis=0) / max(total, 1)
    limit = threshold / E
    kept_a = np.flatnonzero(share_a > limit)
    kept_b = np.flatnonzero(share_b > limit)
    return FlowTable(layer_a, layer_b, counts, kept_a, kept_b, threshold)


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    metric: str
    axes: list[str]
    rows: list[tuple]  # axis values..., value, count
    baseline: float | None = None
    config: dict = field(default_factory=dict)
    notes: str = ""

    def validate(self) -> None:
        for row in self.rows:
            value, count = row[-2], row[-1]
            if value is not None and not (0.0 <= value <= 1.0 + 1e-12):
                raise SchemaError(f"{self.metric}: ratio {value} outside [0, 1] at {row[:-2]}")
            if count is not None and count < 0:
                raise SchemaError(f"{self.metric}: negative count at {row[:-2]}")

    def write(self, out_dir: str | Path, name: str | None = None) -> tuple[Path, Path]:
        self.validate()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        name = name or self.metric
        csv_path, json_path = out_dir / f"{name}.csv", out_dir / f"{name}.json"
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow([*self.axes, "value", "count"])
            for row in self.rows:
                w.writerow(["" if v is None else v for v in row])
        payload = {
            "metric": self.metric,
            "axes": self.axes,
            "uniform_baseline": self.baseline,
            "config": self.config,
            "notes": self.notes,
            "rows": [dict(zip([*self.axes, "value", "count"], row)) for row in self.rows],
        }
        json_path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
        return csv_path, json_path


def _v(x) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) or (isinstance(x, np.floating) and np.isnan(x)) else float(x)


def saturation_report(values: np.ndarray, k_eval: int, n_experts: int, config: dict | None = None) -> MetricReport:
    rows = [(l, _v(v), None) for l, v in enumerate(values)]
    return MetricReport("router_saturation", ["layer"], rows, k_eval / n_experts, config or {"k_eval": k_eval},
                        "uniform baseline = k_eval / n_experts (independent random routers)")


def coactivation_report(co: Coactivation, config: dict | None = None) -> MetricReport:
    E = co.counts.shape[0]
    rows = [(co.layer, i, j, _v(co.ratio[i, j]), int(co.counts[i, j])) for i in range(E) for j in range(E)]
    return MetricReport("expert_coactivation", ["layer", "expert_i", "expert_j"], rows, None, config or {},
                        "value = N(i and j) / N(i); missing when expert i was never activated")


def domain_report(spec: np.ndarray, k_eval: int, domains: Sequence[str] = (), config: dict | None = None) -> MetricReport:
    L, E, D = spec.shape
    names = [domains[d] if d < len(domains) else str(d) for d in range(D)]
    rows = [(l, e, names[d], _v(spec[l, e, d]), None) for l in range(L) for e in range(E) for d in range(D)]
    return MetricReport("domain_specialization", ["layer", "expert", "domain"], rows, k_eval / E, config or {"k_eval": k_eval},
                        "uniform baseline = k_eval / n_experts; per domain the experts sum to k_eval")


def vocab_report(vs: VocabSpecialization, config: dict | None = None) -> MetricReport:
    L, V, E = vs.spec.shape
    rows = []
    for l in range(L):
        for x in np.flatnonzero(vs.token_counts[l] >= vs.min_count):
            for e in range(E):
                rows.append((l, int(x), e, _v(vs.spec[l, x, e]), int(vs.token_counts[l, x])))
    cfg = {"k_eval": vs.k_eval, "variant": vs.variant, "min_count": vs.min_count,
           "per_layer_mean": [_v(v) for v in vs.per_layer], **(config or {})}
    return MetricReport(f"vocab_specialization_{vs.variant}", ["layer", "token_id", "expert"], rows, vs.k_eval / E, cfg,
                        "token ids with fewer than min_count occurrences are excluded")


def assignment_report(curves: AssignmentCurves, config: dict | None = None) -> MetricReport:
    L, T, E = curves.fractions.shape
    rows = [(l, int(curves.steps[t]), e, float(curves.fractions[l, t, e]), None) for l in range(L) for t in range(T) for e in range(E)]
    cfg = {"dead_threshold": curves.dead_threshold,
           "dead_experts": {str(l): np.flatnonzero(curves.dead[l]).tolist() for l in range(L)}, **(config or {})}
    return MetricReport("assignment_fraction", ["layer", "step", "expert"], rows, 1.0 / E, cfg,
                        "dead = below dead_threshold for the final quarter of logged steps")


def flow_report(ft: FlowTable, config: dict | None = None) -> MetricReport:
    total = max(int(ft.counts.sum()), 1)
    rows = [(ft.layer_a, int(p), ft.layer_b, int(q), ft.counts[p, q] / total, int(ft.counts[p, q])) for p in ft.kept_a for q in ft.kept_b]
    return MetricReport("cross_layer_flow", ["layer_a", "expert_a", "layer_b", "expert_b"], rows, 1.0 / ft.counts.shape[0] ** 2,
                        {"threshold": ft.threshold, **(config or {})}, "value = share of tokens taking this top-1 path")

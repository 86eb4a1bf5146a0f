"""Decoder-only transformer with an MoE (or dense) feed-forward in every layer.

Parameters live in an ordered ``name -> Tensor`` dict so the optimizer and
the checkpoint writer see every parameter exactly once. Layer-shared models
store a single ``moe.*`` group that every layer reuses.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, NamedTuple

import numpy as np

from .core import ops
from .core.rng import stream
from .core.tensor import Tensor, default_dtype, parameter
from .errors import ConfigError, RangeError, ShapeError
from .losses import MODEL_LEVEL, PER_LAYER
from .moe import (
    EXPERT_CHOICE,
    TOKEN_CHOICE,
    ExpertParams,
    FfnParams,
    MoeLayerConfig,
    MoeParams,
    RoutingDecision,
    ffn_forward,
    moe_forward,
    route,
)

Params = dict[str, Tensor]
RoutingOverride = Callable[[int, RoutingDecision], RoutingDecision]


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 259
    max_seq_len: int = 256
    ffn_type: str = "moe"  # "moe" | "dense"
    ffn_dim: int = 64
    n_experts: int = 16
    n_active: int = 4
    routing_mode: str = TOKEN_CHOICE
    capacity_factor: float = 2.0
    shared_experts: int = 0
    norm: str = "rmsnorm"  # "rmsnorm" | "nonparametric"
    norm_eps: float = 1e-5
    qk_norm: bool = True
    rope_theta: float = 10_000.0
    init_dist: str = "truncated_normal"  # "truncated_normal" | "normal"
    init_std: float = 0.02
    init_cutoff: float = 0.06
    layer_shared_moe: bool = False
    lbl_level: str = PER_LAYER

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if (self.model_dim // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.vocab_size < 1 or self.n_layers < 1 or self.max_seq_len < 1:
            raise ConfigError("vocab_size, n_layers and max_seq_len must be >= 1")
        if self.ffn_type not in ("moe", "dense"):
            raise ConfigError(f"unknown ffn_type {self.ffn_type!r}")
        if self.norm not in ("rmsnorm", "nonparametric"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.init_dist not in ("truncated_normal", "normal"):
            raise ConfigError(f"unknown init_dist {self.init_dist!r}")
        if self.init_dist == "truncated_normal" and self.init_cutoff <= 0:
            raise ConfigError("init_cutoff must be > 0")
        if self.lbl_level not in (PER_LAYER, MODEL_LEVEL):
            raise ConfigError(f"unknown lbl_level {self.lbl_level!r}")
        if self.layer_shared_moe and self.lbl_level != MODEL_LEVEL:
            raise ConfigError("layer_shared_moe requires lbl_level = model_level")
        if self.layer_shared_moe and self.ffn_type != "moe":
            raise ConfigError("layer_shared_moe requires ffn_type = moe")
        if self.ffn_type == "moe":
            self.moe_layer  # validates the expert topology

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def is_moe(self) -> bool:
        return self.ffn_type == "moe"

    @property
    def moe_layer(self) -> MoeLayerConfig:
        return MoeLayerConfig(
            n_experts=self.n_experts,
            n_active=self.n_active,
            ffn_dim=self.ffn_dim,
            model_dim=self.model_dim,
            routing_mode=self.routing_mode,
            capacity_factor=self.capacity_factor,
            shared_experts=self.shared_experts,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for ``cfg``."""
    d, f, V, E = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size, cfg.n_experts
    parametric = cfg.norm == "rmsnorm"
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, d)}

    def moe_group(prefix: str):
        shapes[f"{prefix}.router"] = (d, E)
        shapes[f"{prefix}.w_gate"] = (E, d, f)
        shapes[f"{prefix}.w_up"] = (E, d, f)
        shapes[f"{prefix}.w_down"] = (E, f, d)
        if cfg.shared_experts:
            shapes[f"{prefix}.shared.w_gate"] = (d, f)
            shapes[f"{prefix}.shared.w_up"] = (d, f)
            shapes[f"{prefix}.shared.w_down"] = (f, d)

    for l in range(cfg.n_layers):
        p = f"layers.{l}"
        if parametric:
            shapes[f"{p}.attn_norm"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.{w}"] = (d, d)
        if cfg.qk_norm and parametric:
            shapes[f"{p}.q_norm"] = (cfg.head_dim,)
            shapes[f"{p}.k_norm"] = (cfg.head_dim,)
        if parametric:
            shapes[f"{p}.ffn_norm"] = (d,)
        if cfg.is_moe:
            if not cfg.layer_shared_moe:
                moe_group(f"{p}.moe")
        else:
            shapes[f"{p}.ffn.w_gate"] = (d, f)
            shapes[f"{p}.ffn.w_up"] = (d, f)
            shapes[f"{p}.ffn.w_down"] = (f, d)
    if cfg.layer_shared_moe:
        moe_group("moe")
    if parametric:
        shapes["final_norm"] = (d,)
    shapes["head"] = (d, V)
    return shapes


def _is_norm(name: str) -> bool:
    return name.endswith("_norm")


def init_weight(cfg: ModelConfig, shape, rng: np.random.Generator, dtype=None) -> np.ndarray:
    dtype = dtype or default_dtype()
    if cfg.init_dist == "truncated_normal":
        return ops.truncated_normal(shape, cfg.init_std, cfg.init_cutoff, rng, dtype=dtype)
    return rng.normal(0.0, cfg.init_std, size=shape).astype(dtype)


def init_model(cfg: ModelConfig, seed: int) -> Params:
    """Weight matrices from the configured init, norm weights at 1.

    Each parameter draws from its own named stream, so adding or removing a
    parameter never changes the values of the others.
    """
    params: Params = {}
    for name, shape in parameter_shapes(cfg).items():
        if _is_norm(name):
            data = np.ones(shape, dtype=default_dtype())
        else:
            data = init_weight(cfg, shape, stream(seed, "init", name))
        params[name] = parameter(data, name=name)
    return params


def _moe_params(params: Params, prefix: str) -> MoeParams:
    shared = None
    if f"{prefix}.shared.w_gate" in params:
        shared = FfnParams(params[f"{prefix}.shared.w_gate"], params[f"{prefix}.shared.w_up"], params[f"{prefix}.shared.w_down"])
    return MoeParams(
        router=params[f"{prefix}.router"],
        experts=ExpertParams(params[f"{prefix}.w_gate"], params[f"{prefix}.w_up"], params[f"{prefix}.w_down"]),
        shared=shared,
    )


def moe_prefix(cfg: ModelConfig, layer: int) -> str:
    return "moe" if cfg.layer_shared_moe else f"layers.{layer}.moe"


def _norm(cfg: ModelConfig, x: Tensor, weight: Tensor | None) -> Tensor:
    if cfg.norm == "rmsnorm":
        return ops.rmsnorm(x, weight, cfg.norm_eps)
    return ops.layernorm(x, None, cfg.norm_eps)


def attention(cfg: ModelConfig, params: Params, layer: int, h: Tensor) -> Tensor:
    B, S, d = h.shape
    H, Dh = cfg.n_heads, cfg.head_dim
    p = f"layers.{layer}"
    positions = np.arange(S)

    def heads(w: str) -> Tensor:
        return ops.transpose(ops.reshape(ops.matmul(h, params[f"{p}.{w}"]), (B, S, H, Dh)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    if cfg.qk_norm:
        q = _norm(cfg, q, params.get(f"{p}.q_norm"))
        k = _norm(cfg, k, params.get(f"{p}.k_norm"))
    q = ops.rope(q, positions, cfg.rope_theta)
    k = ops.rope(k, positions, cfg.rope_theta)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(Dh))
    o = ops.matmul(ops.causal_softmax(scores), v)
    o = ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (B, S, d))
    return ops.matmul(o, params[f"{p}.wo"])


def forward(
    params: Params,
    cfg: ModelConfig,
    token_ids: np.ndarray,
    routing_override: RoutingOverride | None = None,
) -> tuple[Tensor, list[RoutingDecision]]:
    """Logits ``[B, S, V]`` and one routing decision per MoE layer.

    Pre-norm residual blocks: ``x + attn(norm(x))`` then ``x + ffn(norm(x))``.
    """
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ShapeError(f"token_ids must be [B, S], got shape {ids.shape}")
    B, S = ids.shape
    if S > cfg.max_seq_len:
        raise RangeError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise RangeError(f"token id outside [0, {cfg.vocab_size})")
    d = cfg.model_dim
    x = ops.reshape(ops.gather_rows(params["embed"], ids.reshape(-1)), (B, S, d))
    routings: list[RoutingDecision] = []
    moe_cfg = cfg.moe_layer if cfg.is_moe else None
    for l in range(cfg.n_layers):
        p = f"layers.{l}"
        x = ops.add(x, attention(cfg, params, l, _norm(cfg, x, params.get(f"{p}.attn_norm"))))
        h = ops.reshape(_norm(cfg, x, params.get(f"{p}.ffn_norm")), (B * S, d))
        if cfg.is_moe:
            mp = _moe_params(params, moe_prefix(cfg, l))
            decision = route(h, mp, moe_cfg)
            if routing_override is not None:
                decision = routing_override(l, decision)
            routings.append(decision)
            y = moe_forward(h, moe_cfg, mp, decision)
        else:
            y = ffn_forward(h, FfnParams(params[f"{p}.ffn.w_gate"], params[f"{p}.ffn.w_up"], params[f"{p}.ffn.w_down"]))
        x = ops.add(x, ops.reshape(y, (B, S, d)))
    x = _norm(cfg, x, params.get("final_norm"))
    return ops.matmul(x, params["head"]), routings


def lm_loss(params: Params, cfg: ModelConfig, tokens: np.ndarray, routing_override: RoutingOverride | None = None):
    """Next-token cross-entropy over ``tokens[B, S+1]``; returns ``(ce, logits, routings)``."""
    tokens = np.asarray(tokens)
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    logits, routings = forward(params, cfg, inputs, routing_override)
    B, S, V = logits.shape
    ce = ops.cross_entropy(ops.reshape(logits, (B * S, V)), targets.reshape(-1))
    return ce, logits, routings


def upcycle(dense_params: Params, dense_cfg: ModelConfig, target_cfg: ModelConfig, noise_fraction: float, seed: int) -> Params:
    """Turn a dense checkpoint into an MoE: every expert starts as a copy of its layer's FFN.

    The router is freshly initialised; all other weights are copied verbatim.
    With ``noise_fraction > 0`` that fraction of each expert matrix (chosen
    independently per expert) is replaced by Normal(0, 0.02) draws.
    """
    if dense_cfg.is_moe:
        raise ConfigError("upcycle expects a dense source model")
    if not target_cfg.is_moe or target_cfg.layer_shared_moe:
        raise ConfigError("upcycle target must be a per-layer MoE")
    if not 0.0 <= noise_fraction <= 1.0:
        raise ConfigError(f"noise_fraction must lie in [0, 1], got {noise_fraction}")
    if dense_cfg.ffn_dim != target_cfg.ffn_dim:
        raise ConfigError(
            f"dense FFN dim {dense_cfg.ffn_dim} != expert ffn_dim {target_cfg.ffn_dim}",
            "upcycled experts inherit the dense FFN width",
        )
    shared_keys = ("model_dim", "n_layers", "n_heads", "vocab_size", "norm", "qk_norm")
    for key in shared_keys:
        if getattr(dense_cfg, key) != getattr(target_cfg, key):
            raise ConfigError(f"upcycle: {key} differs between dense ({getattr(dense_cfg, key)}) and target ({getattr(target_cfg, key)})")
    E = target_cfg.n_experts
    out: Params = {}
    for name, shape in parameter_shapes(target_cfg).items():
        if ".moe." not in name:
            src = dense_params[name]
            if src.shape != shape:
                raise ConfigError(f"upcycle: {name} has shape {src.shape}, target expects {shape}")
            out[name] = parameter(src.data.copy(), name=name)
            continue
        layer_prefix, leaf = name.split(".moe.")
        if leaf == "router":
            data = init_weight(target_cfg, shape, stream(seed, "upcycle", "router", name), dtype=dense_params["embed"].dtype)
        elif leaf.startswith("shared."):
            raise ConfigError("upcycle does not create shared experts")
        else:
            dense_w = dense_params[f"{layer_prefix}.ffn.{leaf}"].data
            data = np.stack([dense_w.copy() for _ in range(E)])
            if noise_fraction > 0:
                for e in range(E):
                    rng = stream(seed, "upcycle", "noise", name, str(e))
                    flat = data[e].reshape(-1)
                    n_replace = int(round(noise_fraction * flat.size))
                    pick = rng.permutation(flat.size)[:n_replace]
                    flat[pick] = rng.normal(0.0, 0.02, size=n_replace).astype(data.dtype)
        out[name] = parameter(data, name=name)
    return out


class ParamCount(NamedTuple):
    active: int
    total: int
    router: int

    @property
    def active_without_router(self) -> int:
        return self.active - self.router

    @property
    def total_without_router(self) -> int:
        return self.total - self.router


def count_params(cfg: ModelConfig) -> ParamCount:
    """Active (per token) and total parameter counts, router included in both.

    Active counts embeddings, attention, norms, routers, and the ``k``
    (+ shared) experts each token passes through.
    """
    shapes = parameter_shapes(cfg)
    total = sum(int(np.prod(s)) for s in shapes.values())
    if not cfg.is_moe:
        return ParamCount(total, total, 0)
    mc = cfg.moe_layer
    per_expert = mc.expert_params
    router = sum(int(np.prod(s)) for n, s in shapes.items() if n.endswith(".router"))
    expert_total = sum(int(np.prod(s)) for n, s in shapes.items() if n.split(".")[-1] in ("w_gate", "w_up", "w_down") and ".shared." not in n)
    if cfg.layer_shared_moe:
        # one expert pool; distinct experts touched per token across all layers
        touched = min(cfg.n_experts, cfg.n_active * cfg.n_layers)
        active_experts = touched * per_expert
    else:
        active_experts = cfg.n_layers * cfg.n_active * per_expert
    active = total - expert_total + active_experts
    return ParamCount(active, total, router)

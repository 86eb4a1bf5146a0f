"""Sparse expert layer: router, token-choice / expert-choice routing, grouped dispatch.

The layer output for token ``t`` is ``sum_{i in chosen(t)} p[t, i] * E_i(x[t])``
where ``p`` is the softmax over *all* experts (no renormalisation after the
top-k selection), plus an unrouted shared expert when configured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ops
from .core.tensor import Tensor
from .errors import ConfigError, ConsistencyError, NumericError, ParameterError

TOKEN_CHOICE = "token_choice"
EXPERT_CHOICE = "expert_choice"


@dataclass(frozen=True)
class MoeLayerConfig:
    n_experts: int
    n_active: int
    ffn_dim: int
    model_dim: int
    routing_mode: str = TOKEN_CHOICE
    capacity_factor: float = 2.0
    shared_experts: int = 0

    def __post_init__(self):
        if not 1 <= self.n_active <= self.n_experts:
            raise ConfigError(f"need 1 <= n_active <= n_experts, got k={self.n_active}, N_E={self.n_experts}")
        if self.ffn_dim < 1 or self.model_dim < 1:
            raise ConfigError("ffn_dim and model_dim must be >= 1")
        if self.shared_experts not in (0, 1):
            raise ConfigError(f"shared_experts must be 0 or 1, got {self.shared_experts}")
        if self.routing_mode not in (TOKEN_CHOICE, EXPERT_CHOICE):
            raise ConfigError(f"unknown routing_mode {self.routing_mode!r}")
        if self.routing_mode == EXPERT_CHOICE:
            if self.capacity_factor <= 0:
                raise ConfigError("expert choice needs capacity_factor > 0")
            if self.shared_experts:
                raise ConfigError("expert choice cannot be combined with a shared expert")

    @property
    def expert_params(self) -> int:
        return 3 * self.model_dim * self.ffn_dim


@dataclass
class FfnParams:
    """One SwiGLU feed-forward: ``(silu(x W_gate) * (x W_up)) W_down``."""

    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class ExpertParams:
    """Stacked expert weights: ``w_gate``/``w_up`` are ``[E, d, f]``, ``w_down`` is ``[E, f, d]``."""

    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def expert(self, e: int) -> FfnParams:
        return FfnParams(
            ops.index_expert(self.w_gate, e), ops.index_expert(self.w_up, e), ops.index_expert(self.w_down, e)
        )


@dataclass
class MoeParams:
    router: Tensor  # [d, N_E]
    experts: ExpertParams
    shared: FfnParams | None = None


@dataclass
class RoutingDecision:
    """Routing outcome for one MoE layer over a batch of ``T`` tokens.

    Assignments are stored as parallel ``token_idx``/``expert_idx`` arrays. For
    token choice they are token-major with ``k`` entries per token in
    descending-probability order, so ``expert_ids`` is a plain reshape.
    """

    mode: str
    n_experts: int
    logits: Tensor
    probs: Tensor
    token_idx: np.ndarray
    expert_idx: np.ndarray
    k: int | None = None
    capacity: int | None = None
    fixed_weights: np.ndarray | None = None
    counts_per_expert: np.ndarray = field(init=False)
    mean_prob_per_expert: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts_per_expert = np.bincount(self.expert_idx, minlength=self.n_experts).astype(np.int64)
        self.mean_prob_per_expert = self.probs.data.astype(np.float64).mean(axis=0)

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def n_assignments(self) -> int:
        return int(self.token_idx.shape[0])

    @property
    def expert_ids(self) -> np.ndarray:
        if self.mode != TOKEN_CHOICE:
            raise ConsistencyError("expert_ids is only defined for token-choice routing")
        return self.expert_idx.reshape(self.n_tokens, self.k)

    @property
    def selected_probs(self) -> np.ndarray:
        if self.fixed_weights is not None:
            return self.fixed_weights.reshape(self.n_tokens, self.k)
        return self.probs.data[self.token_idx, self.expert_idx].reshape(self.n_tokens, self.k)

    def experts_of_token(self, t: int) -> np.ndarray:
        return self.expert_idx[self.token_idx == t]

    @property
    def assignment_fractions(self) -> np.ndarray:
        """Share of all assignments per expert (sums to 1)."""
        return self.counts_per_expert / max(self.n_assignments, 1)


def router_logits(x: Tensor, router_weight: Tensor) -> tuple[Tensor, Tensor]:
    logits = ops.matmul(x, router_weight)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("router produced non-finite logits")
    return logits, ops.softmax(logits, axis=-1)


def route_token_choice(x: Tensor, router_weight: Tensor, k: int) -> RoutingDecision:
    """Dropless top-k token choice: every token gets exactly ``k`` distinct experts."""
    n_experts = router_weight.shape[1]
    if not 1 <= k <= n_experts:
        raise ParameterError(f"k={k} must lie in [1, {n_experts}]")
    logits, probs = router_logits(x, router_weight)
    ids, _ = ops.topk(probs.data, k)
    T = probs.shape[0]
    return RoutingDecision(
        mode=TOKEN_CHOICE,
        n_experts=n_experts,
        logits=logits,
        probs=probs,
        token_idx=np.repeat(np.arange(T), k),
        expert_idx=ids.reshape(-1).astype(np.int64),
        k=k,
    )


def expert_capacity(n_tokens: int, n_experts: int, capacity_factor: float) -> int:
    c = math.floor(capacity_factor * n_tokens / n_experts)
    if c < 1:
        raise ConfigError(
            f"expert capacity floor({capacity_factor}*{n_tokens}/{n_experts}) = {c} < 1",
            "raise capacity_factor or the batch size",
        )
    if c > n_tokens:
        raise ConfigError(f"expert capacity {c} exceeds the {n_tokens} tokens in the batch")
    return c


def route_expert_choice(x: Tensor, router_weight: Tensor, capacity_factor: float) -> RoutingDecision:
    """Each expert takes its ``c`` highest-probability tokens; tokens may be picked 0..N_E times."""
    n_experts = router_weight.shape[1]
    T = x.shape[0]
    if T < 1:
        raise ParameterError("expert choice needs at least one token")
    c = expert_capacity(T, n_experts, capacity_factor)
    logits, probs = router_logits(x, router_weight)
    tok, _ = ops.topk(probs.data.T, c)  # [N_E, c]
    return RoutingDecision(
        mode=EXPERT_CHOICE,
        n_experts=n_experts,
        logits=logits,
        probs=probs,
        token_idx=tok.reshape(-1).astype(np.int64),
        expert_idx=np.repeat(np.arange(n_experts), c),
        capacity=c,
    )


def route(x: Tensor, params: MoeParams, cfg: MoeLayerConfig) -> RoutingDecision:
    if cfg.routing_mode == TOKEN_CHOICE:
        return route_token_choice(x, params.router, cfg.n_active)
    return route_expert_choice(x, params.router, cfg.capacity_factor)


def force_routing(decision: RoutingDecision, expert_ids: np.ndarray, weights: np.ndarray | None = None) -> RoutingDecision:
    """Replace the chosen experts of a token-choice decision.

    With ``weights`` the expert outputs are combined with those constants
    instead of the router probabilities.
    """
    ids = np.asarray(expert_ids, dtype=np.int64)
    T = decision.n_tokens
    if ids.ndim != 2 or ids.shape[0] != T:
        raise ConsistencyError(f"forced ids must be [T={T}, k], got {ids.shape}")
    k = ids.shape[1]
    fixed = None
    if weights is not None:
        fixed = np.asarray(weights, dtype=decision.probs.dtype).reshape(-1)
        if fixed.shape[0] != T * k:
            raise ConsistencyError("forced weights must match forced ids")
    return RoutingDecision(
        mode=TOKEN_CHOICE,
        n_experts=decision.n_experts,
        logits=decision.logits,
        probs=decision.probs,
        token_idx=np.repeat(np.arange(T), k),
        expert_idx=ids.reshape(-1),
        k=k,
        fixed_weights=fixed,
    )


def ffn_forward(x: Tensor, p: FfnParams) -> Tensor:
    return ops.matmul(ops.swiglu(ops.matmul(x, p.w_gate), ops.matmul(x, p.w_up)), p.w_down)


def shared_expert_forward(x: Tensor, params: MoeParams, cfg: MoeLayerConfig) -> Tensor:
    if cfg.shared_experts != 1 or params.shared is None:
        raise ConfigError("shared_expert_forward called on a layer without a shared expert")
    return ffn_forward(x, params.shared)


def moe_forward(x: Tensor, cfg: MoeLayerConfig, params: MoeParams, decision: RoutingDecision) -> Tensor:
    """Grouped dispatch: gather tokens per expert, batched SwiGLU, weighted scatter-add."""
    T = x.shape[0]
    if decision.probs.shape != (T, cfg.n_experts) or decision.n_experts != cfg.n_experts:
        raise ConsistencyError(
            f"routing decision for {decision.probs.shape} does not match input of {T} tokens and {cfg.n_experts} experts"
        )
    if params.experts.w_gate.shape[0] != cfg.n_experts:
        raise ConsistencyError("expert parameter count differs from config")
    order = np.argsort(decision.expert_idx, kind="stable")
    tok = decision.token_idx[order]
    exp = decision.expert_idx[order]
    offsets = np.concatenate([[0], np.cumsum(np.bincount(exp, minlength=cfg.n_experts))])

    if decision.fixed_weights is not None:
        w = Tensor(decision.fixed_weights[order], dtype=x.dtype)
    else:
        w = ops.take_pairs(decision.probs, tok, exp)
    xs = ops.gather_rows(x, tok)
    ex = params.experts
    h = ops.swiglu(ops.segment_matmul(xs, ex.w_gate, offsets), ops.segment_matmul(xs, ex.w_up, offsets))
    y = ops.scale_rows(ops.segment_matmul(h, ex.w_down, offsets), w)
    out = ops.scatter_add_rows(y, tok, T)
    if cfg.shared_experts:
        out = ops.add(out, shared_expert_forward(x, params, cfg))
    return out


def combinations(n_experts: int, n_active: int) -> int:
    """Number of distinct expert sets a token can be routed to."""
    if not 0 <= n_active <= n_experts:
        raise ParameterError(f"need 0 <= n_active <= n_experts, got ({n_experts}, {n_active})")
    return math.comb(n_experts, n_active)

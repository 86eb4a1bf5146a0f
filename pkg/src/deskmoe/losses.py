"""Training objective: cross-entropy + alpha * load balancing + beta * router z-loss.

Both auxiliary losses are accumulated in float64 whatever the training
precision, and averaged over MoE layers so the weights keep their meaning
when the layer count changes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import ops
from .core.tensor import Tensor
from .errors import ParameterError
from .moe import RoutingDecision

DEFAULT_ALPHA = 0.01
DEFAULT_BETA = 0.001
PER_LAYER = "per_layer"
MODEL_LEVEL = "model_level"
_WIDE = np.float64


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    lb: float
    rz: float
    alpha: float
    beta: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def combined_loss(ce: float, lb: float, rz: float, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> LossBreakdown:
    if alpha < 0 or beta < 0:
        raise ParameterError(f"loss weights must be >= 0, got alpha={alpha}, beta={beta}")
    total = float(ce) + alpha * float(lb) + beta * float(rz)
    return LossBreakdown(float(ce), float(lb), float(rz), float(alpha), float(beta), total)


def load_balancing_from_stats(f: np.ndarray, P: np.ndarray) -> float:
    """``N_E * sum_i f_i * P_i`` for given assignment fractions and mean probabilities."""
    f = np.asarray(f, dtype=_WIDE)
    P = np.asarray(P, dtype=_WIDE)
    if f.shape != P.shape or f.ndim != 1:
        raise ParameterError(f"f and P must be matching vectors, got {f.shape} and {P.shape}")
    return float(f.shape[0] * np.dot(f, P))


def _layer_lbl(decisions: Sequence[RoutingDecision]) -> Tensor:
    """Loss for one balancing group (one layer, or all layers pooled)."""
    n_experts = decisions[0].n_experts
    counts = np.zeros(n_experts, dtype=_WIDE)
    assignments = 0
    for d in decisions:
        counts += d.counts_per_expert
        assignments += d.n_assignments
    if assignments == 0:
        raise ParameterError("load balancing loss over an empty batch")
    f = counts / assignments
    P = None
    total_tokens = sum(d.n_tokens for d in decisions)
    for d in decisions:
        part = ops.scale(ops.mean(ops.cast(d.probs, _WIDE), axis=0), d.n_tokens / total_tokens)
        P = part if P is None else ops.add(P, part)
    return ops.scale(ops.sum(ops.mul_const(P, f)), n_experts)


def load_balancing_loss(decisions: Sequence[RoutingDecision], level: str = PER_LAYER) -> Tensor:
    """Load balancing loss; ``f_i`` is a constant count ratio, gradients flow through ``P_i``.

    ``per_layer`` averages one loss per decision; ``model_level`` pools the
    counts and probabilities of every decision into a single loss.
    """
    if not decisions:
        raise ParameterError("load balancing loss needs at least one routing decision")
    if any(d.n_tokens == 0 for d in decisions):
        raise ParameterError("load balancing loss over an empty batch")
    if level == MODEL_LEVEL:
        return _layer_lbl(decisions)
    if level != PER_LAYER:
        raise ParameterError(f"unknown balancing level {level!r}")
    total = None
    for d in decisions:
        part = _layer_lbl([d])
        total = part if total is None else ops.add(total, part)
    return ops.scale(total, 1.0 / len(decisions))


def router_z_loss_from_logits(logits: Sequence[Tensor]) -> Tensor:
    """Mean over tokens of ``logsumexp(logits)**2``, averaged over layers."""
    if not logits:
        raise ParameterError("router z-loss needs at least one layer of logits")
    total = None
    for lg in logits:
        lse = ops.logsumexp(ops.cast(lg, _WIDE))
        part = ops.mean(ops.mul(lse, lse))
        total = part if total is None else ops.add(total, part)
    return ops.scale(total, 1.0 / len(logits))


def router_z_loss(decisions: Sequence[RoutingDecision]) -> Tensor:
    return router_z_loss_from_logits([d.logits for d in decisions])


def objective(
    ce: Tensor,
    decisions: Sequence[RoutingDecision],
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    level: str = PER_LAYER,
) -> tuple[Tensor, LossBreakdown]:
    """Differentiable total loss plus its breakdown.

    The auxiliary losses are always evaluated (for monitoring) but only enter
    the graph when their weight is non-zero.
    """
    if alpha < 0 or beta < 0:
        raise ParameterError(f"loss weights must be >= 0, got alpha={alpha}, beta={beta}")
    total = ops.cast(ce, _WIDE)
    lb_val = rz_val = 0.0
    if decisions:
        lb = load_balancing_loss(decisions, level)
        rz = router_z_loss(decisions)
        lb_val, rz_val = float(lb.data), float(rz.data)
        if alpha:
            total = ops.add(total, ops.scale(lb, alpha))
        if beta:
            total = ops.add(total, ops.scale(rz, beta))
    return total, LossBreakdown(float(ce.data), lb_val, rz_val, float(alpha), float(beta), float(total.data))

"""Desk-scale mixture-of-experts language models: routing, auxiliary losses, training, routing analysis."""

from .errors import DeskMoeError
from .model import ModelConfig, count_params, forward, init_model, upcycle
from .moe import MoeLayerConfig, combinations, moe_forward, route_expert_choice, route_token_choice

__version__ = "0.1.0"

__all__ = [
    "DeskMoeError",
    "ModelConfig",
    "MoeLayerConfig",
    "combinations",
    "count_params",
    "forward",
    "init_model",
    "moe_forward",
    "route_expert_choice",
    "route_token_choice",
    "upcycle",
]

from . import ops
from .gradcheck import gradcheck, numeric_grad
from .ops import topk, truncated_normal
from .rng import RngStreams, stream
from .tensor import Tape, Tensor, default_dtype, finite_checks, parameter, precision

__all__ = [
    "RngStreams",
    "Tape",
    "Tensor",
    "default_dtype",
    "finite_checks",
    "gradcheck",
    "numeric_grad",
    "ops",
    "parameter",
    "precision",
    "stream",
    "topk",
    "truncated_normal",
]

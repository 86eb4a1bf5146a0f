"""Built-in ablation presets at desk scale.

Each preset is a small set of ``section.key`` updates on top of the default
run config and names the control run it is compared against. Within a pair
the effective configs differ in exactly the keys listed in ``knob``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class Preset:
    name: str
    family: str
    topic: str
    knob: tuple[str, ...]
    updates: dict[str, Any] = field(default_factory=dict)
    control: str | None = None


_UPCYCLE = {"init.source": "upcycle"}
_LAYER_SHARED_BASE = {"model.n_experts": 4, "model.n_active": 1, "model.ffn_dim": 256, "model.lbl_level": "model_level"}

PRESETS: dict[str, Preset] = {
    p.name: p
    for p in [
        Preset("moe", "moe-vs-dense", "sparse MoE vs dense FFN at equal active parameters",
               ("model.ffn_type", "model.ffn_dim"), {}, "dense"),
        Preset("dense", "moe-vs-dense", "dense FFN whose width equals k x expert width",
               ("model.ffn_type", "model.ffn_dim"), {"model.ffn_type": "dense", "model.ffn_dim": 256}, "moe"),
        Preset("granularity-8", "granularity", "8 experts of width 128, 2 active (same active/total budget)",
               ("model.n_experts", "model.n_active", "model.ffn_dim"),
               {"model.n_experts": 8, "model.n_active": 2, "model.ffn_dim": 128}, "granularity-32"),
        Preset("granularity-32", "granularity", "32 experts of width 32, 8 active (same active/total budget)",
               ("model.n_experts", "model.n_active", "model.ffn_dim"),
               {"model.n_experts": 32, "model.n_active": 8, "model.ffn_dim": 32}, "granularity-64"),
        Preset("granularity-64", "granularity", "64 experts of width 16, 16 active (same active/total budget)",
               ("model.n_experts", "model.n_active", "model.ffn_dim"),
               {"model.n_experts": 64, "model.n_active": 16, "model.ffn_dim": 16}, "granularity-8"),
        Preset("shared-expert", "shared-expert", "one always-on shared expert plus k-1 routed (same compute)",
               ("model.shared_experts", "model.n_active"), {"model.shared_experts": 1, "model.n_active": 3}, "no-shared-expert"),
        Preset("no-shared-expert", "shared-expert", "k routed experts, no shared expert",
               ("model.shared_experts", "model.n_active"), {}, "shared-expert"),
        Preset("ec", "ec-vs-tc", "expert-choice routing, capacity factor 2",
               ("model.routing_mode",), {"model.routing_mode": "expert_choice"}, "tc"),
        Preset("tc", "ec-vs-tc", "dropless token-choice routing",
               ("model.routing_mode",), {}, "ec"),
        Preset("upcycle", "upcycle-vs-scratch", "MoE initialised from a briefly trained dense model",
               ("init.source",), dict(_UPCYCLE), "scratch"),
        Preset("scratch", "upcycle-vs-scratch", "MoE trained from random initialisation",
               ("init.source",), {}, "upcycle"),
        Preset("noise-upcycle", "noise-upcycle", "upcycling with 50% of each expert's entries re-drawn",
               ("init.noise_fraction",), {**_UPCYCLE, "init.noise_fraction": 0.5}, "upcycle"),
        Preset("lbl-on", "lbl-on/off", "load-balancing loss weight 0.01",
               ("train.alpha",), {}, "lbl-off"),
        Preset("lbl-off", "lbl-on/off", "no load-balancing loss (still monitored)",
               ("train.alpha",), {"train.alpha": 0.0}, "lbl-on"),
        Preset("zloss-on", "zloss-on/off", "router z-loss weight 0.001",
               ("train.beta",), {}, "zloss-off"),
        Preset("zloss-off", "zloss-on/off", "no router z-loss (still monitored)",
               ("train.beta",), {"train.beta": 0.0}, "zloss-on"),
        Preset("init-trunc", "init-normal-vs-trunc", "truncated normal init, std 0.02, cutoff 0.06",
               ("model.init_dist",), {}, "init-normal"),
        Preset("init-normal", "init-normal-vs-trunc", "plain normal init, std 0.02",
               ("model.init_dist",), {"model.init_dist": "normal"}, "init-trunc"),
        Preset("qknorm-on", "qknorm-on/off", "RMSNorm on queries and keys",
               ("model.qk_norm",), {}, "qknorm-off"),
        Preset("qknorm-off", "qknorm-on/off", "no query/key normalisation",
               ("model.qk_norm",), {"model.qk_norm": False}, "qknorm-on"),
        Preset("eps-1e8", "eps-1e5-vs-1e8", "AdamW epsilon 1e-8",
               ("train.eps",), {}, "eps-1e5"),
        Preset("eps-1e5", "eps-1e5-vs-1e8", "AdamW epsilon 1e-5",
               ("train.eps",), {"train.eps": 1e-5}, "eps-1e8"),
        Preset("layer-shared", "layer-shared", "one MoE with N_E = n_layers experts reused by every layer, model-level balancing",
               ("model.ffn_type", "model.layer_shared_moe"), {**_LAYER_SHARED_BASE, "model.layer_shared_moe": True}, "layer-shared-dense"),
        Preset("layer-shared-dense", "layer-shared", "dense model with the same FFN width",
               ("model.ffn_type", "model.layer_shared_moe"), {**_LAYER_SHARED_BASE, "model.ffn_type": "dense"}, "layer-shared"),
    ]
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}", "run `deskmoe presets` to list them") from None


def families() -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for p in PRESETS.values():
        out.setdefault(p.family, []).append(p.name)
    return out

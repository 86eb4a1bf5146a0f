"""Run configuration: model / train / data / init sections in one YAML or JSON file.

Precedence, lowest to highest: built-in defaults, ``--config`` file,
``--preset`` deltas, ``--override key=value`` flags, ``--seed``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, StorageError
from .model import ModelConfig
from .train import TrainConfig

DATA_ROOT_ENV = "DESKMOE_DATA"
SCRATCH, UPCYCLE = "scratch", "upcycle"


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None  # None: $DESKMOE_DATA, else the bundled two-domain corpus
    eval_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError(f"eval_fraction must lie in [0, 1), got {self.eval_fraction}")


@dataclass(frozen=True)
class InitConfig:
    """Where the initial weights come from.

    ``upcycle`` first trains a dense model of the same shape (FFN width =
    expert width) for ``dense_steps`` and clones its FFN into every expert.
    """

    source: str = SCRATCH
    dense_steps: int = 200
    noise_fraction: float = 0.0
    checkpoint: str | None = None  # start from these parameters instead (e.g. an `upcycle` output)

    def __post_init__(self):
        if self.source not in (SCRATCH, UPCYCLE):
            raise ConfigError(f"init.source must be {SCRATCH!r} or {UPCYCLE!r}, got {self.source!r}")
        if self.dense_steps < 1:
            raise ConfigError("init.dense_steps must be >= 1")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ConfigError("init.noise_fraction must lie in [0, 1]")
        if self.checkpoint and self.source != SCRATCH:
            raise ConfigError("init.checkpoint and init.source = upcycle are mutually exclusive")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "init": InitConfig}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    init: InitConfig = field(default_factory=InitConfig)
    preset: str | None = None

    def __post_init__(self):
        if self.init.source == UPCYCLE:
            if not self.model.is_moe or self.model.layer_shared_moe or self.model.shared_experts:
                raise ConfigError("upcycling needs a per-layer MoE target without a shared expert")

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        out: dict[str, Any] = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out["preset"] = self.preset
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping with model/train/data/init sections")
        unknown = set(d) - set(SECTIONS) - {"preset"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, cls_ in SECTIONS.items():
            section = d.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in fields(cls_)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}", f"valid keys: {sorted(known)}")
            section = {k: _coerce(cls_, k, v) for k, v in section.items()}
            try:
                built[name] = cls_(**section)
            except TypeError as e:
                raise ConfigError(f"bad value in section {name}: {e}") from e
        return cls(**built, preset=d.get("preset"))

    def flat(self) -> dict[str, Any]:
        """``section.key -> value`` view used for diffs and overrides."""
        out = {}
        for name in SECTIONS:
            for k, v in asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        return out


def _coerce(cls_, key: str, value: Any) -> Any:
    """Accept ``"1e-5"``-style strings (YAML 1.1 reads them as text) for numeric fields."""
    kind = {f.name: str(f.type) for f in fields(cls_)}[key]
    if isinstance(value, str) and kind in ("float", "int"):
        try:
            num = float(value)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {value!r}") from None
        return num if kind == "float" else int(num)
    if kind == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind == "int" and isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def diff(a: RunConfig, b: RunConfig) -> dict[str, tuple[Any, Any]]:
    fa, fb = a.flat(), b.flat()
    return {k: (fa[k], fb[k]) for k in fa if fa[k] != fb[k]}


def apply_updates(cfg: RunConfig, updates: dict[str, Any]) -> RunConfig:
    """Apply ``{"section.key": value}`` (or an unambiguous bare ``key``) updates."""
    d = cfg.to_dict()
    for key, value in updates.items():
        section, _, leaf = key.rpartition(".")
        if not section:
            owners = [s for s, c in SECTIONS.items() if leaf in {f.name for f in fields(c)}]
            if len(owners) != 1:
                raise ConfigError(f"override key {key!r} is {'ambiguous' if owners else 'unknown'}", "use section.key")
            section = owners[0]
        if section not in SECTIONS or leaf not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown config key {key!r}")
        d[section][leaf] = value
    return RunConfig.from_dict(d)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {raw!r}: {e}") from e
    return key.strip(), value


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    return data or {}


def resolve(config_path: str | Path | None = None, preset: str | None = None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    from .presets import get_preset

    cfg = RunConfig.from_dict(load_config_file(config_path)) if config_path else RunConfig()
    if preset is not None:
        cfg = apply_updates(cfg, get_preset(preset).updates)
        cfg = replace(cfg, preset=preset)
    if overrides:
        cfg = apply_updates(cfg, dict(parse_override(o) for o in overrides))
    if seed is not None:
        cfg = apply_updates(cfg, {"train.seed": int(seed)})
    return cfg


def data_root(cfg: RunConfig) -> Path:
    from .data import bundled_corpus_dir

    if cfg.data.root:
        return Path(cfg.data.root)
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else bundled_corpus_dir()


def write_effective(cfg: RunConfig, run_dir: str | Path) -> Path:
    """Effective config + seed sidecar; feeding the YAML back with ``--config`` replays the run."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "effective_config.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    (run_dir / "seed").write_text(f"{cfg.seed}\n", encoding="utf-8")
    return path

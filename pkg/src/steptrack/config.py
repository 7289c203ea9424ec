"""Versioned run configuration: one JSON document, unknown keys rejected, flags override."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import AffineRanges
from .losses import LossWeights
from .metrics import EvalConfig
from .network import ModelConfig
from .trainer import TrainConfig
from .tracker import UpdatePolicy

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 15
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    scale: tuple[float, float] = (0.9, 1.1)
    translate_frac: tuple[float, float] = (-0.1, 0.1)
    shear_deg: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "translate_frac", "shear_deg"):
            lo, hi = (float(v) for v in getattr(self, name))
            if lo > hi:
                raise ValueError(f"synth.{name}: lower bound {lo} above upper bound {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.n_frames < 2:
            raise ValueError("synth.n_frames must be >= 2")

    def ranges(self) -> AffineRanges:
        return AffineRanges(self.rotation_deg, self.scale, self.translate_frac, self.shear_deg)


@dataclass(frozen=True)
class TrackConfig:
    policy: str = "conf-rolling"
    capacity: int = 2
    tau_m: float = 0.6
    min_kp_fraction: float = 0.5
    memory_encoding: str | None = None

    def update_policy(self) -> UpdatePolicy:
        return UpdatePolicy(self.policy, self.capacity, self.tau_m, self.min_kp_fraction)


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "track": TrackConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"config_version": CONFIG_VERSION, "seed": self.seed}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(cls: type, key: str, value: Any, current: Any) -> Any:
    """Turn a flag string into the type of the existing value."""
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        return value
    return parsed


def build_config(doc: dict | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Validate a config document, apply dotted ``overrides`` ("train.lr": 1e-3), and build it.

    A top-level ``seed`` is propagated to the model and trainer unless those
    sections set their own.
    """
    doc = dict(doc or {})
    version = doc.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version!r} (expected {CONFIG_VERSION})")
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values: dict[str, dict] = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        known = {f.name for f in fields(cls)}
        bad = set(section) - known
        if bad:
            raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
        values[name] = dict(section)
    seed = doc.get("seed", 0)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if dotted == "seed":
            seed = int(value)
            continue
        name, _, key = dotted.partition(".")
        if name not in SECTIONS or key not in {f.name for f in fields(SECTIONS[name])}:
            raise ConfigError(f"unknown config key {dotted!r}")
        default = getattr(SECTIONS[name](), key)
        values[name][key] = _coerce(SECTIONS[name], dotted, value, values[name].get(key, default))
    for name in ("model", "train"):
        values[name].setdefault("seed", seed)
    try:
        built = {name: cls(**values[name]) for name, cls in SECTIONS.items()}
        built["track"].update_policy()  # validates policy fields
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(seed=int(seed), **built)


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    doc = None
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    return build_config(doc, overrides)


def write_echo(cfg: RunConfig, artifact: str | Path) -> Path:
    """Write the effective config next to ``artifact`` as ``<name>.config.json``."""
    artifact = Path(artifact)
    target = artifact.parent / f"{artifact.name}.config.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(cfg.dumps() + "\n")
    return target


def describe_keys() -> str:
    """One line per config key with its default, for --help."""
    lines = ["config keys (JSON sections; override with --set section.key=value):", "  seed = 0"]
    for name, cls in SECTIONS.items():
        defaults = cls()
        for f in fields(cls):
            value = getattr(defaults, f.name)
            lines.append(f"  {name}.{f.name} = {json.dumps(list(value) if isinstance(value, tuple) else value)}")
    return "\n".join(lines)

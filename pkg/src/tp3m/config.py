"""Run configuration: module dataclasses merged from defaults, a key=value file and command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .geomeval import RansacConfig
from .match2d import CascadeConfig
from .match3d import GuidanceConfig, WindowFilterConfig
from .pipeline import MatchConfig, ModelConfig
from .synthgen import PerturbationSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    precision_tau: float = 5e-4  # squared symmetric epipolar distance, normalised coordinates
    homography_precision_px: float = 3.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    window: WindowFilterConfig = field(default_factory=WindowFilterConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    edge_threshold: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: PerturbationSpec = field(default_factory=PerturbationSpec)

    @property
    def match(self) -> MatchConfig:
        return MatchConfig(self.cascade, self.window, self.guidance, self.edge_threshold)


def flat_items(obj=None, prefix: str = "") -> list[tuple[str, object]]:
    """(dotted key, value) for every leaf field, in declaration order."""
    obj = RunConfig() if obj is None else obj
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.extend(flat_items(v, key + "."))
        else:
            out.append((key, v))
    return out


def _parse(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {type(default).__name__})") from None
    return text


def read_config_file(path) -> dict[str, str]:
    """`key = value` lines; blank lines and `#` comments ignored."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _set(obj, parts: list[str], value):
    if len(parts) == 1:
        return dataclasses.replace(obj, **{parts[0]: value})
    child = getattr(obj, parts[0])
    return dataclasses.replace(obj, **{parts[0]: _set(child, parts[1:], value)})


def build_config(file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """defaults < file < overrides; unknown keys and invalid values are errors."""
    defaults = dict(flat_items())
    cfg = RunConfig()
    merged = {**(file_values or {}), **(overrides or {})}
    for key, text in merged.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {key}")
        try:
            cfg = _set(cfg, key.split("."), _parse(key, text, defaults[key]))
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid value for {key}: {e}") from None
    return cfg


def parse_assignments(items: list[str] | None) -> dict[str, str]:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise ConfigError(f"expected key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_config(cfg: RunConfig) -> str:
    return " ".join(f"{k}={v}" for k, v in flat_items(cfg))


def describe_keys() -> str:
    return "\n".join(f"  {k} (default {v!r})" for k, v in flat_items())

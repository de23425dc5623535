"""Run configuration: a nested YAML document mapped onto the library's dataclasses.

Every section is optional; missing keys take the dataclass defaults.  Unknown
keys and invalid values raise :class:`ConfigError` naming the offending field.
``RunConfig.to_dict`` produces the effective configuration, which parses back
to an identical run.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .capacity import RoadParams
from .dynamics import DynamicsParams, RoadGeometry
from .errors import ConfigError, MixedCapError
from .interaction import HUMAN_WEIGHTS, ROBOT_WEIGHTS, ControllerConfig, RewardWeights
from .orchestrator import FIXED_COUNT, INIT_MODES, Controllers, PhaseBudgets, PolicySettings

# overrides the configured output directory when set
OUTPUT_ENV = "MIXEDCAP_OUTPUT_DIR"


@dataclass(frozen=True)
class RoadSection:
    L: float = 4.0
    h: float = 30.0
    h_bar: float = 11.0
    d: float = 1000.0
    n: int = 2
    lane_width: float = 3.7

    def __post_init__(self):
        self.params()
        self.geometry()

    def params(self) -> RoadParams:
        return RoadParams(self.L, self.h, self.h_bar, self.d, self.n)

    def geometry(self) -> RoadGeometry:
        return RoadGeometry(lane_count=self.n, lane_width=self.lane_width, length=self.d)


@dataclass(frozen=True)
class WeightsSection:
    human: RewardWeights = HUMAN_WEIGHTS
    robot: RewardWeights = ROBOT_WEIGHTS


@dataclass(frozen=True)
class RunConfig:
    road: RoadSection = RoadSection()
    dynamics: DynamicsParams = DynamicsParams()
    vehicle_count: int = 20
    alpha_bar: float = 0.5
    init_mode: str = FIXED_COUNT
    initial_speed: float = 25.0
    weights: WeightsSection = WeightsSection()
    controller: ControllerConfig = ControllerConfig()
    budgets: PhaseBudgets = PhaseBudgets()
    policy: PolicySettings = PolicySettings()
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        # sub-sections validate themselves on construction
        params = self.road.params()
        if int(self.vehicle_count) != self.vehicle_count or self.vehicle_count < params.n:
            raise ConfigError(f"vehicle_count: must be an integer >= n={params.n}, got {self.vehicle_count}")
        if not 0.0 <= self.alpha_bar <= 1.0:
            raise ConfigError(f"alpha_bar: must lie in [0, 1], got {self.alpha_bar}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode: must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.initial_speed < 0:
            raise ConfigError("initial_speed: must be >= 0")

    @property
    def params(self) -> RoadParams:
        return self.road.params()

    @property
    def geometry(self) -> RoadGeometry:
        return self.road.geometry()

    def controllers(self) -> Controllers:
        return Controllers(params=self.params, dynamics=self.dynamics, controller=self.controller,
                           human=self.weights.human, robot=self.weights.robot,
                           budgets=self.budgets, policy=self.policy)

    def output_path(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _to_dict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "RunConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)


def _to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, float):
        return float(obj)
    return obj


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping, got {data!r}")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field (allowed: {', '.join(sorted(known))})")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        path = prefix + f.name
        default = getattr(defaults, f.name)
        value = data[f.name]
        if dataclasses.is_dataclass(default):
            # nested sections start from the section's own defaults
            kwargs[f.name] = _merge_section(type(default), default, value, path)
        else:
            kwargs[f.name] = _coerce(value, default, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except MixedCapError as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def _deep_merge(base: dict, value: dict) -> dict:
    out = dict(base)
    for k, v in value.items():
        out[k] = _deep_merge(out[k], v) if isinstance(out.get(k), dict) and isinstance(v, dict) else v
    return out


def _merge_section(cls, default, value, path):
    # partial sections keep the section default (e.g. the robot weights) for missing keys
    if value is None:
        return default
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping, got {value!r}")
    return _build(cls, _deep_merge(_to_dict(default), value), path + ".")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_yaml(text)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``dotted.key=value`` strings (values parsed as YAML scalars)."""
    data = cfg.to_dict()
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"{key}: unknown section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown field")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)

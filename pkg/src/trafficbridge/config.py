"""Application configuration: defaults, YAML file, CLI overrides.

Precedence is flags > file > defaults. The effective configuration
round-trips: to_dict() then from_dict() reproduces an equal AppConfig, and
`run --dump-config` prints exactly what the process will use.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .bridge import BridgeConfig
from .geo import CoordinateMapper
from .osc import OscConfig


class AppConfigError(Exception):
    pass


@dataclass
class TrafficLightSettings:
    h_offset: float = 3.0
    flip_facing: bool = False


@dataclass
class WebsocketSettings:
    enabled: bool = True
    host: str = "127.0.0.1"
    port: int = 8765
    broadcast_rate: float = 20.0
    max_queue: int = 16  # snapshots buffered per client before it is dropped

    def __post_init__(self):
        if self.broadcast_rate <= 0:
            raise AppConfigError("broadcast_rate must be positive")


@dataclass
class StatsSettings:
    file: str | None = None
    interval: float = 1.0

    def __post_init__(self):
        if self.interval <= 0:
            raise AppConfigError("stats interval must be positive")


@dataclass
class AppConfig:
    traci_host: str = "127.0.0.1"
    traci_port: int = 8813
    net_file: str = ""
    heightfield_file: str | None = None
    mapper: CoordinateMapper = field(default_factory=CoordinateMapper)
    traffic_lights: TrafficLightSettings = field(default_factory=TrafficLightSettings)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    osc_enabled: bool = True
    osc: OscConfig = field(default_factory=OscConfig)
    websocket: WebsocketSettings = field(default_factory=WebsocketSettings)
    stats: StatsSettings = field(default_factory=StatsSettings)
    tick_rate: float = 60.0
    listener: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.tick_rate <= 0:
            raise AppConfigError("tick_rate must be positive")

    def validate_files(self) -> None:
        """Startup check: every referenced file must exist."""
        if not self.net_file:
            raise AppConfigError("no network file configured (net_file)")
        if not Path(self.net_file).is_file():
            raise AppConfigError(f"network file not found: {self.net_file}")
        if self.heightfield_file and not Path(self.heightfield_file).is_file():
            raise AppConfigError(f"heightfield file not found: {self.heightfield_file}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["listener"] = list(self.listener)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "AppConfig":
        doc = dict(doc or {})
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise AppConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")

        def build(key, klass):
            if key in doc and doc[key] is not None:
                value = doc[key]
                if not isinstance(value, dict):
                    raise AppConfigError(f"{key} must be a mapping")
                try:
                    doc[key] = klass(**value)
                except TypeError as exc:
                    raise AppConfigError(f"bad {key} section: {exc}") from None

        build("mapper", CoordinateMapper)
        build("traffic_lights", TrafficLightSettings)
        build("bridge", BridgeConfig)
        build("osc", OscConfig)
        build("websocket", WebsocketSettings)
        build("stats", StatsSettings)
        if "listener" in doc and doc["listener"] is not None:
            listener = doc["listener"]
            if len(listener) != 3:
                raise AppConfigError("listener must be [x, y, z]")
            doc["listener"] = tuple(float(v) for v in listener)
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise AppConfigError(f"bad configuration: {exc}") from None


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path: str | Path | None, overrides: dict | None = None) -> AppConfig:
    """Assemble the effective config: defaults, then file, then overrides."""
    doc = AppConfig().to_dict()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise AppConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise AppConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise AppConfigError(f"config {path} must be a YAML mapping")
        _deep_update(doc, loaded)
    if overrides:
        _deep_update(doc, overrides)
    return AppConfig.from_dict(doc)


def dump_config(config: AppConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)

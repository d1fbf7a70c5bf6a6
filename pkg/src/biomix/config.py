"""Engine configuration: one TOML tree, validated at startup, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import sys
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .rules import BUILTIN_RULESETS


class ConfigError(ValueError):
    pass


@dataclass
class SessionConfig:
    n_fx: int = 4
    rulesets: list[str] = field(default_factory=lambda: [f"builtin:{n}" for n in BUILTIN_RULESETS])
    seed: int = 0
    calibration_file: str = ""
    calibration_s: float = 60.0
    realtime: bool = False


@dataclass
class StreamsConfig:
    eeg: str = ""
    ecg: str = ""
    audio: list[str] = field(default_factory=list)
    duration_s: float = 60.0


@dataclass
class EegConfig:
    hop_samples: int = 500
    theta_flat_uv: float = 1.0
    t_dead_windows: int = 3


@dataclass
class CalibrationConfig:
    median: float = 150.0
    spread: float = 1.0


@dataclass
class EcgConfig:
    bin_ms: float = 50.0
    mxdmn_floor_s: float = 0.016
    min_intervals: int = 5
    theta_flat_uv: float = 1.0
    t_dead_updates: int = 6
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)


@dataclass
class AudioConfig:
    hop_s: float = 1.0
    estimator: str = "builtin"
    external_endpoint: str = ""
    timeout_s: float = 0.2
    static_va: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class MixConfig:
    tick_s: float = 0.1
    tau: float = 0.3
    g_floor: float = 0.05
    smoothing_tau_s: float = 0.25


@dataclass
class MidiConfig:
    port: str = ""
    input_port: str = ""
    channel: int = 0
    dry_cc: int = 20
    cc_per_fx: list[int] = field(default_factory=list)
    strength_cc: int = 11
    strength: float = 1.0


@dataclass
class OscConfig:
    enabled: bool = False
    host: str = "127.0.0.1"
    port: int = 9000
    address: str = "/witheflow/gain"


@dataclass
class EngineConfig:
    session: SessionConfig = field(default_factory=SessionConfig)
    streams: StreamsConfig = field(default_factory=StreamsConfig)
    eeg: EegConfig = field(default_factory=EegConfig)
    ecg: EcgConfig = field(default_factory=EcgConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    midi: MidiConfig = field(default_factory=MidiConfig)
    osc: OscConfig = field(default_factory=OscConfig)
    base_dir: Path = field(default_factory=Path.cwd, metadata={"internal": True})

    def resolve(self, ref: str) -> str:
        """Make a file reference relative to the config file's directory."""
        if not ref or ref.startswith(("synthetic:", "tcp://", "builtin:", "unix:")) or Path(ref).is_absolute():
            return ref
        return str(self.base_dir / ref)

    def cc_per_fx(self) -> list[int]:
        if self.midi.cc_per_fx:
            return list(self.midi.cc_per_fx)
        return [self.midi.dry_cc + 1 + i for i in range(self.session.n_fx)]


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        return _build(tp, value, f"{path}.")
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        _, inner = typing.get_args(tp)
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        return {str(k): _coerce(inner, v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{path}{k}' for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}{k}") for k, v in data.items()}
    return cls(**kwargs)


def validate(cfg: EngineConfig) -> EngineConfig:
    s = cfg.session
    if s.n_fx < 1:
        raise ConfigError("session.n_fx must be >= 1")
    if not s.rulesets:
        raise ConfigError("session.rulesets must name at least one ruleset")
    if cfg.streams.audio and len(cfg.streams.audio) != s.n_fx + 1:
        raise ConfigError(f"streams.audio needs {s.n_fx + 1} entries (dry + {s.n_fx} FX)")
    if cfg.mix.tick_s <= 0 or cfg.mix.tau <= 0 or cfg.mix.smoothing_tau_s < 0:
        raise ConfigError("mix.tick_s and mix.tau must be positive, mix.smoothing_tau_s non-negative")
    if not 0.0 <= cfg.mix.g_floor < 1.0:
        raise ConfigError("mix.g_floor must lie in [0, 1)")
    if cfg.ecg.calibration.median <= 0 or cfg.ecg.calibration.spread <= 0:
        raise ConfigError("ecg.calibration median and spread must be positive")
    if cfg.audio.estimator not in ("builtin", "external"):
        raise ConfigError("audio.estimator must be 'builtin' or 'external'")
    if cfg.audio.estimator == "external" and not cfg.audio.external_endpoint:
        raise ConfigError("audio.external_endpoint is required for the external estimator")
    for k, v in cfg.audio.static_va.items():
        if not k.isdigit() or int(k) > s.n_fx or len(v) != 2:
            raise ConfigError(f"audio.static_va.{k}: expected channel index 0..{s.n_fx} -> [valence, arousal]")
    if len(cfg.cc_per_fx()) != s.n_fx:
        raise ConfigError(f"midi.cc_per_fx needs {s.n_fx} entries")
    if cfg.eeg.hop_samples < 1 or cfg.eeg.t_dead_windows < 1 or cfg.ecg.t_dead_updates < 1:
        raise ConfigError("hop and persistence counts must be >= 1")
    return cfg


def config_from_dict(data: dict, base_dir: Path | None = None) -> EngineConfig:
    cfg = _build(EngineConfig, data)
    cfg.base_dir = base_dir or Path.cwd()
    return validate(cfg)


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return validate(EngineConfig())
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, path.resolve().parent)


def fixture_config() -> EngineConfig:
    """The bundled 60 s synthetic session."""
    text = resources.files("biomix.data").joinpath("fixture_session.toml").read_text()
    return config_from_dict(tomllib.loads(text))

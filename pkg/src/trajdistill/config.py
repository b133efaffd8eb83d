"""Run configuration: strict JSON sections over plain dataclasses.

Every key in a config file must name a real field; unknown keys raise with
the offending path so typos never silently fall back to defaults. The
config hash is the SHA-256 of the fully resolved document in canonical
form, so two runs share a hash exactly when every setting matches.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .exceptions import ConfigError


@dataclass(frozen=True)
class SynthSection:
    n_scenes: int = 60
    agents_per_scene: int = 3
    steps_per_agent: int = 44
    speed_low: float = 0.8
    speed_high: float = 1.4
    turn_angle_deg: float = 55.0
    turn_steps: int = 4
    noise_std: float = 0.01
    spawn_box: float = 8.0


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic"          # synthetic | interchange | trajectories
    path: str = ""
    dt: float = 0.4
    history_len: int = 8
    horizon: int = 12
    stride: int = 2
    max_neighbors: int = 8
    neighbor_radius: float = 5.0
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    split_seed: int = 1234
    synth: SynthSection = field(default_factory=SynthSection)


@dataclass(frozen=True)
class ScheduleSection:
    alpha_start: float = 0.9999
    alpha_end: float = 0.0001


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 64
    layers: int = 3
    heads: int = 4
    time_width: int = 16


@dataclass(frozen=True)
class EncoderSection:
    recurrent_width: int = 128
    neighbor_width: int = 64
    out_width: int = 256


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    ema_decay: float = 0.995
    plateau_window: int = 400
    plateau_rel: float = 1e-4
    log_every: int = 25


@dataclass(frozen=True)
class DistillSection:
    k_start: int = 128
    k_target: int = 4
    lam: float = 0.5
    steps_per_iteration: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    ema_decay: float = 0.98
    plateau_window: int = 100
    plateau_rel: float = 1e-4
    ablate_acceleration: bool = False
    ablate_compression: bool = False
    ablate_data_term: bool = False
    ablate_weight_init: bool = False


@dataclass(frozen=True)
class EvalSection:
    n_samples: int = 20
    steps: int = 0                   # 0: the checkpoint's native grid
    stochastic: bool = False
    split: str = "test"              # train | val | test | all
    max_windows: int = 0             # 0: no cap
    bench_repeats: int = 5


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    teacher: ModelSection = field(default_factory=lambda: ModelSection(hidden=64))
    student: ModelSection = field(default_factory=lambda: ModelSection(hidden=16))
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)


def _build(cls, value, path: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(value) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, v in value.items():
        sub = _section_class(cls, name)
        if sub is not None:
            kwargs[name] = _build(sub, v, f"{path}.{name}")
        elif isinstance(v, dict):
            raise ConfigError(f"{path}.{name}: unexpected object value")
        else:
            kwargs[name] = _leaf(fields[name], v, f"{path}.{name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _leaf(f: dataclasses.Field, v, path: str):
    """Check a scalar against the declared field type; ints widen to float."""
    want = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if want == "bool":
        if not isinstance(v, bool):
            raise ConfigError(f"{path}: expected a boolean, got {v!r}")
        return v
    if want == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}: expected an integer, got {v!r}")
        return v
    if want == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {v!r}")
        return float(v)
    if want == "str":
        if not isinstance(v, str):
            raise ConfigError(f"{path}: expected a string, got {v!r}")
        return v
    return v


def _section_class(cls, name: str):
    for f in dataclasses.fields(cls):
        if f.name == name:
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default  # type: ignore[misc]
            if dataclasses.is_dataclass(default):
                return type(default)
    return None


def run_config_from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "config")


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return run_config_from_dict(doc)


def resolved_dict(config) -> dict:
    return dataclasses.asdict(config)


def config_hash(config) -> str:
    blob = json.dumps(resolved_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()

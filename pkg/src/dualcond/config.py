"""Run configuration: one INI file with a section per pipeline stage."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .checkpoint import canonical_json


@dataclass
class DataConfig:
    image_size: int = 32
    n_id_classes: int = 5
    id_train: int = 1000
    id_val: int = 100
    id_test: int = 200
    ood_test: int = 200
    seed: int = 0


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0195


@dataclass
class AutoencoderConfig:
    widths: tuple = (16, 32, 32)
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3
    ssim_floor: float = 0.90
    seed: int = 0


@dataclass
class ClassifierConfig:
    widths: tuple = (32, 64, 128)
    feature_dim: int = 128
    epochs: int = 4
    batch_size: int = 64
    lr: float = 2e-3
    accuracy_floor: float = 0.85
    seed: int = 0


@dataclass
class DiffusionConfig:
    widths: tuple = (32, 64)
    time_dim: int = 64
    attn_dim: int = 64
    heads: int = 1
    cond_dim: int = 128
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    log_every: int = 1
    # fail the run unless the late-training loss falls below half the early loss
    require_convergence: bool = True
    seed: int = 0


@dataclass
class SamplerConfig:
    steps: int = 100
    # 0 starts from pure noise at T; otherwise the input latent is noised to this step
    noise_to_t: int = 0


@dataclass
class EvaluateConfig:
    tau: float | None = None
    batch_size: int = 400
    seed: int = 0
    grid_samples: int = 8


@dataclass
class AblateConfig:
    seeds: tuple = (0, 1, 2)
    modes: tuple = ("unconditional", "idcc_only", "lifc_only", "dual")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        payload = {n: d[n] for n in (names or sorted(d))}
        return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, default, name: str):
    raw = raw.strip()
    if isinstance(default, tuple):
        items = [p.strip() for p in raw.split(",") if p.strip()]
        proto = default[0] if default else raw
        return tuple(_parse_value(p, proto, name) for p in items)
    if default is None or isinstance(default, float):
        if default is None and raw.lower() in ("", "none"):
            return None
        return float(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    return raw


def load_config(path=None) -> RunConfig:
    """Read an INI file over the defaults. ``None`` gives the defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case (the schedule length is `T`)
    parser.read(path)
    for section in parser.sections():
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section [{section}]")
        sub = getattr(cfg, section)
        known = {f.name: f for f in fields(sub)}
        changes = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                changes[key] = _parse_value(raw, getattr(sub, key), key)
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
        setattr(cfg, section, dataclasses.replace(sub, **changes))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    d = cfg.data
    for name in ("id_train", "id_val", "id_test", "ood_test", "image_size", "n_id_classes"):
        if getattr(d, name) <= 0:
            raise ConfigError(f"[data] {name} must be positive")
    for sec in ("autoencoder", "classifier", "diffusion"):
        s = getattr(cfg, sec)
        if s.epochs <= 0 or s.batch_size <= 0 or s.lr <= 0:
            raise ConfigError(f"[{sec}] epochs, batch_size and lr must be positive")
    if cfg.sampler.steps < 1 or cfg.sampler.steps > cfg.schedule.T:
        raise ConfigError("[sampler] steps must lie in [1, T]")
    if not 0 <= cfg.sampler.noise_to_t <= cfg.schedule.T:
        raise ConfigError("[sampler] noise_to_t must lie in [0, T]")


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, sub in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in sub.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)

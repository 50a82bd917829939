"""Run configuration: typed dataclasses with an INI text form.

Every section maps to one dataclass; keys are the dataclass field names.
Unknown sections or keys are rejected so a typo never silently falls back
to a default.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

from .autoencoder import AEConfig
from .cmt import CMTConfig, ExpertConfig
from .heads import IPHConfig, MGHConfig
from .numerics import ConfigError

TASKS = ("l2m", "vl2m", "v2m", "m2m", "ip")


@dataclass
class DataConfig:
    n_samples: int = 5000
    min_seconds: float = 3.0
    max_seconds: float = 8.0
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    seed: int = 0


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 2e-4
    warmup_steps: int = 2000
    epochs: int = 10
    max_steps: int = 0  # 0 = no cap beyond epochs
    lambda_motion: float = 1.0
    lambda_intent: float = 1.0
    intent_period: int = 4
    w_l2m: float = 1.0
    w_vl2m: float = 1.0
    w_v2m: float = 1.0
    w_m2m: float = 1.0
    w_ip: float = 1.0
    diffusion_mult: int = 4
    ip_vision_dropout: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_motion < 0 or self.lambda_intent < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.intent_period < 1:
            raise ConfigError("intent_period must be >= 1")
        if any(w < 0 for w in self.task_weights().values()):
            raise ConfigError("task weights must be non-negative")
        if sum(self.task_weights().values()) <= 0:
            raise ConfigError("at least one task weight must be positive")
        if self.diffusion_mult < 1:
            raise ConfigError("diffusion_mult must be >= 1")

    def task_weights(self) -> dict[str, float]:
        return {t: float(getattr(self, f"w_{t}")) for t in TASKS}


@dataclass
class SampleConfig:
    iters: int = 17
    euler_steps: int = 10
    noise_scale: float = 0.0
    beam: int = 1

    def __post_init__(self) -> None:
        if self.iters < 1 or self.euler_steps < 1:
            raise ConfigError("iters and euler_steps must be >= 1")


@dataclass
class EvalConfig:
    dim: int = 128
    hidden: int = 128
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    temperature: float = 0.07
    pool_size: int = 32
    n_pairs: int = 300
    bootstrap: int = 20
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    ae: AEConfig = field(default_factory=AEConfig)
    cmt: CMTConfig = field(default_factory=CMTConfig)
    mgh: MGHConfig = field(default_factory=MGHConfig)
    iph: IPHConfig = field(default_factory=IPHConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- text form ---------------------------------------------------------
    def to_ini(self) -> str:
        lines = []
        for sec in _SECTIONS:
            lines.append(f"[{sec}]")
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]

    @classmethod
    def from_ini(cls, text: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str  # keep key case
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}".splitlines()[0]) from None
        for key, value in (overrides or {}).items():
            sec, _, name = key.partition(".")
            if not name:
                raise ConfigError(f"override {key!r} must look like section.key")
            if not parser.has_section(sec):
                parser.add_section(sec)
            parser.set(sec, name, value)
        kwargs = {}
        for sec in parser.sections():
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]")
            dc = _SECTIONS[sec]
            known = {f.name: f for f in dataclasses.fields(dc)}
            values = {}
            for name, raw in parser.items(sec):
                if name not in known:
                    raise ConfigError(f"unknown key {name!r} in [{sec}]")
                values[name] = _parse(raw, known[name], dc, sec)
            try:
                kwargs[sec] = dc(**values)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"[{sec}]: {e}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Path | str | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        text = "" if path is None else Path(path).read_text()
        return cls.from_ini(text, overrides)


_SECTIONS = {
    "data": DataConfig,
    "ae": AEConfig,
    "cmt": CMTConfig,
    "mgh": MGHConfig,
    "iph": IPHConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval": EvalConfig,
}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    if isinstance(v, tuple) and v and isinstance(v[0], ExpertConfig):
        return ", ".join(f"{e.k_min}:{_format(float(e.k_max))}:{e.tau!r}" for e in v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, f: dataclasses.Field, dc, sec: str):
    default = getattr(dc(), f.name)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) and default and isinstance(default[0], ExpertConfig):
            out = []
            for part in raw.split(","):
                k_min, k_max, tau = part.strip().split(":")
                out.append(ExpertConfig(int(k_min), float(k_max), float(tau)))
            return tuple(out)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {sec}.{f.name}: {raw!r} ({e})") from None


def desk_config() -> RunConfig:
    """Small configuration that trains in minutes on one CPU core."""
    return RunConfig(
        data=DataConfig(n_samples=5000, min_seconds=3.0, max_seconds=4.0),
        ae=AEConfig(latent_dim=16, channels=(128, 128), epochs=30, batch_size=64),
        cmt=CMTConfig(layers=2, width=128, heads=4),
        mgh=MGHConfig(depth=4, width=256, time_dim=64),
        iph=IPHConfig(layers=3, width=128, heads=4),
        train=TrainConfig(lr=1e-3, warmup_steps=200, epochs=40, batch_size=64),
        sample=SampleConfig(),
        eval=EvalConfig(),
    )

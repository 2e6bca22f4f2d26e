"""Training configuration and its plain-text ``key = value`` file format.

Blank lines and ``#`` comments are ignored. Every :class:`TrainConfig` field
is a key; unknown keys, duplicate keys and values that do not parse as the
field's type are errors. Booleans accept true/false/1/0/yes/no.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # composite loss
    lambda_a: float = 0.05
    lambda_h: float = 0.1
    lambda_l: float = 0.2
    tau_v: float = 2.0
    tau_t: float = 5.0
    # candidate sampling
    dropout_p: float = 0.1
    mc_samples: int = 10
    # optimisation
    learning_rate: float = 1e-3
    lr_decay: bool = False  # cosine decay to zero over each stage
    keep_best: bool = True  # student returns its best validation epoch
    batch_size: int = 16
    grad_clip: float = 1.0
    train_dropout: float = 0.0
    pretrain_epochs: int = 10
    teacher_epochs: int = 10
    epochs: int = 10
    seed: int = 0
    coarse_fine_mix: float = 0.5
    # data
    n_scenes: int = 100
    data_seed: int = 0
    # distillation components (cumulative ablation toggles)
    traj_kd: bool = True
    traj_refine: bool = True
    mc_dropout: bool = True
    visual_kd: bool = True
    cache_targets: bool = False

    def __post_init__(self) -> None:
        for name in ("lambda_a", "lambda_h", "lambda_l", "dropout_p", "learning_rate", "grad_clip", "train_dropout"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("tau_v", "tau_t"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.dropout_p < 1 or not self.train_dropout < 1:
            raise ConfigError("dropout probabilities must be below 1")
        if not 0.0 <= self.coarse_fine_mix <= 1.0:
            raise ConfigError("coarse_fine_mix must lie in [0, 1]")
        for name in ("batch_size", "n_scenes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("mc_samples", "pretrain_epochs", "teacher_epochs", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).hexdigest()

    def with_overrides(self, **kw) -> "TrainConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def field_types() -> dict[str, str]:
    return {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(TrainConfig)}


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    types = field_types()
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, raw, types[key])
    return replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v)}")
    return "\n".join(lines) + "\n"

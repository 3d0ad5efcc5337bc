"""Hyperparameter containers. Defaults are the published settings."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Tuple


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    epochs: int
    lr: float
    l2: float

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 weight must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    hidden: Tuple[int, ...]
    latent_dim: int
    mapper_hidden: Tuple[int, ...]
    batch_size: int
    init: StageConfig = StageConfig(250, 1e-3, 1e-5)
    coupled: StageConfig = StageConfig(300, 1e-5, 1e-5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "mapper_hidden", tuple(int(h) for h in self.mapper_hidden))
        if any(h < 1 for h in self.hidden + self.mapper_hidden) or self.latent_dim < 1:
            raise ConfigError("layer sizes must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")

    def encoder_sizes(self, n_in: int):
        return [n_in, *self.hidden, self.latent_dim]

    def decoder_sizes(self, n_out: int):
        return [self.latent_dim, *reversed(self.hidden), n_out]

    def mapper_sizes(self):
        return [self.latent_dim, *self.mapper_hidden, self.latent_dim]

    def with_latent_dim(self, k: int):
        """Same architecture with bottleneck ``k``; mapper hidden width scales to 2k."""
        return replace(self, latent_dim=k, mapper_hidden=(2 * k,))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["mapper_hidden"] = list(self.mapper_hidden)
        return d


@dataclass(frozen=True)
class CacdrConfig(ModelConfig):
    hidden: Tuple[int, ...] = (256, 128)
    latent_dim: int = 64
    mapper_hidden: Tuple[int, ...] = (128,)
    batch_size: int = 32


@dataclass(frozen=True)
class LfacdrConfig(ModelConfig):
    hidden: Tuple[int, ...] = (512, 256)
    latent_dim: int = 128
    mapper_hidden: Tuple[int, ...] = (256,)
    batch_size: int = 500
    lam: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")


def config_from_dict(cls, d: dict):
    d = dict(d)
    for key in ("init", "coupled"):
        if isinstance(d.get(key), dict):
            d[key] = StageConfig(**d[key])
    known = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in known})

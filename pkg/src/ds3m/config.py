from __future__ import annotations

from dataclasses import dataclass, asdict, fields

from .diffcore import ConfigError

FAMILIES = ("gaussian", "lognormal")


@dataclass(frozen=True)
class ModelConfig:
    """Network sizes. ``input_dim`` defaults to ``obs_dim`` (x_t = y_{t-1})."""

    obs_dim: int = 1
    n_regimes: int = 2
    latent_dim: int = 2
    hidden_dim: int = 10
    input_dim: int | None = None
    family: str = "gaussian"

    def __post_init__(self):
        if self.input_dim is None:
            object.__setattr__(self, "input_dim", self.obs_dim)
        if self.n_regimes < 1:
            raise ConfigError("n_regimes must be >= 1")
        for name in ("obs_dim", "latent_dim", "hidden_dim", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    initial_lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    early_stop_patience: int = 20
    max_epochs: int = 100
    kl_anneal_start: float = 0.01
    kl_anneal_end: float = 1.0
    anneal_epochs: int = 50
    samples_per_seq: int = 1
    grad_clip: float = 10.0
    eval_seed: int = 12345
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patiences must be >= 1")
        if not 0.0 <= self.kl_anneal_start <= self.kl_anneal_end:
            raise ConfigError("need 0 <= kl_anneal_start <= kl_anneal_end")
        if self.batch_size < 1 or self.max_epochs < 1 or self.samples_per_seq < 1:
            raise ConfigError("batch_size, max_epochs and samples_per_seq must be >= 1")
        if self.anneal_epochs < 0:
            raise ConfigError("anneal_epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

"""Plain-text experiment configuration (INI sections: run, data, model, train, predict)."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Tuple

from .config import ModelConfig, TrainConfig
from .diffcore import ConfigError
from .experiments import LORENZ_SPLITS, LORENZ_WINDOW, TOY_SPLITS, TOY_WINDOW

SIMULATORS = ("toy", "lorenz")
KINDS = ("ds3m", "baseline-gru")

_DATA_KEYS = {"source", "window", "splits", "target_columns", "length"}
_MODEL_KEYS = {"kind", "n_regimes", "latent_dim", "hidden_dim", "family"}
_PREDICT_KEYS = {"samples", "coverage"}
_RUN_KEYS = {"seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class DataSection:
    source: str = "toy"                 # simulator name or path to a numeric table
    window: int = TOY_WINDOW
    splits: Tuple[int, int, int] = TOY_SPLITS
    target_columns: Tuple[str, ...] = ()
    length: int | None = None           # simulator length override

    @property
    def simulated(self) -> bool:
        return self.source in SIMULATORS


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    kind: str = "ds3m"
    model: Dict = field(default_factory=dict)    # ModelConfig kwargs other than dimensions from data
    train: Dict = field(default_factory=dict)    # TrainConfig overrides
    samples: int = 100
    coverage: float = 0.9

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.seed})

    def model_config(self, obs_dim: int) -> ModelConfig:
        return ModelConfig(obs_dim=obs_dim, **self.model)

    def to_ini(self) -> str:
        """Canonical text form; parsing it back gives an equal config."""
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        d = {"source": self.data.source, "window": str(self.data.window),
             "splits": ",".join(map(str, self.data.splits))}
        if self.data.target_columns:
            d["target_columns"] = ",".join(self.data.target_columns)
        if self.data.length is not None:
            d["length"] = str(self.data.length)
        cp["data"] = d
        cp["model"] = {"kind": self.kind, **{k: str(v) for k, v in sorted(self.model.items())}}
        cp["train"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in sorted(self.train.items())}
        cp["predict"] = {"samples": str(self.samples), "coverage": repr(self.coverage)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _int(section: str, key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}") from None


def _float(section: str, key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}") from None


def _check_keys(cp: configparser.ConfigParser, section: str, allowed: set):
    if not cp.has_section(section):
        return {}
    items = dict(cp.items(section))
    unknown = sorted(set(items) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return items


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    extra = sorted(set(cp.sections()) - {"run", "data", "model", "train", "predict"})
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")

    run = _check_keys(cp, "run", _RUN_KEYS)
    data = _check_keys(cp, "data", _DATA_KEYS)
    model = _check_keys(cp, "model", _MODEL_KEYS)
    train = _check_keys(cp, "train", _TRAIN_KEYS)
    predict = _check_keys(cp, "predict", _PREDICT_KEYS)

    source = data.get("source", "toy")
    default_window, default_splits = (LORENZ_WINDOW, LORENZ_SPLITS) if source == "lorenz" else (TOY_WINDOW, TOY_SPLITS)
    splits = default_splits
    if "splits" in data:
        parts = [p.strip() for p in data["splits"].split(",")]
        if len(parts) != 3:
            raise ConfigError("[data] splits: expected three comma-separated counts")
        splits = tuple(_int("data", "splits", p) for p in parts)
    ds = DataSection(
        source=source,
        window=_int("data", "window", data["window"]) if "window" in data else default_window,
        splits=splits,
        target_columns=tuple(c.strip() for c in data.get("target_columns", "").split(",") if c.strip()),
        length=_int("data", "length", data["length"]) if "length" in data else None,
    )

    kind = model.pop("kind", "ds3m")
    if kind not in KINDS:
        raise ConfigError(f"[model] kind must be one of {KINDS}, got {kind!r}")
    mk = {}
    for k, v in model.items():
        mk[k] = v if k == "family" else _int("model", k, v)
    if source == "lorenz":
        mk.setdefault("latent_dim", 3)
        mk.setdefault("hidden_dim", 20)

    tk = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    for k, v in train.items():
        tk[k] = _int("train", k, v) if types[k] in ("int", int) else _float("train", k, v)

    cfg = ExperimentConfig(
        seed=_int("run", "seed", run["seed"]) if "seed" in run else 0,
        data=ds, kind=kind, model=mk, train=tk,
        samples=_int("predict", "samples", predict["samples"]) if "samples" in predict else 100,
        coverage=_float("predict", "coverage", predict["coverage"]) if "coverage" in predict else 0.9,
    )
    # surface invalid values now rather than mid-run
    cfg.train_config()
    cfg.model_config(1)
    if cfg.samples < 1 or not 0 < cfg.coverage < 1:
        raise ConfigError("[predict] need samples >= 1 and 0 < coverage < 1")
    if ds.window < 2 or min(ds.splits) < 1:
        raise ConfigError("[data] need window >= 2 and positive split counts")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())

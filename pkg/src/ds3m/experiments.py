"""End-to-end simulation studies: simulate -> split -> train -> forecast -> segment -> score."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
import torch

from . import evaluation as ev
from .config import ModelConfig, TrainConfig
from .forecasting import predict_rolling, segment_probs
from .simulators import LabeledSeries, LorenzConfig, ToyConfig, simulate_lorenz, simulate_toy
from .training import DatasetSplit, split_windows, train

TOY_SPLITS = (1000, 480, 500)
TOY_WINDOW = 20
LORENZ_SPLITS = (1000, 990, 1000)
LORENZ_WINDOW = 5


def toy_model_config() -> ModelConfig:
    return ModelConfig(obs_dim=1, n_regimes=2, latent_dim=2, hidden_dim=10)


def lorenz_model_config() -> ModelConfig:
    return ModelConfig(obs_dim=10, n_regimes=2, latent_dim=3, hidden_dim=20)


@dataclass
class StudyResult:
    forecast: ev.MetricsRecord
    inference: ev.MetricsRecord
    gamma: np.ndarray
    split: DatasetSplit
    series: LabeledSeries
    params: Tuple = ()
    extra: Dict = field(default_factory=dict)


def evaluate_model(gen_params, inf_params, split: DatasetSplit, series: LabeledSeries,
                   family: str = "gaussian", S: int = 100, coverage: float = 0.9,
                   seed: int = 0) -> Tuple[ev.MetricsRecord, ev.MetricsRecord, list]:
    """Score one-step forecasts and last-step segmentation of every test window."""
    test = split.test
    K = gen_params.n_regimes
    results = predict_rolling(gen_params, inf_params, test, split.normalizer, S, coverage, seed, family)
    y_true = test.y[:, -1, :]
    y_pred = np.stack([r.mean for r in results])
    d_true = series.d_true[test.target_index]
    d_fore = np.stack([r.regime_probs for r in results]).argmax(-1)
    forecast = ev.score(y_true, y_pred, d_fore, d_true, K)
    lower = np.stack([r.lower for r in results])
    upper = np.stack([r.upper for r in results])
    forecast.extra["coverage"] = float(np.mean((y_true >= lower) & (y_true <= upper)))

    x_n, y_n = split.normalized(test)
    probs = segment_probs(gen_params, inf_params, y_n, x_n, S, seed, family)
    d_seg = probs[:, -1, :].argmax(-1)
    inference = ev.score(y_true, y_pred, d_seg, d_true, K)
    return forecast, inference, results


def run_study(series: LabeledSeries, window: int, sizes, model_config: ModelConfig,
              train_config: TrainConfig, S: int = 100, coverage: float = 0.9) -> StudyResult:
    split = split_windows(series.y, window, sizes, model_config.family)
    gen_params, inf_params, report = train(split, model_config, train_config)
    forecast, inference, _ = evaluate_model(gen_params, inf_params, split, series,
                                            model_config.family, S, coverage, train_config.seed)
    gamma = gen_params.regime_chain.gamma.detach().numpy()
    return StudyResult(forecast, inference, gamma, split, series, (gen_params, inf_params),
                       {"report": report})


def run_toy(seed: int, train_config: TrainConfig | None = None, S: int = 100) -> StudyResult:
    torch.manual_seed(seed)
    series = simulate_toy(ToyConfig(seed=seed))
    tc = train_config or TrainConfig(seed=seed)
    return run_study(series, TOY_WINDOW, TOY_SPLITS, toy_model_config(), tc, S)


def run_lorenz(seed: int, train_config: TrainConfig | None = None, S: int = 100) -> StudyResult:
    series = simulate_lorenz(LorenzConfig(seed=seed))
    tc = train_config or TrainConfig(seed=seed)
    return run_study(series, LORENZ_WINDOW, LORENZ_SPLITS, lorenz_model_config(), tc, S)

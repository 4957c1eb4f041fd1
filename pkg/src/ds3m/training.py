"""Windowing, normalisation and the minibatch training loop."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .diffcore import DTYPE, ConfigError
from .generative import GenerativeParams, init_generative
from .inference import InferenceParams, elbo_minibatch, init_inference

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class Windows:
    """Overlapping fixed-length windows. ``start[i]`` is the series index of step 0."""

    x: np.ndarray        # N x T x U
    y: np.ndarray        # N x T x D
    start: np.ndarray    # N

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Windows":
        return Windows(self.x[idx], self.y[idx], self.start[idx])

    @property
    def target_index(self) -> np.ndarray:
        """Series index of each window's last step."""
        return self.start + self.y.shape[1] - 1


def make_windows(series: np.ndarray, window_len: int, drop_padded: bool = True) -> Windows:
    """Stride-1 windows with x_t = y_{t-1}.

    The window starting at series index 0 has no lagged value for its first
    step and is padded with zeros; ``drop_padded`` removes it.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    if window_len < 2:
        raise ValueError("window_len must be >= 2")
    n_total = len(series)
    if n_total < window_len:
        raise ValueError(f"series of length {n_total} is shorter than window_len {window_len}")
    lagged = np.vstack([np.zeros((1, series.shape[1])), series[:-1]])
    starts = np.arange(n_total - window_len + 1)
    if drop_padded and len(starts) > 1:
        starts = starts[1:]
    idx = starts[:, None] + np.arange(window_len)[None, :]
    return Windows(lagged[idx], series[idx], starts)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, family: str = "gaussian") -> "Normalizer":
        values = np.asarray(values, dtype=float).reshape(-1, values.shape[-1])
        std = values.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        if family == "lognormal":
            # scale only, so positive data stays positive
            return cls(np.zeros(values.shape[1]), std)
        return cls(values.mean(axis=0), std)

    def normalize(self, y):
        return (np.asarray(y) - self.mean) / self.std

    def denormalize(self, y):
        return np.asarray(y) * self.std + self.mean


@dataclass
class DatasetSplit:
    train: Windows
    validation: Windows
    test: Windows
    normalizer: Normalizer

    def normalized(self, part: Windows) -> Tuple[torch.Tensor, torch.Tensor]:
        n = self.normalizer
        return (torch.as_tensor(n.normalize(part.x), dtype=DTYPE),
                torch.as_tensor(n.normalize(part.y), dtype=DTYPE))


def split_windows(series: np.ndarray, window_len: int, sizes: Sequence[int],
                  family: str = "gaussian") -> DatasetSplit:
    """First ``sizes[0]`` windows train, the next ``sizes[1]`` validate, the last ``sizes[2]`` test.

    Windows between validation and test (when the counts do not cover every
    window) are left unused. Normalisation statistics come from the series
    span covered by training windows only.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    w = make_windows(series, window_len)
    n_train, n_val, n_test = sizes
    if min(sizes) < 1 or n_train + n_val + n_test > len(w):
        raise ConfigError(f"split sizes {tuple(sizes)} do not fit {len(w)} windows")
    train = w.subset(slice(0, n_train))
    val = w.subset(slice(n_train, n_train + n_val))
    test = w.subset(slice(len(w) - n_test, len(w)))
    if family == "lognormal" and (series <= 0).any():
        raise ConfigError("lognormal emission requires strictly positive data")
    span = series[train.start[0]: train.target_index[-1] + 1]
    return DatasetSplit(train, val, test, Normalizer.fit(span, family))


def kl_beta(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if config.anneal_epochs <= 0 or epoch >= config.anneal_epochs:
        return config.kl_anneal_end
    frac = epoch / config.anneal_epochs
    return config.kl_anneal_start + frac * (config.kl_anneal_end - config.kl_anneal_start)


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    beta: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    seconds: float = 0.0

    def records(self) -> List[dict]:
        return [
            {"epoch": e, "train_loss": self.train_loss[e], "val_loss": self.val_loss[e],
             "lr": self.lr[e], "beta": self.beta[e]}
            for e in range(len(self.train_loss))
        ]


def optimize(params: Dict[str, torch.Tensor],
             batch_loss: Callable[[np.ndarray, float, torch.Generator], torch.Tensor],
             val_loss: Callable[[], float],
             n_train: int, config: TrainConfig,
             best_val_loss: float = math.inf) -> TrainReport:
    """Shared loop: Adam, KL annealing, plateau LR decay, early stopping.

    ``params`` is updated in place and finally holds the best-validation
    values. ``batch_loss(indices, beta, generator)`` returns a scalar loss.
    """
    start = time.perf_counter()
    names = list(params)
    tensors = [params[k] for k in names]
    opt = torch.optim.Adam(tensors, lr=config.initial_lr, betas=(0.9, 0.999), eps=1e-8)
    gen = torch.Generator().manual_seed(config.seed)
    report = TrainReport(best_val_loss=best_val_loss)
    best_state = [t.detach().clone() for t in tensors]
    lr = config.initial_lr
    since_best = 0
    since_plateau = 0

    for epoch in range(config.max_epochs):
        beta = kl_beta(epoch, config)
        order = torch.randperm(n_train, generator=gen).numpy()
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, n_train, config.batch_size)):
            idx = order[lo: lo + config.batch_size]
            loss = batch_loss(idx, beta, gen)
            if not torch.isfinite(loss.detach()):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(tensors, config.grad_clip)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        v = float(val_loss())
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(total / count)
        report.val_loss.append(v)
        report.lr.append(lr)
        report.beta.append(beta)
        log.info("epoch %d train %.4f val %.4f lr %.2e beta %.3f", epoch, total / count, v, lr, beta)

        if v < report.best_val_loss:
            report.best_val_loss = v
            report.best_epoch = epoch
            best_state = [t.detach().clone() for t in tensors]
            since_best = since_plateau = 0
        else:
            since_best += 1
            since_plateau += 1
            if since_best >= config.early_stop_patience:
                break
            if since_plateau >= config.plateau_patience:
                lr *= config.plateau_factor
                for g in opt.param_groups:
                    g["lr"] = lr
                since_plateau = 0

    with torch.no_grad():
        for t, best in zip(tensors, best_state):
            t.copy_(best)
    report.seconds = time.perf_counter() - start
    return report


def all_trainable(gen_params: GenerativeParams, inf_params: InferenceParams) -> Dict[str, torch.Tensor]:
    return {**gen_params.trainable(), **inf_params.trainable()}


def evaluate_loss(x: torch.Tensor, y: torch.Tensor, gen_params: GenerativeParams,
                  inf_params: InferenceParams, beta: float = 1.0, seed: int = 0,
                  family: str = "gaussian", chunk: int = 1024) -> float:
    """Mean negative ELBO over a set of windows with a fixed seed."""
    if len(y) == 0:
        raise ValueError("evaluate_loss: empty split")
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(y), chunk):
            yb, xb = y[lo: lo + chunk], x[lo: lo + chunk]
            total += float(elbo_minibatch(yb, xb, gen_params, inf_params, beta, 1, gen, family)) * len(yb)
    return total / len(y)


def init_model(model_config: ModelConfig, seed: int) -> Tuple[GenerativeParams, InferenceParams]:
    gen = torch.Generator().manual_seed(seed)
    return init_generative(model_config, gen), init_inference(model_config, gen)


def train(split: DatasetSplit, model_config: ModelConfig, train_config: TrainConfig,
          init: Tuple[GenerativeParams, InferenceParams] | None = None,
          best_val_loss: float = math.inf):
    """Fit DS3M by minimising the annealed negative ELBO; returns (gen, inf, report)."""
    if len(split.train) == 0 or len(split.validation) == 0:
        raise ValueError("train: need nonempty train and validation splits")
    gen_params, inf_params = init if init is not None else init_model(model_config, train_config.seed)
    x_tr, y_tr = split.normalized(split.train)
    x_va, y_va = split.normalized(split.validation)
    family = model_config.family
    S = train_config.samples_per_seq

    def batch_loss(idx, beta, gen):
        idx = torch.as_tensor(idx)
        return elbo_minibatch(y_tr[idx], x_tr[idx], gen_params, inf_params, beta, S, gen, family)

    def val_loss():
        return evaluate_loss(x_va, y_va, gen_params, inf_params, 1.0, train_config.eval_seed, family)

    report = optimize(all_trainable(gen_params, inf_params), batch_loss, val_loss,
                      len(y_tr), train_config, best_val_loss)
    return gen_params, inf_params, report


def copy_params(obj):
    return copy.deepcopy(obj)

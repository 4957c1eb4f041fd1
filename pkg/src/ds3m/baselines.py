"""Deterministic GRU forecaster with a Gaussian output head, trained by maximum likelihood."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, Tuple

import numpy as np
import torch

from . import diffcore as dc
from .config import TrainConfig
from .diffcore import DTYPE, ParamSet
from .training import DatasetSplit, TrainReport, optimize

FAMILY_TAG = "baseline-gru"


@dataclass
class GruBaselineParams:
    rnn: ParamSet
    head: ParamSet          # mlp2: H -> 2D (mean, logvar)

    def named_tensors(self) -> Iterator[Tuple[str, torch.Tensor]]:
        for k, v in self.rnn.items():
            yield f"baseline.rnn.{k}", v
        for k, v in self.head.items():
            yield f"baseline.head.{k}", v

    def trainable(self) -> Dict[str, torch.Tensor]:
        return dict(self.named_tensors())


def init_baseline(input_dim: int, hidden_dim: int, obs_dim: int, seed: int) -> GruBaselineParams:
    gen = torch.Generator().manual_seed(seed)
    params = GruBaselineParams(dc.init_gru(gen, input_dim, hidden_dim),
                               dc.init_mlp2(gen, hidden_dim, 2 * obs_dim))
    for _, v in params.named_tensors():
        v.requires_grad_(True)
    return params


def _gaussian_head(params: GruBaselineParams, x_seq: torch.Tensor):
    h = dc.gru_scan(x_seq, None, params.rnn)
    mean, logvar = dc.mlp2(h, params.head).chunk(2, dim=-1)
    return mean, dc.clamp_logvar(logvar)


def baseline_nll(params: GruBaselineParams, x_seq: torch.Tensor, y_seq: torch.Tensor) -> torch.Tensor:
    """Mean over sequences of the summed per-step Gaussian negative log-likelihood."""
    mean, logvar = _gaussian_head(params, x_seq)
    return -dc.gaussian_log_pdf(y_seq, mean, logvar, check=False).sum(-1).mean()


def baseline_train(split: DatasetSplit, config: TrainConfig, hidden_dim: int) -> Tuple[GruBaselineParams, TrainReport]:
    x_tr, y_tr = split.normalized(split.train)
    x_va, y_va = split.normalized(split.validation)
    params = init_baseline(x_tr.shape[-1], hidden_dim, y_tr.shape[-1], config.seed)

    def batch_loss(idx, beta, gen):
        idx = torch.as_tensor(idx)
        return baseline_nll(params, x_tr[idx], y_tr[idx])

    def val_loss():
        with torch.no_grad():
            return float(baseline_nll(params, x_va, y_va))

    report = optimize(params.trainable(), batch_loss, val_loss, len(y_tr), config)
    return params, report


@torch.no_grad()
def baseline_predict(params: GruBaselineParams, x_seq, y_seq=None, x_next=None):
    """(mean, logvar) of y_{T+1}; the GRU reads x_{1:T} then ``x_next`` (default y_T).

    Batched inputs ``[..., T, U]`` are accepted.
    """
    x_seq = torch.as_tensor(x_seq, dtype=DTYPE)
    if x_next is None:
        if y_seq is None:
            raise ValueError("baseline_predict: need y_seq or x_next")
        x_next = torch.as_tensor(y_seq, dtype=DTYPE)[..., -1, :]
    x_full = torch.cat([x_seq, torch.as_tensor(x_next, dtype=DTYPE).unsqueeze(-2)], dim=-2)
    mean, logvar = _gaussian_head(params, x_full)
    return mean[..., -1, :].numpy(), logvar[..., -1, :].numpy()


def baseline_predict_windows(params: GruBaselineParams, windows, normalizer) -> np.ndarray:
    """Denormalised forecast of the last step of every window."""
    xn = normalizer.normalize(windows.x)
    mean, _ = baseline_predict(params, xn[:, :-1], x_next=xn[:, -1])
    return normalizer.denormalize(mean)

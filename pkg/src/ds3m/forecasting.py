"""Monte-Carlo one-step predictive distributions and regime segmentation."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from . import diffcore as dc
from .diffcore import DTYPE
from .generative import GenerativeParams, _categorical, emission_dist, prior_z_params
from .inference import InferenceParams, Noise, _latent_dim, _sweep

DEFAULT_SAMPLES = 100


@dataclass
class ForecastResult:
    mean: np.ndarray            # D
    lower: np.ndarray           # D
    upper: np.ndarray           # D
    regime_probs: np.ndarray    # K
    samples: np.ndarray         # S x D


@dataclass
class SegmentationResult:
    regime_path: np.ndarray     # T
    probs: np.ndarray           # T x K
    run_lengths: List[List[int]]


def window_seed(seed: int, *arrays) -> int:
    """Seed derived from the run seed and the window contents.

    Each window's Monte-Carlo noise depends only on its own data, so batching
    or reordering windows cannot change any single forecast.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())
    return int.from_bytes(h.digest(), "little") & ((1 << 63) - 1)


def _check(S: int, coverage: float):
    if S < 1:
        raise ValueError("number of samples S must be >= 1")
    if not 0.0 < coverage < 1.0:
        raise ValueError("coverage must lie strictly between 0 and 1")


@torch.no_grad()
def _forecast_batch(gen_params: GenerativeParams, inf_params: InferenceParams,
                    x_hist: torch.Tensor, y_hist: torch.Tensor, x_next: torch.Tensor,
                    S: int, seeds: List[int], family: str):
    """Returns (emission means, y draws, regime probs) for N windows: [N,S,D], [N,S,D], [N,K]."""
    N, T, D = y_hist.shape
    Z = _latent_dim(inf_params)
    parts = []
    for s in seeds:
        g = torch.Generator().manual_seed(s)
        noise = Noise.draw((S,), T, Z, g)
        parts.append((noise, torch.rand(S, generator=g, dtype=DTYPE),
                      torch.randn(S, Z, generator=g, dtype=DTYPE),
                      torch.randn(S, D, generator=g, dtype=DTYPE)))
    noise = Noise(torch.stack([p[0].u_initial for p in parts]),
                  torch.stack([p[0].u_regime for p in parts]),
                  torch.stack([p[0].eps for p in parts]))
    u_next = torch.stack([p[1] for p in parts])
    eps_z = torch.stack([p[2] for p in parts])
    eps_y = torch.stack([p[3] for p in parts])

    y_rep = y_hist.unsqueeze(1).expand(N, S, T, D)
    x_rep = x_hist.unsqueeze(1).expand(N, S, T, x_hist.shape[-1])
    path, _, h, _ = _sweep(y_rep, x_rep, gen_params, inf_params, noise, family, with_terms=False)

    gamma = gen_params.regime_chain.gamma
    d_T = path.d_samples[..., -1]
    rows = gamma[d_T]                                                   # N,S,K
    regime_probs = rows.mean(1)
    d_next = _categorical(rows, u_next)
    h_next = dc.gru_cell(h[..., -1, :], x_next.unsqueeze(1).expand(N, S, -1), gen_params.forward_rnn)
    mu, lv = prior_z_params(path.z_samples[..., -1, :], h_next, d_next, gen_params)
    z_next = mu + eps_z * torch.exp(0.5 * lv)
    emis = emission_dist(z_next, h_next, d_next, gen_params, family)
    return emis.expected_value(), emis.sample(eps_y), regime_probs


def _summarise(means: np.ndarray, draws: np.ndarray, probs: np.ndarray, coverage: float) -> ForecastResult:
    alpha = (1.0 - coverage) / 2.0
    lo, hi = np.quantile(draws, [alpha, 1.0 - alpha], axis=0, method="linear")
    return ForecastResult(means.mean(0), lo, hi, probs, draws)


def predict_one_step(gen_params: GenerativeParams, inf_params: InferenceParams,
                     x_seq, y_seq, S: int = DEFAULT_SAMPLES, coverage: float = 0.9, seed: int = 0,
                     x_next=None, family: str = "gaussian") -> ForecastResult:
    """Predictive distribution of y_{T+1} given x_{1:T}, y_{1:T}.

    ``x_next`` defaults to y_T (the lag-1 input convention).
    """
    _check(S, coverage)
    x_seq = torch.as_tensor(x_seq, dtype=DTYPE)
    y_seq = torch.as_tensor(y_seq, dtype=DTYPE)
    x_next = y_seq[-1] if x_next is None else torch.as_tensor(x_next, dtype=DTYPE)
    s = window_seed(seed, x_seq.numpy(), y_seq.numpy())
    means, draws, probs = _forecast_batch(gen_params, inf_params, x_seq[None], y_seq[None],
                                          x_next[None], S, [s], family)
    return _summarise(means[0].numpy(), draws[0].numpy(), probs[0].numpy(), coverage)


def predict_rolling(gen_params: GenerativeParams, inf_params: InferenceParams, windows,
                    normalizer, S: int = DEFAULT_SAMPLES, coverage: float = 0.9, seed: int = 0,
                    family: str = "gaussian", chunk: int = 100) -> List[ForecastResult]:
    """Forecast the last step of every window from the steps before it.

    ``windows`` carries raw (original-unit) ``x`` and ``y``; inputs are
    normalised with ``normalizer`` and the outputs mapped back.
    """
    _check(S, coverage)
    if len(windows) == 0:
        raise ValueError("predict_rolling: no test windows")
    xn = normalizer.normalize(windows.x)
    yn = normalizer.normalize(windows.y)
    results = []
    for lo in range(0, len(yn), chunk):
        xb = torch.as_tensor(xn[lo: lo + chunk], dtype=DTYPE)
        yb = torch.as_tensor(yn[lo: lo + chunk], dtype=DTYPE)
        x_hist, y_hist, x_next = xb[:, :-1], yb[:, :-1], xb[:, -1]
        seeds = [window_seed(seed, x_hist[i].numpy(), y_hist[i].numpy()) for i in range(len(yb))]
        means, draws, probs = _forecast_batch(gen_params, inf_params, x_hist, y_hist, x_next, S, seeds, family)
        means = normalizer.denormalize(means.numpy())
        draws = normalizer.denormalize(draws.numpy())
        for i in range(len(yb)):
            results.append(_summarise(means[i], draws[i], probs[i].numpy(), coverage))
    return results


def run_lengths(path: np.ndarray, K: int) -> List[List[int]]:
    runs: List[List[int]] = [[] for _ in range(K)]
    path = np.asarray(path)
    if len(path) == 0:
        return runs
    start = 0
    for t in range(1, len(path) + 1):
        if t == len(path) or path[t] != path[start]:
            runs[int(path[start])].append(t - start)
            start = t
    return runs


@torch.no_grad()
def segment_probs(gen_params: GenerativeParams, inf_params: InferenceParams, y_seq, x_seq,
                  S: int = DEFAULT_SAMPLES, seed: int = 0, family: str = "gaussian") -> np.ndarray:
    """Average of the realised q(d_t | d_{t-1}^(s), A_t) over S sweeps; ``[..., T, K]``.

    Noise is drawn per sequence from :func:`window_seed` so batched calls
    agree with one-at-a-time calls.
    """
    if S < 1:
        raise ValueError("number of samples S must be >= 1")
    y = torch.as_tensor(y_seq, dtype=DTYPE)
    x = torch.as_tensor(x_seq, dtype=DTYPE)
    batch = y.shape[:-2]
    yf = y.reshape(-1, *y.shape[-2:])
    xf = x.reshape(-1, *x.shape[-2:])
    N, T, D = yf.shape
    Z = _latent_dim(inf_params)
    noises = []
    for i in range(N):
        g = torch.Generator().manual_seed(window_seed(seed, xf[i].numpy(), yf[i].numpy()))
        noises.append(Noise.draw((S,), T, Z, g))
    noise = Noise(torch.stack([n.u_initial for n in noises]),
                  torch.stack([n.u_regime for n in noises]),
                  torch.stack([n.eps for n in noises]))
    path, _, _, _ = _sweep(yf.unsqueeze(1).expand(N, S, T, D),
                           xf.unsqueeze(1).expand(N, S, T, xf.shape[-1]),
                           gen_params, inf_params, noise, family, with_terms=False)
    probs = path.q_d_probs.mean(1)
    return probs.reshape(*batch, T, -1).numpy()


def segment(gen_params: GenerativeParams, inf_params: InferenceParams, y_seq, x_seq,
            S: int = DEFAULT_SAMPLES, seed: int = 0, family: str = "gaussian") -> SegmentationResult:
    probs = segment_probs(gen_params, inf_params, y_seq, x_seq, S, seed, family)
    path = probs.argmax(-1)
    return SegmentationResult(path, probs, run_lengths(path, probs.shape[-1]))

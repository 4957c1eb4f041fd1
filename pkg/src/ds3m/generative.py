"""Generative network: forward GRU, Markov regime chain, regime-conditioned
Gaussian latent transition and skip-connected emission.

All functions broadcast over leading batch axes. Regime arguments ``k`` may
be ``None`` (evaluate every regime, adding a ``K`` axis before the feature
axis), a Python int, or an integer tensor of regime indices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, Tuple

import torch

from . import diffcore as dc
from .config import ModelConfig
from .diffcore import DTYPE, ParamSet


@dataclass
class RegimeChain:
    logits: torch.Tensor               # K x K, rows softmaxed into Gamma
    initial_probs: torch.Tensor        # K

    @property
    def gamma(self) -> torch.Tensor:
        return dc.softmax(self.logits, dim=-1)

    @property
    def log_gamma(self) -> torch.Tensor:
        return dc.log_softmax(self.logits, dim=-1)

    @property
    def n_regimes(self) -> int:
        return self.logits.shape[0]


@dataclass
class GenerativeParams:
    forward_rnn: ParamSet
    regime_chain: RegimeChain
    transition_mean: ParamSet          # stacked f1^(k): [Z+H] -> Z
    transition_logvar: ParamSet        # stacked f2^(k)
    emission: ParamSet                 # stacked f_o^(k): [Z+H] -> 2D

    @property
    def n_regimes(self) -> int:
        return self.regime_chain.n_regimes

    def named_tensors(self) -> Iterator[Tuple[str, torch.Tensor]]:
        for k, v in self.forward_rnn.items():
            yield f"gen.forward_rnn.{k}", v
        yield "gen.regime_logits", self.regime_chain.logits
        yield "gen.initial_probs", self.regime_chain.initial_probs
        for group in ("transition_mean", "transition_logvar", "emission"):
            for k, v in getattr(self, group).items():
                yield f"gen.{group}.{k}", v

    def trainable(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.named_tensors() if v.requires_grad}


def per_regime(params: ParamSet, k: int) -> ParamSet:
    """Unstacked view of regime ``k`` of a stacked ParamSet."""
    return {name: v[k] for name, v in params.items()}


def init_generative(cfg: ModelConfig, gen: torch.Generator) -> GenerativeParams:
    K, Z, H, D, U = cfg.n_regimes, cfg.latent_dim, cfg.hidden_dim, cfg.obs_dim, cfg.input_dim
    params = GenerativeParams(
        forward_rnn=dc.init_gru(gen, U, H),
        regime_chain=RegimeChain(
            logits=torch.zeros(K, K, dtype=DTYPE),
            initial_probs=torch.full((K,), 1.0 / K, dtype=DTYPE),
        ),
        transition_mean=dc.init_mlp2(gen, Z + H, Z, stack=K),
        transition_logvar=dc.init_mlp2(gen, Z + H, Z, stack=K),
        emission=dc.init_mlp2(gen, Z + H, 2 * D, stack=K),
    )
    for name, v in params.named_tensors():
        v.requires_grad_(name != "gen.initial_probs")
    return params


def _select(out: torch.Tensor, k) -> torch.Tensor:
    """Pick regime(s) ``k`` from a ``[..., K, F]`` tensor."""
    if k is None:
        return out
    K = out.shape[-2]
    if isinstance(k, int):
        if not 0 <= k < K:
            raise IndexError(f"regime {k} out of range [0, {K})")
        return out[..., k, :]
    k = torch.as_tensor(k)
    if k.numel() and (k.min() < 0 or k.max() >= K):
        raise IndexError(f"regime index out of range [0, {K})")
    idx = k.long().unsqueeze(-1).unsqueeze(-1).expand(*k.shape, 1, out.shape[-1])
    return torch.gather(out.expand(*k.shape, *out.shape[-2:]), -2, idx).squeeze(-2)


def encode_forward(x_seq: torch.Tensor, h0: torch.Tensor | None, params: GenerativeParams) -> torch.Tensor:
    """h_t = GRU(h_{t-1}, x_t); ``[..., T, U]`` -> ``[..., T, H]``."""
    return dc.gru_scan(x_seq, h0, params.forward_rnn)


def regime_step_probs(chain: RegimeChain, d_prev) -> torch.Tensor:
    K = chain.n_regimes
    if isinstance(d_prev, int):
        if not 0 <= d_prev < K:
            raise IndexError(f"regime {d_prev} out of range [0, {K})")
        return chain.gamma[d_prev]
    d_prev = torch.as_tensor(d_prev).long()
    if d_prev.numel() and (d_prev.min() < 0 or d_prev.max() >= K):
        raise IndexError(f"regime index out of range [0, {K})")
    return chain.gamma[d_prev]


def prior_z_params(z_prev: torch.Tensor, h_t: torch.Tensor, k, params: GenerativeParams):
    """Mean and clamped log-variance of p(z_t | z_{t-1}, h_t, d_t = k)."""
    inp = torch.cat([z_prev, h_t], dim=-1)
    mu = dc.mlp2(inp, params.transition_mean)
    logvar = dc.clamp_logvar(dc.mlp2(inp, params.transition_logvar))
    return _select(mu, k), _select(logvar, k)


@dataclass
class EmissionDist:
    family: str
    mean: torch.Tensor      # location of the Gaussian (on log scale for lognormal)
    logvar: torch.Tensor

    def log_prob(self, y: torch.Tensor) -> torch.Tensor:
        if self.family == "lognormal":
            log_y = torch.log(y)
            return dc.gaussian_log_pdf(log_y, self.mean, self.logvar, check=False) - log_y.sum(-1)
        return dc.gaussian_log_pdf(y, self.mean, self.logvar, check=False)

    def expected_value(self) -> torch.Tensor:
        if self.family == "lognormal":
            return torch.exp(self.mean + 0.5 * torch.exp(self.logvar))
        return self.mean

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        g = self.mean + eps * torch.exp(0.5 * self.logvar)
        return torch.exp(g) if self.family == "lognormal" else g


def emission_dist(z_t: torch.Tensor, h_t: torch.Tensor, k, params: GenerativeParams,
                  family: str = "gaussian") -> EmissionDist:
    out = _select(dc.mlp2(torch.cat([z_t, h_t], dim=-1), params.emission), k)
    mean, logvar = out.chunk(2, dim=-1)
    return EmissionDist(family, mean, dc.clamp_logvar(logvar))


def joint_log_prob(y_seq: torch.Tensor, x_seq: torch.Tensor, z_path: torch.Tensor,
                   d_path: torch.Tensor, params: GenerativeParams,
                   family: str = "gaussian") -> torch.Tensor:
    """log p(y, z, d | x) for given latent paths; batch axes are kept."""
    T = y_seq.shape[-2]
    if not (x_seq.shape[-2] == z_path.shape[-2] == d_path.shape[-1] == T):
        raise dc.DimensionError("joint_log_prob: sequence lengths differ")
    d_path = torch.as_tensor(d_path).long()
    K = params.n_regimes
    if d_path.numel() and (d_path.min() < 0 or d_path.max() >= K):
        raise IndexError(f"regime index out of range [0, {K})")
    h = encode_forward(x_seq, None, params)
    z_prev = torch.cat([torch.zeros_like(z_path[..., :1, :]), z_path[..., :-1, :]], dim=-2)
    mu, logvar = prior_z_params(z_prev, h, d_path, params)
    log_trans = dc.gaussian_log_pdf(z_path, mu, logvar, check=False)
    log_emit = emission_dist(z_path, h, d_path, params, family).log_prob(y_seq)

    chain = params.regime_chain
    log_d = torch.log(chain.initial_probs)[d_path[..., 0]]
    if T > 1:
        log_d = log_d + chain.log_gamma[d_path[..., :-1], d_path[..., 1:]].sum(-1)
    return (log_trans + log_emit).sum(-1) + log_d


def _categorical(probs: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF draw: index of the first cumulative probability exceeding ``u``."""
    cdf = probs.cumsum(-1)
    idx = (cdf < u.unsqueeze(-1)).sum(-1)
    return idx.clamp_max(probs.shape[-1] - 1)


@torch.no_grad()
def generate(params: GenerativeParams, x_seq: torch.Tensor | None = None, *, length: int | None = None,
             seed: int = 0, family: str = "gaussian", y_init: torch.Tensor | None = None):
    """Ancestral draw of (y, z, d).

    With ``x_seq`` given the inputs are open-loop; otherwise the model runs
    autoregressively with x_t = y_{t-1} (``y_init`` supplies y_0, default 0).
    """
    gen = torch.Generator().manual_seed(seed)
    chain = params.regime_chain
    Z = params.transition_mean["W2"].shape[-2]
    D = params.emission["W2"].shape[-2] // 2
    H = params.forward_rnn["W_h"].shape[1]
    T = x_seq.shape[-2] if x_seq is not None else length
    if T is None or T < 1:
        raise ValueError("generate: need x_seq or a positive length")

    h = torch.zeros(H, dtype=DTYPE)
    z = torch.zeros(Z, dtype=DTYPE)
    y_prev = torch.zeros(D, dtype=DTYPE) if y_init is None else torch.as_tensor(y_init, dtype=DTYPE)
    ys, zs, ds = [], [], []
    d = None
    for t in range(T):
        x_t = x_seq[t] if x_seq is not None else y_prev
        h = dc.gru_cell(h, x_t, params.forward_rnn)
        probs = chain.initial_probs if d is None else chain.gamma[d]
        d = int(_categorical(probs, torch.rand((), generator=gen, dtype=DTYPE)))
        mu, logvar = prior_z_params(z, h, d, params)
        z = mu + torch.randn(Z, generator=gen, dtype=DTYPE) * torch.exp(0.5 * logvar)
        y = emission_dist(z, h, d, params, family).sample(torch.randn(D, generator=gen, dtype=DTYPE))
        ys.append(y)
        zs.append(z)
        ds.append(d)
        y_prev = y
    return torch.stack(ys), torch.stack(zs), torch.tensor(ds, dtype=torch.long)

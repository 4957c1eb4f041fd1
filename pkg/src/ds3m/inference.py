"""Structured inference network and the per-step marginalised Monte-Carlo ELBO.

The posterior factorises as prod_t q(z_t | z_{t-1}, d_t, A_t) q(d_t | d_{t-1}, A_t)
with A_t a backward GRU over [y_t, h_t]. A single left-to-right sweep draws
(d_t, z_t) ancestrally and accumulates, at every step,

* reconstruction  sum_k q(k) log p(y_t | z_t^(s), h_t, k)
* kl_z            sum_k q(k) KL(q(z_t | z_{t-1}^(s), A_t, k) || p(z_t | z_{t-1}^(s), h_t, k))
* kl_d            sum_j q(d_{t-1}=j) KL(q(d_t | j, A_t) || Gamma[j])

where q(k) = q(d_t = k | d_{t-1}^(s), A_t). Gradients reach the q weights and
the reparameterised z, never the sampled indices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, Tuple

import torch

from . import diffcore as dc
from .config import ModelConfig
from .diffcore import DTYPE, ParamSet
from .generative import (GenerativeParams, _categorical, _select, emission_dist,
                         encode_forward, prior_z_params)


@dataclass
class InferenceParams:
    backward_rnn: ParamSet             # GRU over [y_t, h_t]
    posterior_mean: ParamSet           # stacked g1^(k): [Z+H] -> Z
    posterior_logvar: ParamSet         # stacked g2^(k)
    categorical_weights: torch.Tensor  # K(prev regime) x K x H

    @property
    def n_regimes(self) -> int:
        return self.categorical_weights.shape[0]

    def named_tensors(self) -> Iterator[Tuple[str, torch.Tensor]]:
        for k, v in self.backward_rnn.items():
            yield f"inf.backward_rnn.{k}", v
        for group in ("posterior_mean", "posterior_logvar"):
            for k, v in getattr(self, group).items():
                yield f"inf.{group}.{k}", v
        yield "inf.categorical_weights", self.categorical_weights

    def trainable(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.named_tensors() if v.requires_grad}


def init_inference(cfg: ModelConfig, gen: torch.Generator) -> InferenceParams:
    K, Z, H, D = cfg.n_regimes, cfg.latent_dim, cfg.hidden_dim, cfg.obs_dim
    w, _ = dc.init_affine(gen, H, K, stack=K)
    params = InferenceParams(
        backward_rnn=dc.init_gru(gen, D + H, H),
        posterior_mean=dc.init_mlp2(gen, Z + H, Z, stack=K),
        posterior_logvar=dc.init_mlp2(gen, Z + H, Z, stack=K),
        categorical_weights=w,
    )
    for _, v in params.named_tensors():
        v.requires_grad_(True)
    return params


@dataclass
class LatentPath:
    z_samples: torch.Tensor    # [..., T, Z]
    d_samples: torch.Tensor    # [..., T] long
    eps_noise: torch.Tensor    # [..., T, Z]
    q_d_probs: torch.Tensor    # [..., T, K], q(d_t | d_{t-1}^(s), A_t)
    d_initial: torch.Tensor    # [...] long, the auxiliary d_0 draw
    u_noise: torch.Tensor      # [..., T] uniforms that selected d_t


@dataclass
class ElboBreakdown:
    reconstruction: torch.Tensor
    kl_z: torch.Tensor
    kl_d: torch.Tensor

    def total(self, beta: float = 1.0) -> torch.Tensor:
        return self.reconstruction - beta * (self.kl_z + self.kl_d)


@dataclass
class Noise:
    """Every random number one ancestral sweep consumes."""

    u_initial: torch.Tensor    # [...]
    u_regime: torch.Tensor     # [..., T]
    eps: torch.Tensor          # [..., T, Z]

    @classmethod
    def draw(cls, batch_shape, T: int, Z: int, gen: torch.Generator) -> "Noise":
        batch_shape = tuple(batch_shape)
        return cls(
            u_initial=torch.rand(batch_shape, generator=gen, dtype=DTYPE),
            u_regime=torch.rand(batch_shape + (T,), generator=gen, dtype=DTYPE),
            eps=torch.randn(batch_shape + (T, Z), generator=gen, dtype=DTYPE),
        )


def encode_backward(y_seq: torch.Tensor, h_seq: torch.Tensor, params: InferenceParams) -> torch.Tensor:
    """A_t = GRU(A_{t+1}, [y_t, h_t]) from t = T down to 1, A_{T+1} = 0."""
    if y_seq.shape[-2] != h_seq.shape[-2]:
        raise dc.DimensionError(f"encode_backward: T mismatch {y_seq.shape[-2]} vs {h_seq.shape[-2]}")
    return dc.gru_scan(torch.cat([y_seq, h_seq], dim=-1), None, params.backward_rnn, reverse=True)


def posterior_d_probs(A_t: torch.Tensor, d_prev, params: InferenceParams) -> torch.Tensor:
    """softmax(W^(d_prev) A_t); ``d_prev=None`` returns all rows ``[..., K, K]``."""
    probs = dc.softmax(torch.einsum("...a,jka->...jk", A_t, params.categorical_weights), dim=-1)
    return _select(probs, d_prev)


def posterior_z_params(z_prev: torch.Tensor, A_t: torch.Tensor, k, params: InferenceParams):
    inp = torch.cat([z_prev, A_t], dim=-1)
    mu = dc.mlp2(inp, params.posterior_mean)
    logvar = dc.clamp_logvar(dc.mlp2(inp, params.posterior_logvar))
    return _select(mu, k), _select(logvar, k)


def _sweep(y_seq, x_seq, gen_params: GenerativeParams, inf_params: InferenceParams,
           noise: Noise, family: str, fixed_d: torch.Tensor | None = None,
           fixed_d0: torch.Tensor | None = None, with_terms: bool = True):
    """Ancestral pass; returns (LatentPath, ElboBreakdown | None, h, A)."""
    T = y_seq.shape[-2]
    if x_seq.shape[-2] != T:
        raise dc.DimensionError(f"x and y lengths differ: {x_seq.shape[-2]} vs {T}")
    h = encode_forward(x_seq, None, gen_params)
    A = encode_backward(y_seq, h, inf_params)
    batch = y_seq.shape[:-2]
    Z = noise.eps.shape[-1]
    chain = gen_params.regime_chain
    gamma = chain.gamma
    K = gamma.shape[0]

    # all rows of q(d_t | j, A_t) for every t at once: [..., T, K, K]
    q_all = posterior_d_probs(A, None, inf_params)

    d_prev = _categorical(chain.initial_probs.expand(*batch, K), noise.u_initial) \
        if fixed_d0 is None else fixed_d0
    d0 = d_prev
    z_prev = torch.zeros(batch + (Z,), dtype=DTYPE)
    q_prev = None
    zs, ds, qs = [], [], []
    rec = kl_z = kl_d = 0.0
    for t in range(T):
        q_t = _select(q_all[..., t, :, :], d_prev)
        h_t, A_t = h[..., t, :], A[..., t, :]
        mu_q, lv_q = posterior_z_params(z_prev, A_t, None, inf_params)
        if with_terms:
            mu_p, lv_p = prior_z_params(z_prev, h_t, None, gen_params)
            kl_z = kl_z + (q_t * dc.gaussian_kl(mu_q, lv_q, mu_p, lv_p)).sum(-1)
            if t == 0:
                kl_d = kl_d + dc.categorical_kl(q_t, chain.initial_probs, strict=False)
            else:
                kl_rows = dc.categorical_kl(q_all[..., t, :, :], gamma, strict=False)
                kl_d = kl_d + (q_prev * kl_rows).sum(-1)
        if fixed_d is None:
            d_t = _categorical(q_t.detach(), noise.u_regime[..., t])
        else:
            d_t = fixed_d[..., t]
        eps_t = noise.eps[..., t, :]
        z_t = _select(mu_q, d_t) + eps_t * torch.exp(0.5 * _select(lv_q, d_t))
        if with_terms:
            emis = emission_dist(z_t, h_t, None, gen_params, family)
            log_lik = emis.log_prob(y_seq[..., t, :].unsqueeze(-2))
            rec = rec + (q_t * log_lik).sum(-1)
        zs.append(z_t)
        ds.append(d_t)
        qs.append(q_t)
        z_prev, d_prev, q_prev = z_t, d_t, q_t

    path = LatentPath(
        z_samples=torch.stack(zs, dim=-2),
        d_samples=torch.stack(ds, dim=-1),
        eps_noise=noise.eps,
        q_d_probs=torch.stack(qs, dim=-2),
        d_initial=d0,
        u_noise=noise.u_regime,
    )
    terms = ElboBreakdown(rec, kl_z, kl_d) if with_terms else None
    return path, terms, h, A


def _latent_dim(inf_params: InferenceParams) -> int:
    return inf_params.posterior_mean["W2"].shape[-2]


def ancestral_sample(y_seq, x_seq, gen_params: GenerativeParams, inf_params: InferenceParams,
                     seed: int | torch.Generator = 0, family: str = "gaussian") -> LatentPath:
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    noise = Noise.draw(y_seq.shape[:-2], y_seq.shape[-2], _latent_dim(inf_params), gen)
    path, _, _, _ = _sweep(y_seq, x_seq, gen_params, inf_params, noise, family, with_terms=False)
    return path


def elbo(y_seq, x_seq, path: LatentPath, gen_params: GenerativeParams, inf_params: InferenceParams,
         beta: float = 1.0, family: str = "gaussian") -> ElboBreakdown:
    """ELBO terms along a frozen path: same noise, same sampled regimes.

    z is recomputed from the frozen noise so the result is differentiable in
    every parameter.
    """
    if path.d_samples.shape[-1] != y_seq.shape[-2]:
        raise dc.DimensionError(
            f"elbo: path length {path.d_samples.shape[-1]} != sequence length {y_seq.shape[-2]}")
    noise = Noise(torch.zeros(path.d_initial.shape, dtype=DTYPE), path.u_noise, path.eps_noise)
    _, terms, _, _ = _sweep(y_seq, x_seq, gen_params, inf_params, noise, family,
                            fixed_d=path.d_samples, fixed_d0=path.d_initial)
    return terms


def elbo_minibatch(y_batch, x_batch, gen_params: GenerativeParams, inf_params: InferenceParams,
                   beta: float, samples_per_seq: int = 1, seed: int | torch.Generator = 0,
                   family: str = "gaussian") -> torch.Tensor:
    """Mean of -ELBO_beta over sequences and S samples each (a loss to minimise)."""
    if y_batch.shape[0] == 0:
        raise ValueError("elbo_minibatch: empty batch")
    if samples_per_seq < 1:
        raise ValueError("samples_per_seq must be >= 1")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    S = samples_per_seq
    if S > 1:
        y_batch = y_batch.unsqueeze(1).expand(-1, S, -1, -1)
        x_batch = x_batch.unsqueeze(1).expand(-1, S, -1, -1)
    noise = Noise.draw(y_batch.shape[:-2], y_batch.shape[-2], _latent_dim(inf_params), gen)
    _, terms, _, _ = _sweep(y_batch, x_batch, gen_params, inf_params, noise, family)
    return -terms.total(beta).mean()


def posterior_log_prob(y_seq, x_seq, path: LatentPath, gen_params: GenerativeParams,
                       inf_params: InferenceParams) -> torch.Tensor:
    """log q(z_{1:T}, d_{1:T} | y, x) with the auxiliary d_0 summed out."""
    h = encode_forward(x_seq, None, gen_params)
    A = encode_backward(y_seq, h, inf_params)
    q_all = posterior_d_probs(A, None, inf_params)                       # [..., T, K, K]
    d = path.d_samples
    z = path.z_samples
    z_prev = torch.cat([torch.zeros_like(z[..., :1, :]), z[..., :-1, :]], dim=-2)
    mu, lv = posterior_z_params(z_prev, A, d, inf_params)
    log_q = dc.gaussian_log_pdf(z, mu, lv, check=False).sum(-1)

    init = gen_params.regime_chain.initial_probs
    q1 = (init.unsqueeze(-1) * q_all[..., 0, :, :]).sum(-2)               # [..., K]
    log_q = log_q + torch.log(torch.gather(q1, -1, d[..., :1])).squeeze(-1)
    if d.shape[-1] > 1:
        rows = _select(q_all[..., 1:, :, :], d[..., :-1])                  # [..., T-1, K]
        log_q = log_q + torch.log(torch.gather(rows, -1, d[..., 1:].unsqueeze(-1))).squeeze(-1).sum(-1)
    return log_q

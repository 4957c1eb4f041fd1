"""Differentiable numerics kernel.

Dense float64 tensors, layer primitives, Gaussian/categorical densities and
divergences, and reverse-mode gradients. The tape is torch's autograd graph;
everything here is a pure function of its inputs.

Layer parameters may be *stacked*: a leading axis of length K holds one copy
per regime, and the layer then maps ``[..., In]`` to ``[..., K, Out]``.
"""
from __future__ import annotations

import math
from typing import Dict, Iterable, Mapping

import torch

DTYPE = torch.float64
LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
LOG_2PI = math.log(2.0 * math.pi)

ParamSet = Dict[str, torch.Tensor]


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class SupportError(ValueError):
    """Raised when a KL divergence is infinite because q puts mass where p has none."""


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def _require(params: Mapping[str, torch.Tensor], keys: Iterable[str], what: str):
    missing = [k for k in keys if k not in params]
    if missing:
        raise ConfigError(f"{what}: missing parameter(s) {missing}")
    return [params[k] for k in keys]


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """``weight @ x + bias`` over the trailing axis of ``x``.

    A 3-d ``weight`` of shape ``[K, Out, In]`` evaluates K layers at once and
    returns ``[..., K, Out]``.
    """
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(
            f"affine: x has trailing dim {x.shape[-1]} but weight expects {weight.shape[-1]} "
            f"(x {tuple(x.shape)}, weight {tuple(weight.shape)})"
        )
    if bias.shape[-1] != weight.shape[-2] or bias.dim() != weight.dim() - 1:
        raise DimensionError(
            f"affine: bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}"
        )
    if weight.dim() == 2:
        return x @ weight.T + bias
    if weight.dim() == 3:
        return torch.einsum("...i,koi->...ko", x, weight) + bias
    raise DimensionError(f"affine: weight must be 2-d or 3-d, got {tuple(weight.shape)}")


def affine_per_regime(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Stacked layer applied regime-wise: ``x[..., k, :]`` goes through layer k."""
    if x.shape[-2:] != (weight.shape[0], weight.shape[-1]):
        raise DimensionError(
            f"affine_per_regime: x {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}"
        )
    return torch.einsum("...ki,koi->...ko", x, weight) + bias


def mlp2(x: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """affine -> tanh -> affine. Stacked params give a per-regime output axis."""
    w1, b1, w2, b2 = _require(params, ("W1", "b1", "W2", "b2"), "mlp2")
    hidden = torch.tanh(affine(x, w1, b1))
    if w1.dim() == 3:
        return affine_per_regime(hidden, w2, b2)
    return affine(hidden, w2, b2)


def gru_cell(h_prev: torch.Tensor, x: torch.Tensor, params: Mapping[str, torch.Tensor],
             x_proj: torch.Tensor | None = None) -> torch.Tensor:
    """One GRU step.

    Gates are packed as [reset, update, candidate] along the first axis of
    ``W_x`` (3H x U), ``W_h`` (3H x H) and ``b`` (3H)::

        r = sigmoid(Wxr x + Whr h + br)
        u = sigmoid(Wxu x + Whu h + bu)
        n = tanh(Wxn x + r * (Whn h) + bn)
        h' = (1 - u) * h + u * n

    ``x_proj`` lets a caller pass a precomputed ``W_x x + b``.
    """
    w_x, w_h, b = _require(params, ("W_x", "W_h", "b"), "gru_cell")
    hidden = w_h.shape[1]
    if h_prev.shape[-1] != hidden:
        raise DimensionError(f"gru_cell: h_prev width {h_prev.shape[-1]} != hidden width {hidden}")
    if x_proj is None:
        if x.shape[-1] != w_x.shape[1]:
            raise DimensionError(f"gru_cell: input width {x.shape[-1]} != {w_x.shape[1]}")
        x_proj = x @ w_x.T + b
    h_proj = h_prev @ w_h.T
    xr, xu, xn = x_proj.split(hidden, dim=-1)
    hr, hu, hn = h_proj.split(hidden, dim=-1)
    r = torch.sigmoid(xr + hr)
    u = torch.sigmoid(xu + hu)
    n = torch.tanh(xn + r * hn)
    return h_prev + u * (n - h_prev)


def gru_scan(x_seq: torch.Tensor, h0: torch.Tensor | None, params: Mapping[str, torch.Tensor],
             reverse: bool = False) -> torch.Tensor:
    """Run :func:`gru_cell` along axis -2 of ``x_seq`` (``[..., T, U]`` -> ``[..., T, H]``)."""
    w_x, w_h, b = _require(params, ("W_x", "W_h", "b"), "gru_scan")
    if x_seq.shape[-1] != w_x.shape[1]:
        raise DimensionError(f"gru_scan: input width {x_seq.shape[-1]} != {w_x.shape[1]}")
    steps = x_seq.shape[-2]
    if steps < 1:
        raise DimensionError("gru_scan: empty sequence")
    proj = x_seq @ w_x.T + b
    h = torch.zeros(x_seq.shape[:-2] + (w_h.shape[1],), dtype=DTYPE) if h0 is None else h0
    out = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h = gru_cell(h, None, params, x_proj=proj[..., t, :])
        out[t] = h
    return torch.stack(out, dim=-2)


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if v.numel() == 0:
        raise DimensionError("softmax of an empty vector")
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def clamp_logvar(logvar: torch.Tensor) -> torch.Tensor:
    return torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


def gaussian_log_pdf(y: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor,
                     check: bool = True) -> torch.Tensor:
    """Diagonal Gaussian log density, summed over the trailing axis."""
    if check and not (torch.isfinite(y).all() and torch.isfinite(mu).all()
                      and torch.isfinite(logvar).all()):
        raise NumericError("gaussian_log_pdf: non-finite input")
    return -0.5 * (LOG_2PI + logvar + (y - mu) ** 2 * torch.exp(-logvar)).sum(-1)


def gaussian_kl(mu_q: torch.Tensor, logvar_q: torch.Tensor,
                mu_p: torch.Tensor, logvar_p: torch.Tensor) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the trailing axis."""
    return 0.5 * (
        logvar_p - logvar_q + (torch.exp(logvar_q) + (mu_q - mu_p) ** 2) * torch.exp(-logvar_p) - 1.0
    ).sum(-1)


def categorical_kl(q_probs: torch.Tensor, p_probs: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """sum q log(q/p) over the trailing axis, with 0 log(0/p) = 0.

    Where q > 0 and p = 0 the result is +inf; with ``strict`` that raises
    :class:`SupportError` instead.
    """
    if q_probs.shape[-1] != p_probs.shape[-1]:
        raise DimensionError(f"categorical_kl: {tuple(q_probs.shape)} vs {tuple(p_probs.shape)}")
    pos = q_probs > 0
    safe_q = torch.where(pos, q_probs, torch.ones_like(q_probs))
    terms = torch.where(pos, q_probs * (torch.log(safe_q) - torch.log(p_probs)),
                        torch.zeros_like(q_probs))
    kl = terms.sum(-1)
    if strict and torch.isinf(kl).any():
        raise SupportError("categorical_kl: q has support where p is zero")
    return kl


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar ``loss`` w.r.t. every trainable entry of ``params``.

    Frozen entries (``requires_grad=False``) and entries the loss does not
    depend on get zero gradients.
    """
    if loss.dim() != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    names = [k for k, v in params.items() if v.requires_grad]
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    out = {}
    for k, v in params.items():
        out[k] = torch.zeros_like(v)
    for k, g in zip(names, grads):
        if g is not None:
            out[k] = g.detach()
    return out


# ---------------------------------------------------------------- initialisers

def _uniform(gen: torch.Generator, shape, bound: float) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


def init_affine(gen: torch.Generator, n_in: int, n_out: int, stack: int | None = None):
    bound = 1.0 / math.sqrt(n_in)
    lead = () if stack is None else (stack,)
    return _uniform(gen, lead + (n_out, n_in), bound), _uniform(gen, lead + (n_out,), bound)


def init_mlp2(gen: torch.Generator, n_in: int, n_out: int, hidden: int | None = None,
              stack: int | None = None) -> ParamSet:
    hidden = n_out if hidden is None else hidden
    w1, b1 = init_affine(gen, n_in, hidden, stack)
    w2, b2 = init_affine(gen, hidden, n_out, stack)
    return {"W1": w1, "b1": b1, "W2": w2, "b2": b2}


def init_gru(gen: torch.Generator, n_in: int, hidden: int) -> ParamSet:
    bound = 1.0 / math.sqrt(hidden)
    return {
        "W_x": _uniform(gen, (3 * hidden, n_in), bound),
        "W_h": _uniform(gen, (3 * hidden, hidden), bound),
        "b": _uniform(gen, (3 * hidden,), bound),
    }

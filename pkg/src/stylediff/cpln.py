"""Conditional prosodic layer normalization.

Each site owns a style-agnostic affine pair ``(gamma_ln, beta_ln)``, a linear
map from the style embedding to a style affine pair, and a scalar mixing
weight ``rho`` kept in ``[0, 1]``::

    y = rho * (gamma_ln * xhat + beta_ln) + (1 - rho) * (gamma_style * xhat + beta_style)
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

EPS = 1e-5
RHO_INIT = 0.9


@dataclass
class LayerStats:
    mu: torch.Tensor
    sigma2: torch.Tensor


def layer_normalize(x: torch.Tensor, eps: float = EPS) -> tuple[torch.Tensor, LayerStats]:
    """Normalize every row (last axis) to zero mean, unit biased variance."""
    if x.shape[-1] == 0:
        raise ValueError("cannot normalize rows of width 0")
    mu = x.mean(dim=-1, keepdim=True)
    sigma2 = (x - mu).pow(2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(sigma2 + eps), LayerStats(mu=mu, sigma2=sigma2)


def _broadcast_to_rows(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    while v.dim() < x.dim():
        v = v.unsqueeze(-2)
    return v


def style_affine_params(s: torch.Tensor, proj: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    """Split ``proj(s)`` into ``(gamma_style, beta_style)``."""
    if s.shape[-1] != proj.in_features:
        raise ValueError(f"style dimension {s.shape[-1]} != projection input {proj.in_features}")
    gamma, beta = proj(s).chunk(2, dim=-1)
    return gamma, beta


class CPLN(nn.Module):
    """One conditional layer-norm site over feature width ``width``."""

    def __init__(self, width: int, style_dim: int = 128, rho_init: float = RHO_INIT,
                 eps: float = EPS):
        super().__init__()
        self.width = width
        self.eps = eps
        self.gamma_ln = nn.Parameter(torch.ones(width))
        self.beta_ln = nn.Parameter(torch.zeros(width))
        self.rho = nn.Parameter(torch.tensor(float(rho_init)))
        self.style_proj = nn.Linear(style_dim, 2 * width)
        # Start the style branch at identity affine so early outputs match plain LN.
        nn.init.normal_(self.style_proj.weight, std=0.02)
        with torch.no_grad():
            self.style_proj.bias[:width].fill_(1.0)
            self.style_proj.bias[width:].zero_()

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return cpln_forward(x, s, self)

    @torch.no_grad()
    def clamp_rho(self) -> "CPLN":
        self.rho.clamp_(0.0, 1.0)
        return self

    def extra_repr(self) -> str:
        return f"width={self.width}, eps={self.eps}"


def cpln_forward(x: torch.Tensor, s: torch.Tensor, params: CPLN) -> torch.Tensor:
    if x.shape[-1] != params.width:
        raise ValueError(f"feature width {x.shape[-1]} != CPLN width {params.width}")
    xhat, _ = layer_normalize(x, params.eps)
    gamma_s, beta_s = style_affine_params(s, params.style_proj)
    gamma_s = _broadcast_to_rows(gamma_s, x)
    beta_s = _broadcast_to_rows(beta_s, x)
    rho = params.rho
    plain = params.gamma_ln * xhat + params.beta_ln
    styled = gamma_s * xhat + beta_s
    return rho * plain + (1.0 - rho) * styled


def clamp_rho(module: nn.Module) -> nn.Module:
    """Clamp ``rho`` of every CPLN site found in ``module`` into ``[0, 1]``."""
    for m in module.modules():
        if isinstance(m, CPLN):
            m.clamp_rho()
    return module


def cpln_sites(module: nn.Module) -> list[CPLN]:
    return [m for m in module.modules() if isinstance(m, CPLN)]

"""Time- and style-conditioned 1-D convolutional critic ``D(x_{t-1}, x_t, t, s)``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .layers import timestep_embedding


@dataclass
class DiscriminatorConfig:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 32, 1])
    kernels: list[int] = field(default_factory=lambda: [3, 5, 5, 5, 3])
    strides: list[int] = field(default_factory=lambda: [1, 2, 2, 1, 1])
    leaky_slope: float = 0.2
    mel_bins: int = 80
    style_dim: int = 128
    time_dim: int = 128

    def __post_init__(self):
        n = len(self.channels)
        if n < 2:
            raise ValueError("need at least two conv layers")
        if len(self.kernels) != n:
            raise ValueError("kernels and channels must have equal length")
        if len(self.strides) == n - 1:
            # Four strides for five layers: the final layer keeps resolution.
            self.strides = list(self.strides) + [1]
        if len(self.strides) != n:
            raise ValueError("strides must have len(channels) or len(channels) - 1 entries")
        if min(self.channels + self.kernels + self.strides) < 1:
            raise ValueError("channels, kernels and strides must be positive")
        if self.channels[-1] != 1:
            raise ValueError("the last conv layer emits the 1-channel unconditional logit")
        if self.strides[-1] != 1:
            raise ValueError("the last conv layer must have stride 1")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must be in [0, 1)")

    @classmethod
    def full_scale(cls, **overrides) -> "DiscriminatorConfig":
        base = dict(channels=[64, 128, 512, 128, 1], kernels=[3, 5, 5, 5, 3],
                    strides=[1, 2, 2, 1])
        base.update(overrides)
        return cls(**base)


@dataclass
class DiscriminatorOutput:
    uncond_logit: torch.Tensor
    cond_logit: torch.Tensor
    features: list[torch.Tensor]
    masks: list[torch.Tensor]

    @property
    def score(self) -> torch.Tensor:
        """Per-item scalar: mean over valid positions of the averaged logits."""
        mask = self.masks[-1].to(self.uncond_logit.dtype)
        logits = 0.5 * (self.uncond_logit + self.cond_logit)
        return (logits * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        in_ch = 2 * cfg.mel_bins
        self.time_proj = nn.Sequential(nn.Linear(cfg.time_dim, in_ch), nn.SiLU(),
                                       nn.Linear(in_ch, in_ch))
        convs = []
        for ch, k, st in zip(cfg.channels, cfg.kernels, cfg.strides):
            convs.append(nn.Conv1d(in_ch, ch, k, stride=st, padding=k // 2))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.style_proj = nn.Linear(cfg.style_dim, cfg.channels[-2], bias=False)

    def forward(self, x_prev: torch.Tensor, x_t: torch.Tensor, t, s: torch.Tensor,
                frame_mask: Optional[torch.Tensor] = None) -> DiscriminatorOutput:
        if x_prev.shape != x_t.shape:
            raise ValueError(f"x_prev {tuple(x_prev.shape)} and x_t {tuple(x_t.shape)} differ")
        b, n, _ = x_t.shape
        t = torch.as_tensor(t, device=x_t.device).long().reshape(-1).expand(b)
        if frame_mask is None:
            frame_mask = torch.ones(b, n, dtype=torch.bool, device=x_t.device)
        temb = self.time_proj(timestep_embedding(t, self.cfg.time_dim).to(x_t.dtype))
        h = torch.cat([x_prev, x_t], dim=-1).transpose(1, 2) + temb[:, :, None]
        mask = frame_mask
        features, masks = [], []
        last = len(self.convs) - 1
        for i, (conv, stride) in enumerate(zip(self.convs, self.cfg.strides)):
            h = conv(h * mask[:, None, :].to(h.dtype))
            mask = mask[:, ::stride][:, : h.shape[-1]]
            if i < last:
                h = F.leaky_relu(h, self.cfg.leaky_slope)
            features.append(h)
            masks.append(mask)
        uncond = h[:, 0, :]
        cond = torch.einsum("bc,bcl->bl", self.style_proj(s), features[-2])
        return DiscriminatorOutput(uncond_logit=uncond, cond_logit=cond,
                                   features=features, masks=masks)


def discriminate(disc: Discriminator, x_prev, x_t, t, s, frame_mask=None) -> DiscriminatorOutput:
    return disc(x_prev, x_t, t, s, frame_mask)

"""Least-squares adversarial losses, feature matching, and reconstruction terms."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence

import torch


@dataclass
class LossWeights:
    lambda_duration: float = 0.1
    lambda_energy: float = 0.1
    lambda_pitch: float = 0.1
    lambda_fm: float = 2.0
    lambda_mel: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and non-negative, got {v}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{f.name: getattr(self, f.name) * factor for f in fields(self)})


def discriminator_loss(d_real, d_fake):
    """``(D_real - 1)^2 + D_fake^2``, averaged when given per-item tensors."""
    value = (d_real - 1.0) ** 2 + d_fake ** 2
    return value.mean() if isinstance(value, torch.Tensor) else value


def adversarial_loss(d_fake):
    value = (d_fake - 1.0) ** 2
    return value.mean() if isinstance(value, torch.Tensor) else value


def _masked_mean_abs(diff: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return diff.abs().mean()
    # mask is (batch, length) against (batch, channels, length)
    m = mask[:, None, :].to(diff.dtype).expand_as(diff)
    return (diff.abs() * m).sum() / m.sum().clamp(min=1.0)


def feature_matching_loss(real_feats: Sequence[torch.Tensor], fake_feats: Sequence[torch.Tensor],
                          masks: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
    """Sum over layers of the element-count-normalized l1 distance."""
    if len(real_feats) != len(fake_feats):
        raise ValueError(f"{len(real_feats)} real feature maps vs {len(fake_feats)} fake")
    total = torch.zeros((), dtype=fake_feats[0].dtype if fake_feats else torch.float32)
    for i, (r, f) in enumerate(zip(real_feats, fake_feats)):
        if r.shape != f.shape:
            raise ValueError(f"feature map {i}: {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + _masked_mean_abs(r - f, None if masks is None else masks[i])
    return total


def _masked_mse(pred, target, mask):
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if mask is None:
        return ((pred - target) ** 2).mean()
    m = mask.to(pred.dtype)
    return (((pred - target) ** 2) * m).sum() / m.sum().clamp(min=1.0)


def variance_loss(log_duration: torch.Tensor, pitch: torch.Tensor, energy: torch.Tensor,
                  target_durations: torch.Tensor, target_pitch: torch.Tensor,
                  target_energy: torch.Tensor, phoneme_mask: Optional[torch.Tensor] = None,
                  frame_mask: Optional[torch.Tensor] = None
                  ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """MSE of log-durations against ``log(1 + d)`` and of pitch/energy contours."""
    log_target = torch.log1p(torch.as_tensor(target_durations, dtype=log_duration.dtype))
    return (_masked_mse(log_duration, log_target, phoneme_mask),
            _masked_mse(pitch, target_pitch, frame_mask),
            _masked_mse(energy, target_energy, frame_mask))


def mel_reconstruction_loss(x0_pred: torch.Tensor, x0: torch.Tensor,
                            frame_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean absolute error over all (valid) elements."""
    if x0_pred.shape != x0.shape:
        raise ValueError(f"prediction {tuple(x0_pred.shape)} vs target {tuple(x0.shape)}")
    if frame_mask is None:
        return (x0_pred - x0).abs().mean()
    m = frame_mask[..., None].to(x0.dtype).expand_as(x0)
    return ((x0_pred - x0).abs() * m).sum() / m.sum().clamp(min=1.0)


GENERATOR_TERMS = ("adv", "duration", "energy", "pitch", "fm", "mel")


def generator_total_loss(parts: Mapping[str, torch.Tensor | float], weights: LossWeights):
    """``L_adv`` plus the weighted variance, feature-matching and mel terms."""
    return (parts["adv"]
            + weights.lambda_duration * parts.get("duration", 0.0)
            + weights.lambda_energy * parts.get("energy", 0.0)
            + weights.lambda_pitch * parts.get("pitch", 0.0)
            + weights.lambda_fm * parts.get("fm", 0.0)
            + weights.lambda_mel * parts.get("mel", 0.0))

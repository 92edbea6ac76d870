"""Discrete-time Gaussian forward diffusion and its posterior.

All sampling functions accept ``t`` either as a python int (one timestep for
the whole input) or as an integer tensor of shape ``(batch,)`` giving one
timestep per leading-axis element.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise variances ``betas`` and their derived products.

    Index ``k`` of every array holds the value for diffusion step ``t = k + 1``.
    ``alpha_bar(0)`` is defined as 1.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "VarianceSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ValueError(f"every beta must lie in (0, 1), got {betas.tolist()}")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        return cls(betas=betas, alphas=alphas, alpha_bars=alpha_bars)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at step ``t`` in ``[0, T]``."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


@dataclass
class GaussianPosterior:
    """Isotropic Gaussian ``q(x_{t-1} | x_t, x_0)``.

    ``variance`` is a python float for a single timestep, or a tensor that
    broadcasts against ``mean`` when timesteps vary across the batch.
    """

    mean: torch.Tensor
    variance: Union[float, torch.Tensor]

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        _check_shape(noise, self.mean, "noise")
        if isinstance(self.variance, float):
            return self.mean + float(np.sqrt(self.variance)) * noise
        return self.mean + self.variance.sqrt() * noise


def make_schedule(T: int, beta_start: float = 0.1, beta_end: float = 0.7) -> VarianceSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta_start and beta_end must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    return VarianceSchedule.from_betas(np.linspace(beta_start, beta_end, int(T)))


def respace(schedule: VarianceSchedule, n_steps: int) -> tuple[VarianceSchedule, list[int]]:
    """Shorter schedule visiting a subset of the original steps.

    Returns the new schedule and, for each new step ``k = 1..n_steps``, the
    original timestep whose marginal it reproduces. The last original step is
    always kept, and ``alpha_bar`` values at kept steps are preserved exactly,
    so a generator trained on the original steps can be queried unchanged.
    """
    if n_steps < 1 or n_steps > schedule.T:
        raise ValueError(f"n_steps must be in [1, {schedule.T}], got {n_steps}")
    if n_steps == schedule.T:
        return schedule, list(range(1, schedule.T + 1))
    picks = np.round(np.linspace(schedule.T, 1, n_steps)).astype(int)[::-1]
    picks = sorted(set(int(p) for p in picks))
    if len(picks) != n_steps:
        raise ValueError("respacing produced duplicate timesteps")
    bars = [schedule.alpha_bar(p) for p in picks]
    prev = [1.0] + bars[:-1]
    betas = [1.0 - b / a for a, b in zip(prev, bars)]
    return VarianceSchedule.from_betas(betas), picks


def _check_shape(a: torch.Tensor, b: torch.Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name} shape {tuple(a.shape)} does not match {tuple(b.shape)}")


def _check_t(t: Timestep, schedule: VarianceSchedule, lower: int = 1) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.min()) < lower or int(t.max()) > schedule.T):
            raise ValueError(f"timesteps must lie in [{lower}, {schedule.T}]")
    elif not lower <= int(t) <= schedule.T:
        raise ValueError(f"timestep {t} outside [{lower}, {schedule.T}]")


def _coef(values: np.ndarray, t: Timestep, like: torch.Tensor) -> Union[float, torch.Tensor]:
    """Look up ``values[t]`` and shape it to broadcast over ``like``."""
    if isinstance(t, torch.Tensor):
        table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
        out = table[t.long().to(like.device)]
        return out.reshape(-1, *([1] * (like.dim() - 1)))
    return float(values[int(t)])


def _padded(arr: np.ndarray, head: float) -> np.ndarray:
    """Prepend the ``t = 0`` value so that index ``t`` addresses step ``t``."""
    return np.concatenate([[head], arr])


def q_sample_step(x_prev: torch.Tensor, t: Timestep, schedule: VarianceSchedule,
                  noise: torch.Tensor) -> torch.Tensor:
    """One forward step: ``sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * noise``."""
    _check_shape(noise, x_prev, "noise")
    _check_t(t, schedule)
    keep = _coef(np.sqrt(_padded(schedule.alphas, 1.0)), t, x_prev)
    inject = _coef(np.sqrt(_padded(schedule.betas, 0.0)), t, x_prev)
    return keep * x_prev + inject * noise


def q_sample_closed(x0: torch.Tensor, t: Timestep, schedule: VarianceSchedule,
                    noise: torch.Tensor) -> torch.Tensor:
    """Marginal ``q(x_t | x_0)``; ``t = 0`` returns ``x0`` unchanged."""
    _check_shape(noise, x0, "noise")
    _check_t(t, schedule, lower=0)
    bars = _padded(schedule.alpha_bars, 1.0)
    return _coef(np.sqrt(bars), t, x0) * x0 + _coef(np.sqrt(1.0 - bars), t, x0) * noise


def posterior_coefficients(schedule: VarianceSchedule) -> dict[str, np.ndarray]:
    """Tables (indexed by ``t``, entry 0 unused) for the Gaussian posterior."""
    bars = _padded(schedule.alpha_bars, 1.0)
    betas = _padded(schedule.betas, 0.0)
    alphas = _padded(schedule.alphas, 1.0)
    prev = np.concatenate([[1.0], bars[:-1]])
    denom = np.where(bars < 1.0, 1.0 - bars, 1.0)
    coef_x0 = np.sqrt(prev) * betas / denom
    coef_xt = np.sqrt(alphas) * (1.0 - prev) / denom
    variance = betas * (1.0 - prev) / denom
    # At t = 1 the posterior collapses onto x0; avoid 1 - (1 - beta) round-off.
    coef_x0[1], coef_xt[1], variance[1] = 1.0, 0.0, 0.0
    return {"coef_x0": coef_x0, "coef_xt": coef_xt, "variance": variance}


def q_posterior(x0: torch.Tensor, xt: torch.Tensor, t: Timestep,
                schedule: VarianceSchedule) -> GaussianPosterior:
    """``q(x_{t-1} | x_t, x_0)`` in closed form."""
    _check_shape(xt, x0, "x_t")
    _check_t(t, schedule)
    tables = posterior_coefficients(schedule)
    mean = _coef(tables["coef_x0"], t, x0) * x0 + _coef(tables["coef_xt"], t, x0) * xt
    variance = _coef(tables["variance"], t, x0)
    return GaussianPosterior(mean=mean, variance=variance)


def sample_training_pair(x0: torch.Tensor, t: Timestep, schedule: VarianceSchedule,
                         generator: Optional[torch.Generator] = None
                         ) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw ``(x_{t-1}, x_t)`` jointly from the forward chain started at ``x0``."""
    _check_t(t, schedule)
    eps_prev = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    eps_step = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    x_prev = q_sample_closed(x0, t - 1, schedule, eps_prev)
    return x_prev, q_sample_step(x_prev, t, schedule, eps_step)

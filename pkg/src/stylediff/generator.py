"""Style-conditioned generator ``G(x_t, y, s, t) -> x0'``.

Phoneme encoder and mel decoder are stacks of feed-forward transformer blocks
whose normalization sites are all CPLN layers conditioned on the style
embedding. The decoder output is a frame-level context that conditions every
residual block of the denoiser; only the denoiser sees the noisy mel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .cpln import CPLN, cpln_sites
from .layers import BinEmbedding, MultiHeadSelfAttention, lengths_to_mask, sinusoidal_table, timestep_embedding

PHONEME_PAD = 0


@dataclass
class GeneratorConfig:
    n_phonemes: int = 64
    n_fft_blocks: int = 2
    hidden: int = 64
    n_heads: int = 2
    conv_kernel: int = 9
    ffn_filter: int = 256
    n_denoiser_blocks: int = 4
    denoiser_hidden: int = 64
    denoiser_dropout: float = 0.2
    mel_bins: int = 80
    max_frames: int = 1000
    max_phonemes: int = 256
    style_dim: int = 128
    predictor_filter: int = 64
    predictor_kernel: int = 3
    predictor_dropout: float = 0.5
    block_dropout: float = 0.2
    n_bins: int = 256
    # geometric bin edges: equal relative resolution across the range
    log_bins: bool = True
    # bin vectors from a shared map of a smooth code instead of a free table
    shared_bin_embedding: bool = True
    time_dim: int = 128

    def __post_init__(self):
        sizes = {k: v for k, v in asdict(self).items()
                 if isinstance(v, int) and not isinstance(v, bool)}
        bad = [k for k, v in sizes.items() if v <= 0]
        if bad:
            raise ValueError(f"generator sizes must be positive: {bad}")
        if self.hidden % self.n_heads:
            raise ValueError("hidden must be divisible by n_heads")
        for name in ("denoiser_dropout", "predictor_dropout", "block_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")

    @classmethod
    def full_scale(cls, **overrides) -> "GeneratorConfig":
        base = dict(n_fft_blocks=4, hidden=256, n_heads=2, conv_kernel=9, ffn_filter=1024,
                    n_denoiser_blocks=20, denoiser_hidden=512, denoiser_dropout=0.2,
                    predictor_filter=256, predictor_kernel=3, predictor_dropout=0.5)
        base.update(overrides)
        return cls(**base)


@dataclass
class VarianceValues:
    """Variance adaptor outputs.

    ``log_duration`` is per phoneme; ``pitch`` and ``energy`` are per phoneme
    predictions expanded to frames, in normalized units.
    """

    log_duration: torch.Tensor
    durations: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    phoneme_mask: torch.Tensor
    frame_mask: torch.Tensor


@dataclass
class Conditioning:
    """Everything the denoiser needs besides ``x_t`` and ``t``."""

    context: torch.Tensor
    style: torch.Tensor
    variances: VarianceValues

    @property
    def frame_mask(self) -> torch.Tensor:
        return self.variances.frame_mask


def _masked(x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    return x if mask is None else x.masked_fill(~mask[..., None], 0.0)


def length_regulate(h: torch.Tensor, durations: torch.Tensor,
                    max_frames: Optional[int] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Repeat row ``i`` of ``h`` ``durations[i]`` times.

    Accepts ``(n, hidden)`` with ``(n,)`` durations, or batched
    ``(batch, n, hidden)`` with ``(batch, n)`` durations. Returns the expanded
    frames (zero-padded to the longest item) and per-item frame counts.
    """
    squeeze = h.dim() == 2
    if squeeze:
        h, durations = h[None], durations[None]
    durations = torch.as_tensor(durations, device=h.device).long()
    if durations.shape != h.shape[:2]:
        raise ValueError(f"durations shape {tuple(durations.shape)} != {tuple(h.shape[:2])}")
    if bool((durations < 0).any()):
        raise ValueError("durations must be non-negative")
    lengths = durations.sum(dim=1)
    if bool((lengths == 0).any()):
        raise ValueError("all-zero durations produce an empty utterance")
    n_frames = int(lengths.max())
    if max_frames is not None and n_frames > max_frames:
        raise ValueError(f"{n_frames} frames exceed max_frames={max_frames}")
    ends = durations.cumsum(dim=1)
    frames = torch.arange(n_frames, device=h.device).expand(h.shape[0], n_frames).contiguous()
    index = torch.searchsorted(ends, frames, right=True).clamp(max=h.shape[1] - 1)
    out = torch.gather(h, 1, index[..., None].expand(-1, -1, h.shape[2]))
    out = _masked(out, lengths_to_mask(lengths, n_frames))
    if squeeze:
        return out[0], lengths[0]
    return out, lengths


class ConvFeedForward(nn.Module):
    def __init__(self, hidden: int, filter_size: int, kernel: int):
        super().__init__()
        self.conv1 = nn.Conv1d(hidden, filter_size, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(filter_size, hidden, 1)

    def forward(self, x, mask=None):
        y = F.relu(self.conv1(_masked(x, mask).transpose(1, 2)))
        return self.conv2(y).transpose(1, 2)


class FFTBlock(nn.Module):
    """Self-attention and conv feed-forward, each followed by CPLN (post-norm)."""

    def __init__(self, hidden, n_heads, kernel, filter_size, dropout, style_dim):
        super().__init__()
        self.attn = MultiHeadSelfAttention(hidden, n_heads, dropout)
        self.norm1 = CPLN(hidden, style_dim)
        self.ff = ConvFeedForward(hidden, filter_size, kernel)
        self.norm2 = CPLN(hidden, style_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, s, mask):
        x = _masked(self.norm1(x + self.dropout(self.attn(x, mask)), s), mask)
        return _masked(self.norm2(x + self.dropout(self.ff(x, mask)), s), mask)


class FFTStack(nn.Module):
    def __init__(self, cfg: GeneratorConfig, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.register_buffer("positions", sinusoidal_table(max_len, cfg.hidden), persistent=False)
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.hidden, cfg.n_heads, cfg.conv_kernel, cfg.ffn_filter,
                     cfg.block_dropout, cfg.style_dim)
            for _ in range(cfg.n_fft_blocks))

    def forward(self, x, s, mask):
        n = x.shape[1]
        if n > self.max_len:
            raise ValueError(f"sequence of length {n} exceeds positional table {self.max_len}")
        x = _masked(x + self.positions[:n].to(x.dtype), mask)
        for block in self.blocks:
            x = block(x, s, mask)
        return x


class VariancePredictor(nn.Module):
    """Two (Conv1D, ReLU, norm, dropout) stages and a scalar projection."""

    def __init__(self, hidden, filter_size, kernel, dropout, style_dim):
        super().__init__()
        self.conv1 = nn.Conv1d(hidden, filter_size, kernel, padding=kernel // 2)
        self.norm1 = CPLN(filter_size, style_dim)
        self.conv2 = nn.Conv1d(filter_size, filter_size, kernel, padding=kernel // 2)
        self.norm2 = CPLN(filter_size, style_dim)
        self.dropout = nn.Dropout(dropout)
        self.proj = nn.Linear(filter_size, 1)

    def forward(self, h, s, mask):
        y = F.relu(self.conv1(_masked(h, mask).transpose(1, 2))).transpose(1, 2)
        y = self.dropout(self.norm1(y, s))
        y = F.relu(self.conv2(_masked(y, mask).transpose(1, 2))).transpose(1, 2)
        y = self.dropout(self.norm2(y, s))
        return self.proj(y).squeeze(-1).masked_fill(~mask, 0.0)


class DenoiserBlock(nn.Module):
    def __init__(self, hidden, context_dim, dropout, style_dim):
        super().__init__()
        self.time_proj = nn.Linear(hidden, hidden)
        self.context_proj = nn.Linear(context_dim, hidden)
        self.conv = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.norm = CPLN(hidden, style_dim)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, h, temb, context, s, mask):
        y = h + self.time_proj(temb)[:, None, :] + self.context_proj(context)
        y = self.conv(_masked(y, mask).transpose(1, 2)).transpose(1, 2)
        y = self.dropout(F.gelu(self.norm(y, s)))
        return _masked(h + self.out(y), mask)


class Denoiser(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        d = cfg.denoiser_hidden
        self.time_dim = cfg.time_dim
        self.inp = nn.Linear(cfg.mel_bins, d)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, 4 * d), nn.SiLU(), nn.Linear(4 * d, d))
        self.blocks = nn.ModuleList(
            DenoiserBlock(d, cfg.hidden, cfg.denoiser_dropout, cfg.style_dim)
            for _ in range(cfg.n_denoiser_blocks))
        self.out = nn.Linear(d, cfg.mel_bins)

    def forward(self, x_t, context, s, t, mask):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x_t.dtype))
        h = _masked(self.inp(x_t), mask)
        for block in self.blocks:
            h = block(h, temb, context, s, mask)
        return _masked(self.out(F.gelu(h)), mask)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.n_phonemes, cfg.hidden, padding_idx=PHONEME_PAD)
        self.encoder = FFTStack(cfg, cfg.max_phonemes)
        args = (cfg.hidden, cfg.predictor_filter, cfg.predictor_kernel, cfg.predictor_dropout,
                cfg.style_dim)
        self.duration_predictor = VariancePredictor(*args)
        self.pitch_predictor = VariancePredictor(*args)
        self.energy_predictor = VariancePredictor(*args)
        bins = BinEmbedding if cfg.shared_bin_embedding else nn.Embedding
        self.pitch_embed = bins(cfg.n_bins, cfg.hidden)
        self.energy_embed = bins(cfg.n_bins, cfg.hidden)
        self.decoder = FFTStack(cfg, cfg.max_frames)
        self.denoiser = Denoiser(cfg)
        # [mean, std, min, max] in raw units, set from the training corpus.
        self.register_buffer("pitch_stats", torch.tensor([0.0, 1.0, 0.0, 1.0]))
        self.register_buffer("energy_stats", torch.tensor([0.0, 1.0, 0.0, 1.0]))

    # variance statistics -------------------------------------------------

    def set_variance_stats(self, pitch: list[float], energy: list[float]) -> None:
        self.pitch_stats.copy_(torch.tensor(pitch, dtype=self.pitch_stats.dtype))
        self.energy_stats.copy_(torch.tensor(energy, dtype=self.energy_stats.dtype))

    @staticmethod
    def _normalize(v, stats):
        return (v - stats[0]) / stats[1]

    @staticmethod
    def _denormalize(v, stats):
        return v * stats[1] + stats[0]

    def normalize_pitch(self, pitch):
        return self._normalize(pitch, self.pitch_stats)

    def normalize_energy(self, energy):
        return self._normalize(energy, self.energy_stats)

    def _bucket(self, raw, stats):
        lo, hi = float(stats[2]), float(stats[3])
        n = self.cfg.n_bins - 1
        if self.cfg.log_bins and lo > 0.0:
            edges = torch.logspace(math.log10(lo), math.log10(hi), n,
                                   dtype=raw.dtype, device=raw.device)
        else:
            edges = torch.linspace(lo, hi, n, dtype=raw.dtype, device=raw.device)
        return torch.bucketize(raw.contiguous(), edges)

    # pipeline stages -----------------------------------------------------

    def encode_phonemes(self, phonemes: torch.Tensor, s: torch.Tensor,
                        mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None:
            mask = phonemes != PHONEME_PAD
        if bool((phonemes < 0).any()) or bool((phonemes >= self.cfg.n_phonemes).any()):
            raise ValueError("phoneme id outside vocabulary")
        return self.encoder(self.embed(phonemes), s, mask)

    def predict_variances(self, h, s, mask):
        """Per-phoneme log-duration, normalized pitch and normalized energy."""
        return (self.duration_predictor(h, s, mask),
                self.pitch_predictor(h, s, mask),
                self.energy_predictor(h, s, mask))

    @staticmethod
    def durations_from_log(log_duration: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Invert the ``log(1 + d)`` target transform, keeping at least one frame."""
        d = torch.clamp(torch.round(torch.exp(log_duration) - 1.0), min=1.0).long()
        return d.masked_fill(~mask, 0)

    def decode_context(self, frame_h, s, frame_mask):
        if frame_h.shape[1] == 0:
            raise ValueError("cannot decode zero frames")
        if frame_h.shape[1] > self.cfg.max_frames:
            raise ValueError(f"{frame_h.shape[1]} frames exceed max_frames={self.cfg.max_frames}")
        return self.decoder(frame_h, s, frame_mask)

    def prepare(self, phonemes: torch.Tensor, s: torch.Tensor,
                phoneme_mask: Optional[torch.Tensor] = None,
                durations: Optional[torch.Tensor] = None,
                pitch: Optional[torch.Tensor] = None,
                energy: Optional[torch.Tensor] = None) -> Conditioning:
        """Run encoder, variance adaptor and decoder.

        Supplying ground-truth ``durations`` (and optionally frame-level raw
        ``pitch``/``energy``) teacher-forces the adaptor; otherwise predicted
        values are used.
        """
        if phoneme_mask is None:
            phoneme_mask = phonemes != PHONEME_PAD
        h = self.encode_phonemes(phonemes, s, phoneme_mask)
        log_d, pitch_ph, energy_ph = self.predict_variances(h, s, phoneme_mask)
        if durations is None:
            durations = self.durations_from_log(log_d, phoneme_mask)
        durations = durations.masked_fill(~phoneme_mask, 0)
        frames, lengths = length_regulate(h, durations, self.cfg.max_frames)
        n_frames = frames.shape[1]
        frame_mask = lengths_to_mask(lengths, n_frames)
        pitch_fr = length_regulate(pitch_ph[..., None], durations)[0][..., 0]
        energy_fr = length_regulate(energy_ph[..., None], durations)[0][..., 0]
        raw_pitch = pitch if pitch is not None else self._denormalize(pitch_fr, self.pitch_stats)
        raw_energy = (energy if energy is not None
                      else self._denormalize(energy_fr, self.energy_stats))
        frames = frames + self.pitch_embed(self._bucket(raw_pitch.detach(), self.pitch_stats))
        frames = frames + self.energy_embed(self._bucket(raw_energy.detach(), self.energy_stats))
        context = self.decode_context(_masked(frames, frame_mask), s, frame_mask)
        variances = VarianceValues(log_d, durations, pitch_fr, energy_fr, phoneme_mask, frame_mask)
        return Conditioning(context=context, style=s, variances=variances)

    def denoise(self, x_t: torch.Tensor, cond: Conditioning, t: torch.Tensor) -> torch.Tensor:
        if x_t.shape[:2] != cond.context.shape[:2]:
            raise ValueError(f"x_t frames {tuple(x_t.shape[:2])} do not match context "
                             f"{tuple(cond.context.shape[:2])}")
        t = torch.as_tensor(t, device=x_t.device).long().reshape(-1).expand(x_t.shape[0])
        return self.denoiser(x_t, cond.context, cond.style, t, cond.frame_mask)

    def forward(self, x_t, phonemes, s, t, phoneme_mask=None, durations=None, pitch=None,
                energy=None) -> tuple[torch.Tensor, VarianceValues]:
        cond = self.prepare(phonemes, s, phoneme_mask, durations, pitch, energy)
        return self.denoise(x_t, cond, t), cond.variances

    def n_cpln_sites(self) -> int:
        return len(cpln_sites(self))


def generator_forward(generator: Generator, x_t, phonemes, s, t, **kwargs):
    return generator(x_t, phonemes, s, t, **kwargs)

"""Mel analysis and Griffin-Lim phase reconstruction (vocoder fallback)."""

from __future__ import annotations

import numpy as np

from .corpus import MelConfig


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters, shape ``(mel_bins, n_fft // 2 + 1)``, area-normalized."""
    n_freq = cfg.n_fft // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_freq)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    fb = np.zeros((cfg.mel_bins, n_freq))
    for i in range(cfg.mel_bins):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling)) * (2.0 / (hi - lo))
    return fb


def _window(n_fft: int) -> np.ndarray:
    return np.hanning(n_fft + 1)[:-1]


def stft(wave: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centered STFT, shape ``(frames, n_fft // 2 + 1)`` with ``1 + len // hop`` frames."""
    pad = n_fft // 2
    x = np.pad(np.asarray(wave, dtype=np.float64), pad, mode="reflect" if len(wave) > pad
               else "constant")
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(x[idx] * _window(n_fft), axis=1)


def istft(spec: np.ndarray, n_fft: int, hop: int, length: int) -> np.ndarray:
    window = _window(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = n_fft + hop * (len(frames) - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i, frame in enumerate(frames):
        out[i * hop:i * hop + n_fft] += frame
        norm[i * hop:i * hop + n_fft] += window ** 2
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    pad = n_fft // 2
    out = out[pad:pad + length]
    return np.pad(out, (0, max(0, length - len(out))))


def mel_spectrogram(wave: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Linear-amplitude mel spectrogram, shape ``(frames, mel_bins)``."""
    return np.abs(stft(wave, cfg.n_fft, cfg.hop)) @ mel_filterbank(cfg).T


def griffin_lim(mel: np.ndarray, cfg: MelConfig = MelConfig(), n_iters: int = 32,
                seed: int = 0) -> np.ndarray:
    """Waveform of ``(frames - 1) * hop`` samples whose mel magnitude approximates ``mel``."""
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != cfg.mel_bins:
        raise ValueError(f"expected (frames, {cfg.mel_bins}) mel, got {mel.shape}")
    magnitude = np.maximum(mel, 0.0) @ np.linalg.pinv(mel_filterbank(cfg)).T
    magnitude = np.maximum(magnitude, 0.0)
    length = (mel.shape[0] - 1) * cfg.hop
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    wave = istft(magnitude * phase, cfg.n_fft, cfg.hop, length)
    for _ in range(n_iters - 1):
        rebuilt = stft(wave, cfg.n_fft, cfg.hop)[: magnitude.shape[0]]
        phase = np.exp(1j * np.angle(rebuilt))
        wave = istft(magnitude * phase, cfg.n_fft, cfg.hop, length)
    return wave.astype(np.float32)


def write_wav(path, wave: np.ndarray, sample_rate: int) -> None:
    from scipy.io import wavfile

    peak = float(np.max(np.abs(wave))) if len(wave) else 0.0
    scaled = wave / peak * 0.95 if peak > 1.0 else wave
    wavfile.write(str(path), sample_rate, (np.asarray(scaled) * 32767).astype(np.int16))

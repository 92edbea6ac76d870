"""Synthetic style-factored corpus and the on-disk dataset format.

Synthetic mels are built analytically so that every style factor can be read
back from the spectrogram:

* pitch class sets the center bin of a Gaussian harmonic band (10 / 30 / 50),
  shifted per phoneme by ``phoneme_id % 5 - 2`` bins;
* gender places a half-amplitude secondary band 5 bins below or above it;
* speed fixes frames per phoneme (8 / 5 / 3 for slow / normal / fast);
* volume scales the whole frame (0.3 / 0.6 / 1.0);
* emotion adds one of five equal-energy textures over bins 64-79.

A per-phoneme envelope (0.9 / 1.0 / 1.1 by ``phoneme_id % 3``) gives the
energy contour some content dependence. Each utterance also draws a small
continuous pitch shift and volume gain, so pitch and energy targets cover a
continuum within each class instead of a handful of exact values.

Dataset layout::

    manifest.json          utterance ids, phoneme ids, durations, prompts, labels
    <id>.mel <id>.f0 <id>.energy
                           uint32 LE rows, uint32 LE cols, then rows*cols float32 LE
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .style import StyleFactorConfig, StylePrompt

MEL_BINS = 80
HARMONIC_BINS = 64
TEXTURE_START = 64
PITCH_CENTERS = (10.0, 30.0, 50.0)
SPEED_FRAMES = (8, 5, 3)
VOLUME_LEVELS = (0.3, 0.6, 1.0)
GENDER_OFFSETS = (-5.0, 5.0)
N_EMOTIONS = 5
BAND_WIDTH = 1.5
SECONDARY_GAIN = 0.5
TEXTURE_GAIN = 0.3
ENVELOPES = (0.9, 1.0, 1.1)
PITCH_JITTER = 1.5
GAIN_JITTER = 0.08

SUPPORTED_FACTORS = {"gender": 2, "pitch": 3, "speed": 3, "volume": 3, "emotion": N_EMOTIONS}
DEFAULT_CLASS = {"gender": 0, "pitch": 1, "speed": 1, "volume": 1, "emotion": 0}

SYNONYMS = {
    "gender": (("man", "boy", "gentleman", "male speaker"),
               ("woman", "girl", "lady", "female speaker")),
    "pitch": (("low", "deep", "bass"), ("normal", "medium", "middle"),
              ("high", "shrill", "treble")),
    "speed": (("slowly", "leisurely", "unhurriedly"), ("steadily", "evenly", "at a regular pace"),
              ("quickly", "rapidly", "hastily")),
    "volume": (("quiet", "soft", "faint"), ("moderate", "plain", "ordinary"),
               ("loud", "strong", "powerful")),
    "emotion": (("calm", "neutral"), ("happy", "cheerful"), ("sad", "gloomy"),
                ("angry", "furious"), ("surprised", "amazed")),
}


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 256
    mel_bins: int = MEL_BINS
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if not 0 < self.hop < self.n_fft:
            raise ValueError("hop must be positive and smaller than n_fft")
        if self.mel_bins < 1 or self.sample_rate < 1:
            raise ValueError("mel_bins and sample_rate must be positive")


@dataclass
class Utterance:
    id: str
    phonemes: np.ndarray
    mel: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    prompt: StylePrompt

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.mel = np.asarray(self.mel, dtype=np.float32)
        self.pitch = np.asarray(self.pitch, dtype=np.float32).reshape(-1)
        self.energy = np.asarray(self.energy, dtype=np.float32).reshape(-1)
        if len(self.phonemes) < 1:
            raise ValueError(f"utterance {self.id}: empty phoneme sequence")
        if self.durations.shape != self.phonemes.shape:
            raise ValueError(f"utterance {self.id}: {len(self.durations)} durations for "
                             f"{len(self.phonemes)} phonemes")
        if (self.durations < 0).any():
            raise ValueError(f"utterance {self.id}: negative duration")
        frames = int(self.durations.sum())
        if self.mel.ndim != 2 or self.mel.shape[0] != frames:
            raise ValueError(f"utterance {self.id}: mel has {self.mel.shape[0]} frames, "
                             f"durations sum to {frames}")
        if len(self.pitch) != frames or len(self.energy) != frames:
            raise ValueError(f"utterance {self.id}: pitch/energy length != {frames} frames")

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])


@dataclass
class CorpusSpec:
    n_utterances: int
    phoneme_vocab_size: int = 64
    factors: StyleFactorConfig = field(default_factory=StyleFactorConfig)
    seed: int = 0
    noise_std: float = 0.01
    min_phonemes: int = 4
    max_phonemes: int = 12
    pitch_jitter: float = PITCH_JITTER
    gain_jitter: float = GAIN_JITTER


# analytic construction -------------------------------------------------


def _bump(center: float) -> np.ndarray:
    bins = np.arange(MEL_BINS, dtype=np.float64)
    return np.exp(-0.5 * ((bins - center) / BAND_WIDTH) ** 2)


def emotion_textures() -> np.ndarray:
    """Five equal-energy, non-negative textures over the upper 16 bins."""
    width = MEL_BINS - TEXTURE_START
    j = np.arange(width) + 0.5
    out = np.zeros((N_EMOTIONS, MEL_BINS))
    for k in range(N_EMOTIONS):
        out[k, TEXTURE_START:] = 0.5 * (1.0 + np.cos(np.pi * (k + 1) * j / width))
    return out


_TEXTURES = emotion_textures()


def pitch_offset(phoneme_id: int) -> float:
    return float(int(phoneme_id) % 5 - 2)


def envelope(phoneme_id: int) -> float:
    return ENVELOPES[int(phoneme_id) % 3]


def synth_frame(pitch_bin: float, gender: Optional[int], volume: float,
                emotion: Optional[int]) -> np.ndarray:
    """One clean mel frame at unit envelope."""
    frame = _bump(pitch_bin)
    if gender is not None:
        frame = frame + SECONDARY_GAIN * _bump(pitch_bin + GENDER_OFFSETS[gender])
    if emotion is not None:
        frame = frame + TEXTURE_GAIN * _TEXTURES[emotion]
    return volume * frame


def unit_frame_rms() -> float:
    """RMS of a unit-volume, unit-envelope frame (identical for every class combination)."""
    return float(np.sqrt(np.mean(synth_frame(PITCH_CENTERS[1], 0, 1.0, 0) ** 2)))


def render_utterance(phonemes: Sequence[int], labels: dict[str, int], pitch_shift: float = 0.0,
                     gain: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Clean mel, durations, pitch contour (bins) and energy contour for given labels."""
    cls = {**DEFAULT_CLASS, **labels}
    per_phone = SPEED_FRAMES[cls["speed"]]
    center = PITCH_CENTERS[cls["pitch"]] + pitch_shift
    volume = VOLUME_LEVELS[cls["volume"]] * gain
    gender = cls["gender"] if "gender" in labels else None
    emotion = labels.get("emotion")
    frames, pitch = [], []
    for pid in phonemes:
        p = center + pitch_offset(pid)
        frame = envelope(pid) * synth_frame(p, gender, volume, emotion)
        frames.extend([frame] * per_phone)
        pitch.extend([p] * per_phone)
    mel = np.stack(frames)
    durations = np.full(len(phonemes), per_phone, dtype=np.int64)
    energy = np.sqrt(np.mean(mel ** 2, axis=1))
    return mel, durations, np.asarray(pitch), energy


def render_prompt(labels: dict[str, int], rng: np.random.Generator) -> str:
    cls = {**DEFAULT_CLASS, **labels}

    def word(factor):
        options = SYNONYMS[factor][cls[factor]]
        return options[int(rng.integers(len(options)))]

    g, p, sp, v = word("gender"), word("pitch"), word("speed"), word("volume")
    e = word("emotion") if "emotion" in labels else None
    template = int(rng.integers(3))
    if template == 0:
        text = f"a {v} {g} speaks {sp} with {p} pitch"
        return text + (f" in a {e} mood" if e else "")
    if template == 1:
        text = f"please say a {v} {g} with a {p} voice talking {sp}"
        return text + (f" and sounding {e}" if e else "")
    mood = f" {e}" if e else ""
    return f"{sp} a{mood} {g} talks with a {v} and {p} voice"


def check_factor_config(factors: StyleFactorConfig) -> None:
    for name, k in factors.factors:
        if name not in SUPPORTED_FACTORS:
            raise ValueError(f"synthetic corpus has no construction for factor {name!r}")
        if k != SUPPORTED_FACTORS[name]:
            raise ValueError(f"factor {name!r} needs {SUPPORTED_FACTORS[name]} classes, got {k}")


def generate_synthetic_corpus(spec: CorpusSpec) -> list[Utterance]:
    if spec.n_utterances < 1:
        raise ValueError("n_utterances must be at least 1")
    if spec.phoneme_vocab_size < 2:
        raise ValueError("phoneme_vocab_size must be at least 2 (id 0 is padding)")
    if not 1 <= spec.min_phonemes <= spec.max_phonemes:
        raise ValueError("invalid phoneme length range")
    # Wider jitter would let neighbouring classes overlap.
    if not (0 <= spec.pitch_jitter <= 3 and 0 <= spec.gain_jitter <= 0.1):
        raise ValueError("pitch_jitter must be in [0, 3] bins and gain_jitter in [0, 0.1]")
    check_factor_config(spec.factors)
    rng = np.random.default_rng(spec.seed)
    width = len(str(spec.n_utterances - 1))
    out = []
    for i in range(spec.n_utterances):
        n = int(rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
        phonemes = rng.integers(1, spec.phoneme_vocab_size, size=n)
        labels = {name: int(rng.integers(k)) for name, k in spec.factors.factors}
        text = render_prompt(labels, rng)
        shift = float(rng.uniform(-spec.pitch_jitter, spec.pitch_jitter))
        gain = 1.0 + float(rng.uniform(-spec.gain_jitter, spec.gain_jitter))
        mel, durations, pitch, energy = render_utterance(phonemes, labels, shift, gain)
        if spec.noise_std > 0:
            # Separate stream: the clean content does not depend on noise_std.
            noise_rng = np.random.default_rng((spec.seed, 1, i))
            mel = mel + spec.noise_std * noise_rng.standard_normal(mel.shape)
        out.append(Utterance(id=f"utt{i:0{width}d}", phonemes=phonemes, mel=mel,
                             durations=durations, pitch=pitch, energy=energy,
                             prompt=StylePrompt(text=text, labels=labels)))
    return out


# on-disk format --------------------------------------------------------

_HEADER = struct.Struct("<II")
MANIFEST = "manifest.json"
TENSOR_SUFFIXES = (".mel", ".f0", ".energy")


def write_tensor(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim == 1:
        m = m[:, None]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*m.shape))
        fh.write(np.ascontiguousarray(m).tobytes())


def read_tensor(path, owner: str = "") -> np.ndarray:
    label = f"utterance {owner}: " if owner else ""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ValueError(f"{label}missing tensor file {Path(path).name}") from None
    if len(raw) < _HEADER.size:
        raise ValueError(f"{label}corrupt shape header in {Path(path).name}")
    rows, cols = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise ValueError(f"{label}{Path(path).name} holds {len(raw)} bytes, header implies "
                         f"{expected}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)


def save_dataset(utterances: Sequence[Utterance], path, factors: Optional[StyleFactorConfig] = None,
                 mel_config: MelConfig = MelConfig()) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for u in utterances:
        write_tensor(root / f"{u.id}.mel", u.mel)
        write_tensor(root / f"{u.id}.f0", u.pitch)
        write_tensor(root / f"{u.id}.energy", u.energy)
        records.append({"id": u.id, "phonemes": u.phonemes.tolist(),
                        "durations": u.durations.tolist(), "prompt": u.prompt.text,
                        "labels": dict(u.prompt.labels)})
    manifest = {"format": "stylediff-dataset", "version": 1, "mel_config": asdict(mel_config),
                "factors": None if factors is None else factors.to_list(),
                "utterances": records}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_dataset(path) -> list[Utterance]:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"no {MANIFEST} in {root}") from None
    records = manifest["utterances"]
    n_mel = len(list(root.glob("*.mel")))
    if n_mel != len(records):
        raise ValueError(f"manifest lists {len(records)} utterances but {n_mel} .mel tensors exist")
    factors = manifest.get("factors")
    cfg = StyleFactorConfig(tuple(tuple(f) for f in factors)) if factors else None
    out = []
    for rec in records:
        uid = rec["id"]
        mel = read_tensor(root / f"{uid}.mel", uid)
        pitch = read_tensor(root / f"{uid}.f0", uid)
        energy = read_tensor(root / f"{uid}.energy", uid)
        labels = {k: int(v) for k, v in rec.get("labels", {}).items()}
        if cfg is not None:
            cfg.validate_labels(labels)
        try:
            out.append(Utterance(id=uid, phonemes=rec["phonemes"], mel=mel,
                                 durations=rec["durations"], pitch=pitch, energy=energy,
                                 prompt=StylePrompt(text=rec["prompt"], labels=labels)))
        except ValueError as exc:
            raise ValueError(f"utterance {uid}: {exc}") from exc
    return out


def load_factor_config(path) -> Optional[StyleFactorConfig]:
    manifest = json.loads((Path(path) / MANIFEST).read_text(encoding="utf-8"))
    factors = manifest.get("factors")
    return StyleFactorConfig(tuple(tuple(f) for f in factors)) if factors else None

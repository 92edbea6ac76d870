"""Style-factor probes, accuracy reports, timestep ablation and plot exports.

The probes invert the synthetic construction in :mod:`stylediff.corpus`:
pitch from the harmonic-band centroid, gender from the side of the secondary
band, speed from frames per phoneme, volume from mean frame RMS, emotion from
correlation with the texture templates. Ties resolve to the lower class index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .corpus import (GENDER_OFFSETS, HARMONIC_BINS, PITCH_CENTERS, SPEED_FRAMES, TEXTURE_START,
                     VOLUME_LEVELS, emotion_textures, unit_frame_rms)
from .style import StyleFactorConfig

UNVOICED = 0.0
RMS_FLOOR = 1e-4
_CENTROID_HALF_WIDTH = 2


def _as_mel(mel) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise ValueError("expected a non-empty (frames, bins) mel")
    return mel


def extract_energy(mel) -> np.ndarray:
    """Per-frame root-mean-square over bins."""
    mel = _as_mel(mel)
    return np.sqrt(np.mean(mel ** 2, axis=1))


def extract_pitch_contour(mel) -> np.ndarray:
    """Per-frame centroid (in bins) of the dominant harmonic band; ``0`` marks silence."""
    mel = _as_mel(mel)
    region = np.maximum(mel[:, :HARMONIC_BINS], 0.0)
    rms = extract_energy(mel)
    peak = region.argmax(axis=1)
    bins = np.arange(HARMONIC_BINS)
    contour = np.full(mel.shape[0], UNVOICED)
    for i in range(mel.shape[0]):
        if rms[i] < RMS_FLOOR:
            continue
        lo = max(0, peak[i] - _CENTROID_HALF_WIDTH)
        hi = min(HARMONIC_BINS, peak[i] + _CENTROID_HALF_WIDTH + 1)
        w = region[i, lo:hi]
        contour[i] = float((bins[lo:hi] * w).sum() / w.sum()) if w.sum() > 0 else float(peak[i])
    return contour


def _nearest(value: float, centers: Sequence[float]) -> int:
    return int(np.argmin(np.abs(np.asarray(centers, dtype=np.float64) - value)))


def _gender(mel: np.ndarray, contour: np.ndarray) -> int:
    offset = int(abs(GENDER_OFFSETS[1]))
    score = 0.0
    for frame, c in zip(mel, contour):
        if c == UNVOICED:
            continue
        p = int(round(c))
        above = frame[max(0, p + offset - 1):p + offset + 2].sum()
        below = frame[max(0, p - offset - 1):max(0, p - offset + 2)].sum()
        score += above - below
    return 1 if score > 0 else 0


def _emotion(mel: np.ndarray) -> int:
    templates = emotion_textures()[:, TEXTURE_START:]
    templates = templates - templates.mean(axis=1, keepdims=True)
    region = mel[:, TEXTURE_START:].mean(axis=0)
    region = region - region.mean()
    return int(np.argmax(templates @ region))


def classify_generated(mel, durations: Optional[Sequence[int]],
                       factors: StyleFactorConfig = StyleFactorConfig()) -> dict[str, int]:
    """Predict every configured style factor from a mel and its phoneme durations."""
    mel = _as_mel(mel)
    out = {}
    contour = extract_pitch_contour(mel)
    for name in factors.names:
        if name == "pitch":
            voiced = contour[contour != UNVOICED]
            out[name] = _nearest(float(np.median(voiced)), PITCH_CENTERS) if len(voiced) else 0
        elif name == "speed":
            if durations is None or len(durations) == 0:
                raise ValueError("speed needs per-phoneme durations")
            out[name] = _nearest(float(np.sum(durations)) / len(durations), SPEED_FRAMES)
        elif name == "volume":
            ref = unit_frame_rms()
            out[name] = _nearest(float(extract_energy(mel).mean()),
                                 [v * ref for v in VOLUME_LEVELS])
        elif name == "gender":
            out[name] = _gender(mel, contour)
        elif name == "emotion":
            out[name] = _emotion(mel)
        else:
            raise ValueError(f"no probe for style factor {name!r}")
    return out


@dataclass
class StyleAccuracyReport:
    per_factor: dict[str, float]
    mean: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        rows = [f"{name:<10}{acc:>8.4f}" for name, acc in self.per_factor.items()]
        return "\n".join(rows + [f"{'mean':<10}{self.mean:>8.4f}", f"{'n':<10}{self.n:>8d}"])


def style_accuracy(predictions: Sequence[Mapping[str, int]],
                   labels: Sequence[Mapping[str, int]]) -> StyleAccuracyReport:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions vs {len(labels)} label sets")
    hits: dict[str, list[int]] = {}
    for pred, lab in zip(predictions, labels):
        for name, value in lab.items():
            if name in pred:
                hits.setdefault(name, []).append(int(pred[name] == value))
    per = {name: float(np.mean(v)) for name, v in hits.items()}
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return StyleAccuracyReport(per_factor=per, mean=mean, n=len(labels))


# model-level evaluations ----------------------------------------------


def evaluate_style(state, utterances, seed: int = 0, T_override: Optional[int] = None,
                   batch_size: int = 32):
    """Synthesize each utterance from its prompt and score the probes against its labels."""
    from .engine import synthesize_batch

    preds, labels = [], []
    for b0 in range(0, len(utterances), batch_size):
        chunk = utterances[b0:b0 + batch_size]
        outs = synthesize_batch(state, [u.phonemes.tolist() for u in chunk],
                                prompts=[u.prompt.text for u in chunk], seed=seed + b0,
                                T_override=T_override)
        for u, o in zip(chunk, outs):
            preds.append(classify_generated(o.mel, o.durations, state.factors))
            labels.append(u.prompt.labels)
    return style_accuracy(preds, labels), preds


def aligned_mel_mae(state, utterances, seed: int = 0, T_override: Optional[int] = None,
                    batch_size: int = 32) -> float:
    """Synthesis error against ground truth with ground-truth durations fixing alignment."""
    from .engine import synthesize_batch

    total, count = 0.0, 0
    for b0 in range(0, len(utterances), batch_size):
        chunk = utterances[b0:b0 + batch_size]
        outs = synthesize_batch(state, [u.phonemes.tolist() for u in chunk],
                                prompts=[u.prompt.text for u in chunk], seed=seed + b0,
                                T_override=T_override,
                                durations=[u.durations.tolist() for u in chunk])
        for u, o in zip(chunk, outs):
            total += float(np.abs(o.mel - u.mel).sum())
            count += u.mel.size
    return total / count


@dataclass
class AblationRow:
    T: int
    mel_mae: float
    style_mean: float
    per_factor: dict[str, float] = field(default_factory=dict)


def ablate_timesteps(state, utterances, T_values: Sequence[int], seed: int = 0
                     ) -> list[AblationRow]:
    if not T_values:
        raise ValueError("T_values must be non-empty")
    rows = []
    for T in T_values:
        report, _ = evaluate_style(state, utterances, seed=seed, T_override=T)
        mae = aligned_mel_mae(state, utterances, seed=seed, T_override=T)
        rows.append(AblationRow(T=int(T), mel_mae=mae, style_mean=report.mean,
                                per_factor=report.per_factor))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'T':>3}  {'mel_mae':>10}  {'style_mean':>10}"]
    lines += [f"{r.T:>3}  {r.mel_mae:>10.5f}  {r.style_mean:>10.4f}" for r in rows]
    return "\n".join(lines)


def ablation_json(rows: Sequence[AblationRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=1)


# plot data --------------------------------------------------------------

CSV_COLUMNS = ("frame", "pitch_gen", "pitch_gt", "energy_gen", "energy_gt")


def export_plot_data(pairs: Sequence[tuple], out_dir, heatmaps: bool = False) -> list[Path]:
    """Write pitch/energy CSV series and mel matrices for (generated, ground-truth) pairs.

    Each pair element is an :class:`~stylediff.corpus.Utterance` or a bare mel
    matrix. Pairs must have equal frame counts.
    """
    from .corpus import write_tensor

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (gen, gt) in enumerate(pairs):
        name = getattr(gt, "id", f"pair{i:03d}")
        gen_mel = _as_mel(getattr(gen, "mel", gen))
        gt_mel = _as_mel(getattr(gt, "mel", gt))
        if gen_mel.shape != gt_mel.shape:
            raise ValueError(f"{name}: generated {gen_mel.shape} vs ground truth {gt_mel.shape}")
        columns = (np.arange(len(gen_mel)), extract_pitch_contour(gen_mel),
                   extract_pitch_contour(gt_mel), extract_energy(gen_mel), extract_energy(gt_mel))
        csv_path = out / f"{name}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in zip(*columns):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        written.append(csv_path)
        for tag, mel in (("gen", gen_mel), ("gt", gt_mel)):
            p = out / f"{name}.{tag}.mel"
            write_tensor(p, mel)
            written.append(p)
        if heatmaps:
            written.append(_heatmap(out / f"{name}.png", gen_mel, gt_mel))
    return written


def read_plot_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}


def _heatmap(path: Path, gen: np.ndarray, gt: np.ndarray) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    for ax, mel, title in zip(axes, (gen, gt), ("generated", "ground truth")):
        ax.imshow(mel.T, origin="lower", aspect="auto")
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path

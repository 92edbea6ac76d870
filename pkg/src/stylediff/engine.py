"""Adversarial denoising training loop and few-step ancestral synthesis."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .corpus import Utterance
from .cpln import clamp_rho
from .discriminator import Discriminator
from .generator import Generator
from .layers import lengths_to_mask
from .losses import (LossWeights, adversarial_loss, discriminator_loss, feature_matching_loss,
                     generator_total_loss, mel_reconstruction_loss, variance_loss)
from .schedule import (VarianceSchedule, make_schedule, q_posterior, q_sample_closed, respace,
                       sample_training_pair)
from .seeding import derive_seed, numpy_generator, torch_generator
from .style import (StyleEncoder, StyleFactorConfig, StyleHeads, Vocab, build_style_encoder,
                    pad_token_batch, style_classification_loss, tokenize_prompt)

log = logging.getLogger(__name__)


# data -------------------------------------------------------------------


@dataclass
class Example:
    """One utterance converted to tensors, with its tokenized prompt."""

    id: str
    phonemes: torch.Tensor
    durations: torch.Tensor
    mel: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    tokens: list[int]
    labels: dict[str, int]


def make_examples(utterances: Iterable[Utterance], vocab: Vocab) -> list[Example]:
    return [Example(id=u.id,
                    phonemes=torch.from_numpy(u.phonemes.copy()),
                    durations=torch.from_numpy(u.durations.copy()),
                    mel=torch.from_numpy(u.mel.copy()),
                    pitch=torch.from_numpy(u.pitch.copy()),
                    energy=torch.from_numpy(u.energy.copy()),
                    tokens=tokenize_prompt(u.prompt.text, vocab),
                    labels=dict(u.prompt.labels))
            for u in utterances]


@dataclass
class Batch:
    phonemes: torch.Tensor
    phoneme_mask: torch.Tensor
    durations: torch.Tensor
    mel: torch.Tensor
    frame_mask: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    token_ids: torch.Tensor
    token_mask: torch.Tensor
    labels: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.phonemes.shape[0]


def _pad_stack(seqs: Sequence[torch.Tensor], fill=0) -> torch.Tensor:
    longest = max(s.shape[0] for s in seqs)
    out = seqs[0].new_full((len(seqs), longest, *seqs[0].shape[1:]), fill)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out


def collate(examples: Sequence[Example], factors: StyleFactorConfig) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty batch")
    phonemes = _pad_stack([e.phonemes for e in examples])
    ids, tmask = pad_token_batch([e.tokens for e in examples])
    frames = torch.tensor([e.mel.shape[0] for e in examples])
    labels = {name: torch.tensor([e.labels.get(name, -1) for e in examples])
              for name in factors.names}
    return Batch(phonemes=phonemes,
                 phoneme_mask=lengths_to_mask(torch.tensor([len(e.phonemes) for e in examples])),
                 durations=_pad_stack([e.durations for e in examples]),
                 mel=_pad_stack([e.mel for e in examples]),
                 frame_mask=lengths_to_mask(frames),
                 pitch=_pad_stack([e.pitch for e in examples]),
                 energy=_pad_stack([e.energy for e in examples]),
                 token_ids=ids, token_mask=tmask, labels=labels)


def variance_stats(utterances: Iterable) -> tuple[list[float], list[float]]:
    """``[mean, std, min, max]`` of pitch and energy over every frame."""
    pitch = np.concatenate([np.asarray(u.pitch, dtype=np.float64).reshape(-1) for u in utterances])
    energy = np.concatenate([np.asarray(u.energy, dtype=np.float64).reshape(-1)
                             for u in utterances])

    def stats(v):
        return [float(v.mean()), float(max(v.std(), 1e-3)), float(v.min()), float(v.max())]

    return stats(pitch), stats(energy)


# state ------------------------------------------------------------------


@dataclass
class TrainState:
    config: RunConfig
    vocab: Vocab
    factors: StyleFactorConfig
    generator: Generator
    discriminator: Discriminator
    style_encoder: StyleEncoder
    style_heads: StyleHeads
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    schedule: VarianceSchedule
    step: int = 0

    @property
    def weights(self) -> LossWeights:
        return self.config.weights

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def style_frozen(self) -> bool:
        return self.config.style.freeze

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"generator": self.generator, "discriminator": self.discriminator,
                "style_encoder": self.style_encoder, "style_heads": self.style_heads}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"opt_g": self.opt_g, "opt_d": self.opt_d}

    def train(self, mode: bool = True) -> None:
        for m in self.modules().values():
            m.train(mode)
        if self.style_frozen:
            self.style_encoder.eval()

    def eval(self) -> None:
        self.train(False)


def _build_optimizers(config: RunConfig, generator, discriminator, encoder, heads):
    oc = config.optim
    betas = tuple(oc.betas)
    groups = [{"params": list(generator.parameters()), "lr": oc.lr_g}]
    if not config.style.freeze:
        lr_style = oc.lr_style if oc.lr_style is not None else oc.lr_g
        groups.append({"params": list(encoder.parameters()) + list(heads.parameters()),
                       "lr": lr_style})
    opt_g = torch.optim.Adam(groups, lr=oc.lr_g, betas=betas)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=oc.lr_d, betas=betas)
    return opt_g, opt_d


def create_state(config: RunConfig, vocab: Vocab,
                 stats: Optional[tuple[list[float], list[float]]] = None) -> TrainState:
    """Initialize every network from the run seed's ``init`` stream."""
    factors = StyleFactorConfig(tuple(tuple(f) for f in config.style.factors))
    sc = config.style
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "init"))
        encoder = build_style_encoder(len(vocab), sc.hidden, sc.n_layers, sc.n_heads, sc.ffn,
                                      sc.max_len, sc.dropout, sc.style_dim)
        heads = StyleHeads(factors, sc.style_dim)
        generator = Generator(config.generator)
        discriminator = Discriminator(config.discriminator)
    if config.generator.style_dim != sc.style_dim or config.discriminator.style_dim != sc.style_dim:
        raise ValueError("style_dim must agree across style encoder, generator and discriminator")
    if stats is not None:
        generator.set_variance_stats(*stats)
    opt_g, opt_d = _build_optimizers(config, generator, discriminator, encoder, heads)
    sched = make_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    return TrainState(config=config, vocab=vocab, factors=factors, generator=generator,
                      discriminator=discriminator, style_encoder=encoder, style_heads=heads,
                      opt_g=opt_g, opt_d=opt_d, schedule=sched)


# training ---------------------------------------------------------------


def sample_timesteps(batch_size: int, T: int, generator: torch.Generator) -> torch.Tensor:
    """One uniform draw from ``{1, ..., T}`` per batch element."""
    return torch.randint(1, T + 1, (batch_size,), generator=generator)


def _mask_frames(x: torch.Tensor, frame_mask: torch.Tensor) -> torch.Tensor:
    return x.masked_fill(~frame_mask[..., None], 0.0)


def _check_finite(values: dict[str, torch.Tensor], step: int) -> None:
    for name, v in values.items():
        if not bool(torch.isfinite(v).all()):
            raise FloatingPointError(f"non-finite {name} loss at step {step}: {v.detach().item()}")


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def style_embedding(state: TrainState, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if state.style_frozen:
        with torch.no_grad():
            return state.style_encoder(ids, mask)
    return state.style_encoder(ids, mask)


def train_step(state: TrainState, batch: Batch) -> dict[str, float]:
    """One generator update followed by one discriminator update."""
    step = state.step
    rng = torch_generator(state.seed, "training", step)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(state.seed, "dropout", step))
        state.train()
        gen, disc, sched = state.generator, state.discriminator, state.schedule
        fmask = batch.frame_mask
        x0 = batch.mel

        s = style_embedding(state, batch.token_ids, batch.token_mask)
        if state.style_frozen:
            loss_style = torch.zeros(())
        else:
            loss_style = style_classification_loss(state.style_heads(s), batch.labels)

        t = sample_timesteps(batch.size, sched.T, rng)
        x_prev, x_t = sample_training_pair(x0, t, sched, rng)
        x_prev, x_t = _mask_frames(x_prev, fmask), _mask_frames(x_t, fmask)

        x0_pred, var = gen(x_t, batch.phonemes, s, t, phoneme_mask=batch.phoneme_mask,
                           durations=batch.durations, pitch=batch.pitch, energy=batch.energy)
        noise = torch.randn(x_t.shape, generator=rng)
        x_prev_fake = _mask_frames(q_posterior(x0_pred, x_t, t, sched).sample(noise), fmask)

        s_d = s.detach()
        real = disc(x_prev, x_t, t, s_d, fmask)

        _set_requires_grad(disc, False)
        fake = disc(x_prev_fake, x_t, t, s_d, fmask)
        l_dur, l_pitch, l_energy = variance_loss(
            var.log_duration, var.pitch, var.energy, batch.durations,
            gen.normalize_pitch(batch.pitch), gen.normalize_energy(batch.energy),
            batch.phoneme_mask, fmask)
        parts = {
            "adv": adversarial_loss(fake.score),
            "fm": feature_matching_loss([f.detach() for f in real.features], fake.features,
                                        real.masks),
            "duration": l_dur, "pitch": l_pitch, "energy": l_energy,
            "mel": mel_reconstruction_loss(x0_pred, x0, fmask),
        }
        loss_g = generator_total_loss(parts, state.weights) + loss_style
        _check_finite({**parts, "style": loss_style, "generator": loss_g}, step)
        state.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        state.opt_g.step()
        clamp_rho(gen)
        _set_requires_grad(disc, True)

        fake_d = disc(x_prev_fake.detach(), x_t, t, s_d, fmask)
        loss_d = discriminator_loss(real.score, fake_d.score)
        _check_finite({"discriminator": loss_d}, step)
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()

    state.step += 1
    metrics = {"step": state.step, "loss_g": loss_g.item(), "loss_d": loss_d.item(),
               "style": loss_style.item(),
               "d_real": real.score.mean().item(), "d_fake": fake_d.score.mean().item()}
    metrics.update({k: v.item() for k, v in parts.items()})
    return metrics


def pretrain_style(state: TrainState, examples: Sequence[Example], steps: int,
                   batch_size: int = 32, lr: float = 1e-3) -> list[float]:
    """Fit the style encoder and heads on prompt classification alone."""
    params = list(state.style_encoder.parameters()) + list(state.style_heads.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    n = len(examples)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(state.seed, "style-pretrain"))
        state.style_encoder.train()
        for k in range(steps):
            idx = numpy_generator(state.seed, "style-pretrain", k).choice(n, min(batch_size, n),
                                                                          replace=False)
            batch = collate([examples[i] for i in idx], state.factors)
            s = state.style_encoder(batch.token_ids, batch.token_mask)
            loss = style_classification_loss(state.style_heads(s), batch.labels)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss))
    return losses


def batch_order(n_examples: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the batch consumed at (0-based) ``step``: seeded reshuffle every epoch."""
    per_epoch = math.ceil(n_examples / batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = numpy_generator(seed, "shuffle", epoch).permutation(n_examples)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def fit(state: TrainState, examples: Sequence[Example], max_steps: Optional[int] = None,
        batch_size: Optional[int] = None, checkpoint_every: Optional[int] = None,
        run_dir=None, on_step: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Train until ``state.step == max_steps``.

    When ``run_dir`` is given, appends one JSON record per step to
    ``metrics.log`` and writes checkpoints under ``checkpoints/`` every
    ``checkpoint_every`` steps and at the final step.
    """
    from .checkpoint import save_checkpoint

    oc = state.config.optim
    max_steps = oc.max_steps if max_steps is None else max_steps
    batch_size = oc.batch_size if batch_size is None else batch_size
    checkpoint_every = oc.checkpoint_every if checkpoint_every is None else checkpoint_every
    if not examples:
        raise ValueError("cannot fit on an empty dataset")
    if state.step >= max_steps:
        return state
    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "metrics.log", "a", encoding="utf-8")
    try:
        while state.step < max_steps:
            idx = batch_order(len(examples), batch_size, state.seed, state.step)
            start = time.perf_counter()
            metrics = train_step(state, collate([examples[i] for i in idx], state.factors))
            if log_fh is not None:
                record = dict(metrics, wall_time=round(time.perf_counter() - start, 6))
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(metrics)
            if state.step % 100 == 0:
                log.info("step %d  mel %.4f  loss_d %.4f", state.step, metrics["mel"],
                         metrics["loss_d"])
            due = checkpoint_every and state.step % checkpoint_every == 0
            if run_dir is not None and (due or state.step == max_steps):
                save_checkpoint(state, run_dir / "checkpoints" / f"step_{state.step:08d}")
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


# inference --------------------------------------------------------------


@torch.no_grad()
def embed_prompts(state: TrainState, prompts: Sequence[str]) -> torch.Tensor:
    state.eval()
    ids, mask = pad_token_batch([tokenize_prompt(p, state.vocab) for p in prompts])
    return state.style_encoder(ids, mask)


@dataclass
class Synthesis:
    mel: np.ndarray
    durations: np.ndarray


@torch.no_grad()
def synthesize_batch(state: TrainState, phonemes: Sequence[Sequence[int]],
                     prompts: Optional[Sequence[str]] = None,
                     embeddings: Optional[torch.Tensor] = None, seed: int = 0,
                     T_override: Optional[int] = None,
                     durations: Optional[Sequence[Sequence[int]]] = None,
                     allow_untrained: bool = False) -> list[Synthesis]:
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``t = 1``.

    ``T_override`` runs on a respaced sub-schedule of the trained one. Passing
    ``durations`` fixes the frame alignment instead of using the predictor.
    """
    if state is None:
        raise RuntimeError("no model state to synthesize from")
    if state.step == 0 and not allow_untrained:
        raise RuntimeError("model has not been trained")
    if not phonemes or any(len(p) == 0 for p in phonemes):
        raise ValueError("empty phoneme sequence")
    state.eval()
    if embeddings is None:
        if prompts is None:
            raise ValueError("need either prompts or style embeddings")
        embeddings = embed_prompts(state, prompts)
    s = torch.as_tensor(embeddings, dtype=torch.float32)
    if s.dim() == 1:
        s = s[None]
    ph = _pad_stack([torch.as_tensor(p, dtype=torch.long) for p in phonemes])
    pmask = lengths_to_mask(torch.tensor([len(p) for p in phonemes]))
    dur = None
    if durations is not None:
        dur = _pad_stack([torch.as_tensor(d, dtype=torch.long) for d in durations])
    cond = state.generator.prepare(ph, s, pmask, durations=dur)
    sched, timesteps = respace(state.schedule, T_override or state.schedule.T)
    rng = torch_generator(seed, "inference")
    fmask = cond.frame_mask
    x = _mask_frames(torch.randn((*fmask.shape, state.config.generator.mel_bins), generator=rng),
                     fmask)
    for k in range(sched.T, 0, -1):
        x0 = state.generator.denoise(x, cond, torch.full((ph.shape[0],), timesteps[k - 1]))
        noise = torch.randn(x.shape, generator=rng)
        x = _mask_frames(q_posterior(x0, x, k, sched).sample(noise), fmask)
    lengths = fmask.sum(dim=1)
    d = cond.variances.durations
    return [Synthesis(mel=x[i, : int(lengths[i])].numpy().copy(),
                      durations=d[i, : len(phonemes[i])].numpy().copy())
            for i in range(ph.shape[0])]


def synthesize(state: TrainState, phonemes: Sequence[int], prompt: Optional[str] = None,
               embedding: Optional[torch.Tensor] = None, seed: int = 0,
               T_override: Optional[int] = None, allow_untrained: bool = False) -> Synthesis:
    return synthesize_batch(state, [list(phonemes)], None if prompt is None else [prompt],
                            None if embedding is None else torch.as_tensor(embedding)[None],
                            seed, T_override, allow_untrained=allow_untrained)[0]


@torch.no_grad()
def eval_mel_mae(state: TrainState, examples: Sequence[Example], seed: int = 0,
                 batch_size: int = 32) -> float:
    """Teacher-forced ``x0`` reconstruction error averaged over every timestep.

    Noise is drawn from a fixed stream so the value is comparable across
    training steps.
    """
    state.eval()
    total, count = 0.0, 0
    for b0 in range(0, len(examples), batch_size):
        batch = collate(examples[b0:b0 + batch_size], state.factors)
        s = state.style_encoder(batch.token_ids, batch.token_mask)
        cond = state.generator.prepare(batch.phonemes, s, batch.phoneme_mask,
                                       durations=batch.durations, pitch=batch.pitch,
                                       energy=batch.energy)
        rng = torch_generator(seed, "eval", b0)
        for t in range(1, state.schedule.T + 1):
            noise = torch.randn(batch.mel.shape, generator=rng)
            x_t = _mask_frames(q_sample_closed(batch.mel, t, state.schedule, noise),
                               batch.frame_mask)
            x0 = state.generator.denoise(x_t, cond, torch.full((batch.size,), t))
            total += float(mel_reconstruction_loss(x0, batch.mel, batch.frame_mask)) * batch.size
            count += batch.size
    return total / count

"""Micro-sized models and inputs shared by the gradient checks."""

import torch

from stylediff.discriminator import Discriminator, DiscriminatorConfig
from stylediff.generator import Generator, GeneratorConfig
from stylediff.losses import (LossWeights, adversarial_loss, discriminator_loss,
                              feature_matching_loss, generator_total_loss,
                              mel_reconstruction_loss, variance_loss)
from stylediff.schedule import make_schedule, q_posterior

MICRO_GEN = dict(n_phonemes=6, n_fft_blocks=1, hidden=8, n_heads=2, conv_kernel=3, ffn_filter=8,
                 n_denoiser_blocks=1, denoiser_hidden=8, mel_bins=4, max_frames=16,
                 max_phonemes=8, predictor_filter=8, n_bins=8, time_dim=8)
MICRO_DISC = dict(channels=[4, 4, 1], kernels=[3, 3, 3], strides=[1, 2, 1], mel_bins=4,
                  time_dim=8)


def micro_models(seed=0):
    torch.manual_seed(seed)
    gen = Generator(GeneratorConfig(**MICRO_GEN)).double().eval()
    disc = Discriminator(DiscriminatorConfig(**MICRO_DISC)).double().eval()
    gen.set_variance_stats([1.0, 0.5, 0.0, 2.0], [0.5, 0.2, 0.0, 1.0])
    # Move rho off its clamp boundary region so every path carries gradient.
    for p in gen.parameters():
        if p.dim() == 0:
            p.data.fill_(0.7)
    return gen, disc


def micro_batch(seed=1):
    g = torch.Generator().manual_seed(seed)
    d = torch.float64
    return dict(
        phonemes=torch.tensor([[1, 4]]),
        durations=torch.tensor([[1, 2]]),
        x0=torch.randn(1, 3, 4, generator=g, dtype=d),
        x_t=torch.randn(1, 3, 4, generator=g, dtype=d),
        x_prev=torch.randn(1, 3, 4, generator=g, dtype=d),
        noise=torch.randn(1, 3, 4, generator=g, dtype=d),
        s=torch.randn(1, 128, generator=g, dtype=d),
        pitch=torch.tensor([[0.5, 1.5, 1.5]], dtype=d),
        energy=torch.tensor([[0.4, 0.7, 0.7]], dtype=d),
        t=torch.tensor([2]),
    )


def micro_generator_loss(gen, disc, b, weights=LossWeights()):
    schedule = make_schedule(4)
    x0_pred, var = gen(b["x_t"], b["phonemes"], b["s"], b["t"], durations=b["durations"],
                       pitch=b["pitch"], energy=b["energy"])
    fake_prev = q_posterior(x0_pred, b["x_t"], b["t"], schedule).sample(b["noise"])
    real = disc(b["x_prev"], b["x_t"], b["t"], b["s"])
    fake = disc(fake_prev, b["x_t"], b["t"], b["s"])
    l_dur, l_pitch, l_energy = variance_loss(
        var.log_duration, var.pitch, var.energy, b["durations"], gen.normalize_pitch(b["pitch"]),
        gen.normalize_energy(b["energy"]))
    parts = {"adv": adversarial_loss(fake.score),
             "fm": feature_matching_loss([f.detach() for f in real.features], fake.features),
             "duration": l_dur, "pitch": l_pitch, "energy": l_energy,
             "mel": mel_reconstruction_loss(x0_pred, b["x0"])}
    return generator_total_loss(parts, weights)


def micro_discriminator_loss(gen, disc, b):
    with torch.no_grad():
        x0_pred, _ = gen(b["x_t"], b["phonemes"], b["s"], b["t"], durations=b["durations"],
                         pitch=b["pitch"], energy=b["energy"])
        fake_prev = q_posterior(x0_pred, b["x_t"], b["t"], make_schedule(4)).sample(b["noise"])
    real = disc(b["x_prev"], b["x_t"], b["t"], b["s"])
    fake = disc(fake_prev, b["x_t"], b["t"], b["s"])
    return discriminator_loss(real.score, fake.score)

"""Named random sub-streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch

STREAMS = ("corpus", "init", "training", "shuffle", "inference", "eval")


def derive_seed(seed: int, stream: str, *keys: int) -> int:
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode())] + [int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def torch_generator(seed: int, stream: str, *keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, stream, *keys))


def numpy_generator(seed: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stream, *keys))

"""Style prompt encoder: natural-language prompt to a 128-dim style embedding.

The default backbone is a small transformer text encoder. Any module with
the :class:`TextBackbone` call signature (token ids and mask in, CLS hidden
vector out) can be plugged in instead, e.g. a wrapper around a pretrained
model, together with its own tokenizer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .layers import MultiHeadSelfAttention, lengths_to_mask

STYLE_DIM = 128
PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
RESERVED = (PAD, CLS, UNK)
PAD_ID, CLS_ID, UNK_ID = 0, 1, 2

DEFAULT_FACTORS = (("gender", 2), ("pitch", 3), ("speed", 3), ("volume", 3), ("emotion", 5))

_STRIP = re.compile(r"^[^\w]+|[^\w]+$")


@dataclass(frozen=True)
class StyleFactorConfig:
    factors: tuple[tuple[str, int], ...] = DEFAULT_FACTORS

    def __post_init__(self):
        names = [n for n, _ in self.factors]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate style factor names: {names}")
        for name, k in self.factors:
            if int(k) < 2:
                raise ValueError(f"factor {name!r} needs at least 2 classes, got {k}")
        object.__setattr__(self, "factors", tuple((str(n), int(k)) for n, k in self.factors))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.factors]

    def num_classes(self, name: str) -> int:
        return dict(self.factors)[name]

    def validate_labels(self, labels: Mapping[str, int]) -> None:
        table = dict(self.factors)
        for name, idx in labels.items():
            if name not in table:
                raise ValueError(f"unknown style factor {name!r}")
            if not 0 <= int(idx) < table[name]:
                raise ValueError(f"label {idx} out of range for factor {name!r}")

    def to_list(self) -> list[list]:
        return [[n, k] for n, k in self.factors]


@dataclass
class StylePrompt:
    text: str
    labels: dict[str, int] = field(default_factory=dict)


class Vocab:
    """Closed word vocabulary with reserved PAD/CLS/UNK ids."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos = list(RESERVED) + sorted(set(words) - set(RESERVED))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        return cls(w for text in texts for w in split_words(text))

    def save(self, path) -> None:
        lines = [f"{w}\t{i}" for i, w in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                word, idx = line.rsplit("\t", 1)
                entries.append((int(idx), word))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))) or \
                tuple(w for _, w in entries[:3]) != RESERVED:
            raise ValueError(f"malformed vocabulary file {path}")
        return cls(w for _, w in entries[3:])


def split_words(text: str) -> list[str]:
    words = (_STRIP.sub("", w) for w in text.lower().split())
    return [w for w in words if w]


def tokenize_prompt(text: str, vocab: Vocab) -> list[int]:
    """``[CLS]`` followed by one id per lowercased word; unknown words map to UNK."""
    words = split_words(text)
    if not words:
        raise ValueError("style prompt is empty")
    return [CLS_ID] + [vocab[w] for w in words]


def pad_token_batch(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs])
    ids = torch.full((len(seqs), int(lengths.max())), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return ids, lengths_to_mask(lengths)


class TextBackbone(Protocol):
    hidden_size: int

    def __call__(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Return the hidden state at the CLS position, shape ``(batch, hidden_size)``."""


class _EncoderLayer(nn.Module):
    def __init__(self, hidden: int, n_heads: int, ffn: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadSelfAttention(hidden, n_heads, dropout)
        self.norm1 = nn.LayerNorm(hidden)
        self.ff = nn.Sequential(nn.Linear(hidden, ffn), nn.GELU(), nn.Linear(ffn, hidden))
        self.norm2 = nn.LayerNorm(hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = self.norm1(x + self.dropout(self.attn(x, mask)))
        return self.norm2(x + self.dropout(self.ff(x)))


class TransformerTextEncoder(nn.Module):
    """Small BERT-like encoder over word ids."""

    def __init__(self, vocab_size: int, hidden: int = 64, n_layers: int = 2, n_heads: int = 2,
                 ffn: int = 128, max_len: int = 64, dropout: float = 0.1):
        super().__init__()
        self.hidden_size = hidden
        self.max_len = max_len
        self.tok = nn.Embedding(vocab_size, hidden, padding_idx=PAD_ID)
        self.pos = nn.Embedding(max_len, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.layers = nn.ModuleList(_EncoderLayer(hidden, n_heads, ffn, dropout)
                                    for _ in range(n_layers))

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.max_len:
            raise ValueError(f"prompt of {ids.shape[1]} tokens exceeds max length {self.max_len}")
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.norm(self.tok(ids) + self.pos(pos)[None])
        for layer in self.layers:
            x = layer(x, mask)
        return x[:, 0]


class StyleEncoder(nn.Module):
    """Text backbone followed by a projection of the CLS state to ``style_dim``."""

    def __init__(self, backbone: nn.Module, style_dim: int = STYLE_DIM):
        super().__init__()
        self.backbone = backbone
        self.proj = nn.Linear(backbone.hidden_size, style_dim)
        self.style_dim = style_dim

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.proj(self.backbone(ids, mask))


def encode_style(tokens, encoder: StyleEncoder) -> torch.Tensor:
    """Embed one token sequence (list of ids) or a padded ``(ids, mask)`` batch."""
    if isinstance(tokens, tuple):
        ids, mask = tokens
        return encoder(ids, mask)
    if len(tokens) < 1:
        raise ValueError("token sequence must contain at least the CLS token")
    ids, mask = pad_token_batch([tokens])
    return encoder(ids, mask)[0]


class StyleHeads(nn.Module):
    """One linear classifier per style factor over the style embedding."""

    def __init__(self, cfg: StyleFactorConfig, style_dim: int = STYLE_DIM):
        super().__init__()
        self.cfg = cfg
        self.heads = nn.ModuleDict({name: nn.Linear(style_dim, k) for name, k in cfg.factors})

    def forward(self, s: torch.Tensor) -> dict[str, torch.Tensor]:
        return classify_style(s, self, self.cfg)


def classify_style(s: torch.Tensor, heads: StyleHeads,
                   cfg: StyleFactorConfig) -> dict[str, torch.Tensor]:
    if set(heads.heads.keys()) != set(cfg.names):
        raise ValueError(f"heads {sorted(heads.heads)} do not match factors {sorted(cfg.names)}")
    out = {}
    for name, k in cfg.factors:
        head = heads.heads[name]
        if head.out_features != k:
            raise ValueError(f"head {name!r} emits {head.out_features} logits, expected {k}")
        out[name] = head(s)
    return out


def style_classification_loss(logits: Mapping[str, torch.Tensor],
                              labels: Mapping[str, torch.Tensor | int]) -> torch.Tensor:
    """Sum over labeled factors of the mean cross-entropy.

    Label tensors may use ``-1`` for items missing that factor.
    """
    total = None
    for name in sorted(labels):
        if name not in logits:
            raise KeyError(f"no logits for labeled factor {name!r}")
        lg = logits[name]
        target = torch.as_tensor(labels[name], dtype=torch.long, device=lg.device)
        if lg.dim() == 1:
            lg, target = lg[None], target.reshape(1)
        if not bool((target >= 0).any()):
            continue
        term = F.cross_entropy(lg, target, ignore_index=-1)
        total = term if total is None else total + term
    if total is None:
        return next(iter(logits.values())).sum() * 0.0
    return total


def build_style_encoder(vocab_size: int, hidden: int = 64, n_layers: int = 2, n_heads: int = 2,
                        ffn: int = 128, max_len: int = 64, dropout: float = 0.1,
                        style_dim: int = STYLE_DIM,
                        backbone: Optional[nn.Module] = None) -> StyleEncoder:
    if backbone is None:
        backbone = TransformerTextEncoder(vocab_size, hidden, n_layers, n_heads, ffn,
                                          max_len, dropout)
    return StyleEncoder(backbone, style_dim)

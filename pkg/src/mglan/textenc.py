"""Tokenisation, vocabulary and the three-branch convolutional text encoder."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from mglan import autodiff as ad
from mglan.autodiff import Tensor
from mglan.errors import ConfigError, DataFormatError, DomainError

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
WINDOWS = (3, 4, 5)

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Iterable[str] = (), counts: dict[str, int] | None = None, min_count: int = 2):
        self.min_count = min_count
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.counts: dict[str, int] = {PAD_TOKEN: 0, UNK_TOKEN: 0}
        for tok in tokens:
            if tok not in self.counts:
                self.itos.append(tok)
                self.counts[tok] = (counts or {}).get(tok, 0)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 2) -> "Vocab":
        """Vocabulary of tokens seen at least ``min_count`` times, most frequent first."""
        counter = Counter(tok for text in texts for tok in tokenize(text))
        kept = sorted((t for t, c in counter.items() if c >= min_count), key=lambda t: (-counter[t], t))
        return cls(kept, dict(counter), min_count=min_count)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def digest(self) -> str:
        h = hashlib.sha256()
        for tok in self.itos:
            h.update(tok.encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok} {i} {self.counts.get(tok, 0)}\n")

    @classmethod
    def load(cls, path: str | Path, min_count: int = 2) -> "Vocab":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").rsplit(" ", 2)
                if len(parts) != 3:
                    raise DataFormatError(f"{path}: bad vocab line {line!r}")
                rows.append((parts[0], int(parts[1]), int(parts[2])))
        rows.sort(key=lambda r: r[1])
        if [r[1] for r in rows] != list(range(len(rows))) or rows[0][0] != PAD_TOKEN or rows[1][0] != UNK_TOKEN:
            raise DataFormatError(f"{path}: vocab indices must be dense with {PAD_TOKEN} and {UNK_TOKEN} first")
        return cls([r[0] for r in rows[2:]], {r[0]: r[2] for r in rows}, min_count=min_count)

    def to_dict(self) -> dict:
        return {"itos": self.itos, "counts": [self.counts.get(t, 0) for t in self.itos], "min_count": self.min_count}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["itos"][2:], dict(zip(d["itos"], d["counts"])), min_count=d["min_count"])


@dataclass(frozen=True)
class TokenSeq:
    indices: np.ndarray
    true_length: int


def tokenize_and_pad(text: str, vocab: Vocab, length: int) -> TokenSeq:
    """Keep the first ``length`` tokens and left-pad shorter texts with PAD."""
    if length < max(WINDOWS):
        raise DomainError(f"sequence length must be >= {max(WINDOWS)}, got {length}")
    ids = [vocab.index(tok) for tok in tokenize(text)][:length]
    out = np.full(length, PAD, dtype=np.int64)
    if ids:
        out[length - len(ids) :] = ids
    return TokenSeq(out, len(ids))


@dataclass
class TextEncoderParams:
    embedding: Tensor
    conv_weights: list[Tensor]
    conv_biases: list[Tensor]
    windows: tuple[int, ...] = WINDOWS

    @property
    def dim(self) -> int:
        return sum(b.shape[0] for b in self.conv_biases)

    @property
    def word_dim(self) -> int:
        return self.embedding.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.embedding, *self.conv_weights, *self.conv_biases]


def init_text_encoder(vocab_size: int, word_dim: int, dim: int, rng: np.random.Generator) -> TextEncoderParams:
    if dim % len(WINDOWS):
        raise ConfigError(f"text dimension {dim} must be divisible by {len(WINDOWS)}")
    table = rng.normal(0.0, 1.0 / np.sqrt(word_dim), size=(vocab_size, word_dim))
    table[PAD] = 0.0
    branch = dim // len(WINDOWS)
    weights = [ad.glorot(rng, (h * word_dim, branch), name=f"conv{h}.weight") for h in WINDOWS]
    biases = [ad.parameter(np.zeros(branch), name=f"conv{h}.bias") for h in WINDOWS]
    return TextEncoderParams(ad.parameter(table, "word_embedding"), weights, biases)


def encode_batch(indices: np.ndarray, params: TextEncoderParams) -> Tensor:
    """Encode an ``(N, L)`` index matrix into ``(N, d)`` text vectors.

    Each branch convolves windows of ``h`` word vectors, applies ReLU and
    max-pools over time; branch outputs are concatenated.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 2 or indices.shape[1] < max(params.windows):
        raise DomainError(f"expected (N, L>={max(params.windows)}) token ids, got {indices.shape}")
    words = ad.take(params.embedding, indices)
    # PAD positions stay exactly zero and leave the PAD row untouched
    words = words * (indices != PAD)[:, :, None].astype(np.float64)
    pooled = []
    for h, w, b in zip(params.windows, params.conv_weights, params.conv_biases):
        feats = ad.relu(ad.unfold1d(words, h) @ w + b)
        pooled.append(ad.tmax(feats, axis=1))
    return ad.concat(pooled, axis=1)


def encode_text(seq: TokenSeq, params: TextEncoderParams) -> Tensor:
    return ad.reshape(encode_batch(seq.indices[None, :], params), (params.dim,))

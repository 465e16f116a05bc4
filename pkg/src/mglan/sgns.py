"""Skip-gram with negative sampling over meta-path walks.

Each (center, context) pair drawn from a walk window contributes the
objective ``log s(x_c . y_o) + sum_n log s(-x_c . y_n)`` where ``x`` rows come
from the input matrix, ``y`` rows from the output matrix and ``s`` is the
logistic function. Negatives are drawn from the unigram^0.75 distribution
restricted to nodes of the same kind as the context node.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numba
import numpy as np

from mglan.errors import ConfigError, DataFormatError
from mglan.hetgraph import HetGraph, NodeKind, NodeRef
from mglan.metawalk import WalkConfig, WalkCorpus, generate_walks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SgnsConfig:
    dim: int = 256
    context_size: int = 7
    negatives: int = 3
    epochs: int = 5
    learning_rate: float = 0.025
    min_learning_rate: float = 1e-4
    rng_seed: int = 0
    # "sync" is single-threaded and deterministic; "hogwild" shares rows between threads without locks
    mode: str = "sync"
    chunk_walks: int = 4096

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.context_size < 1:
            raise ConfigError("context_size must be >= 1")
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.mode not in ("sync", "hogwild"):
            raise ConfigError(f"unknown training mode {self.mode!r}")


@dataclass
class EmbeddingMatrix:
    """Input-side node vectors plus the output matrix used during training.

    Rows follow the graph's global order: users first, then tweets.
    """

    input: np.ndarray
    output: np.ndarray
    user_count: int
    status: str = "ok"
    history: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.input.shape[0]

    @property
    def dim(self) -> int:
        return self.input.shape[1]

    @property
    def tweet_count(self) -> int:
        return self.n - self.user_count

    def row_of(self, v: NodeRef) -> int:
        return v.index if v.kind is NodeKind.USER else self.user_count + v.index

    def vector(self, v: NodeRef) -> np.ndarray:
        return self.input[self.row_of(v)]

    def tweet_vectors(self) -> np.ndarray:
        return self.input[self.user_count :]

    def token(self, row: int) -> str:
        return f"U{row}" if row < self.user_count else f"T{row - self.user_count}"

    def copy(self) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.input.copy(), self.output.copy(), self.user_count, self.status, list(self.history))

    # dumps -------------------------------------------------------------------
    def dump_text(self, path: str | Path) -> None:
        values = self.input.astype("<f4")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{self.n} {self.dim}\n")
            for row in range(self.n):
                fh.write(self.token(row))
                fh.write(" ")
                fh.write(" ".join(repr(float(x)) for x in values[row]))
                fh.write("\n")

    def dump_binary(self, path: str | Path) -> None:
        """Header of two little-endian int64 (n, d), then n*d little-endian f32."""
        with open(path, "wb") as fh:
            fh.write(np.array([self.n, self.dim], dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(self.input, dtype="<f4").tobytes())

    @classmethod
    def load_text(cls, path: str | Path) -> "EmbeddingMatrix":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise DataFormatError(f"{path}: expected 'n d' header")
            n, d = int(header[0]), int(header[1])
            values = np.zeros((n, d))
            users = 0
            for row in range(n):
                parts = fh.readline().split()
                if len(parts) != d + 1:
                    raise DataFormatError(f"{path}: row {row} has {len(parts) - 1} values, expected {d}")
                if parts[0].startswith("U"):
                    users += 1
                values[row] = [float(x) for x in parts[1:]]
        return cls(values, np.zeros_like(values), users)

    @classmethod
    def load_binary(cls, path: str | Path, user_count: int) -> "EmbeddingMatrix":
        raw = Path(path).read_bytes()
        n, d = np.frombuffer(raw[:16], dtype="<i8")
        values = np.frombuffer(raw[16:], dtype="<f4").astype(np.float64).reshape(int(n), int(d))
        return cls(values, np.zeros_like(values), user_count)


def normal_features(n: int, dim: int, user_count: int, seed: int = 0) -> EmbeddingMatrix:
    """Standard-normal node features, the no-structure ablation baseline."""
    rng = np.random.default_rng([seed, 0x6A7])
    values = rng.standard_normal((n, dim))
    return EmbeddingMatrix(values, np.zeros_like(values), user_count, status="normal")


def init_embeddings(n: int, dim: int, user_count: int, seed: int) -> EmbeddingMatrix:
    rng = np.random.default_rng([seed, 0x5E])
    values = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n, dim))
    return EmbeddingMatrix(values, np.zeros((n, dim)), user_count, status="untrained")


# pairs ------------------------------------------------------------------------
def extract_pairs(corpus: WalkCorpus, context_size: int) -> Iterator[tuple[NodeRef, NodeRef]]:
    """Every (center, context) pair with ``0 < |i - j| <= context_size``."""
    for walk in corpus:
        refs = [corpus.to_ref(x) for x in walk]
        for i, center in enumerate(refs):
            for j in range(max(0, i - context_size), min(len(refs), i + context_size + 1)):
                if j != i:
                    yield center, refs[j]


def pair_arrays(tokens: np.ndarray, lengths: np.ndarray, context_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`extract_pairs` over global indices, same order."""
    rows, width = tokens.shape
    offsets = np.array([o for o in range(-context_size, context_size + 1) if o != 0])
    pos = np.arange(width)
    partner = pos[:, None] + offsets[None, :]
    valid = (partner >= 0) & (partner < lengths[:, None, None]) & (pos[None, :, None] < lengths[:, None, None])
    partner_c = np.clip(partner, 0, width - 1)
    centers = np.broadcast_to(tokens[:, :, None], valid.shape)
    contexts = tokens[:, partner_c]
    return centers[valid], contexts[valid]


# single step reference ----------------------------------------------------------
def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def sgns_objective(x: np.ndarray, y_pos: np.ndarray, y_neg: np.ndarray) -> float:
    """Pair objective to be maximised; ``y_neg`` has one row per negative."""
    return float(_log_sigmoid(x @ y_pos) + _log_sigmoid(-(y_neg @ x)).sum())


def sgns_gradients(x: np.ndarray, y_pos: np.ndarray, y_neg: np.ndarray):
    """Gradients of :func:`sgns_objective` wrt ``x``, ``y_pos`` and ``y_neg``."""
    g_pos = 1.0 - _sigmoid(x @ y_pos)
    g_neg = -_sigmoid(y_neg @ x)
    dx = g_pos * y_pos + g_neg @ y_neg
    return dx, g_pos * x, g_neg[:, None] * x[None, :]


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


def sgns_step(emb: EmbeddingMatrix, center: NodeRef, context: NodeRef, negatives: Sequence[NodeRef], lr: float) -> EmbeddingMatrix:
    """One gradient-ascent step on a single pair; updates ``emb`` in place."""
    c = emb.row_of(center)
    o = emb.row_of(context)
    negs = np.array([emb.row_of(v) for v in negatives], dtype=np.int64)
    x = emb.input[c].copy()
    dx, dy_pos, dy_neg = sgns_gradients(x, emb.output[o], emb.output[negs])
    emb.output[o] += lr * dy_pos
    np.add.at(emb.output, negs, lr * dy_neg)
    emb.input[c] += lr * dx
    return emb


@numba.njit(cache=True, nogil=True)
def _sgns_kernel(win, wout, centers, contexts, negs, lr0, lr_min, offset, total):
    d = win.shape[1]
    k = negs.shape[1]
    targets = np.empty(k + 1, dtype=np.int64)
    grads = np.empty(k + 1)
    neu = np.empty(d)
    loss = 0.0
    for p in range(centers.shape[0]):
        lr = lr0 - (lr0 - lr_min) * (offset + p) / total
        c = centers[p]
        targets[0] = contexts[p]
        for t in range(k):
            targets[t + 1] = negs[p, t]
        for t in range(k + 1):
            o = targets[t]
            dot = 0.0
            for j in range(d):
                dot += win[c, j] * wout[o, j]
            if t == 0:
                # log s(z) = -log1p(exp(-z)), stable for either sign
                if dot >= 0:
                    loss += math.log1p(math.exp(-dot))
                    sig = 1.0 / (1.0 + math.exp(-dot))
                else:
                    loss += -dot + math.log1p(math.exp(dot))
                    e = math.exp(dot)
                    sig = e / (1.0 + e)
                grads[t] = (1.0 - sig) * lr
            else:
                if dot >= 0:
                    loss += dot + math.log1p(math.exp(-dot))
                    sig = 1.0 / (1.0 + math.exp(-dot))
                else:
                    loss += math.log1p(math.exp(dot))
                    e = math.exp(dot)
                    sig = e / (1.0 + e)
                grads[t] = -sig * lr
        for j in range(d):
            neu[j] = 0.0
        for t in range(k + 1):
            o = targets[t]
            for j in range(d):
                neu[j] += grads[t] * wout[o, j]
        for t in range(k + 1):
            o = targets[t]
            for j in range(d):
                wout[o, j] += grads[t] * win[c, j]
        for j in range(d):
            win[c, j] += neu[j]
    return loss


class NegativeSampler:
    """Per-kind unigram^0.75 sampler over corpus token frequencies."""

    def __init__(self, corpus: WalkCorpus, n_nodes: int, power: float = 0.75):
        counts = np.bincount(corpus.tokens[corpus.tokens >= 0], minlength=n_nodes).astype(np.float64)
        self.user_count = corpus.user_count
        self._tables = {}
        for kind, lo, hi in ((NodeKind.USER, 0, corpus.user_count), (NodeKind.TWEET, corpus.user_count, n_nodes)):
            w = counts[lo:hi] ** power
            total = w.sum()
            if total > 0:
                self._tables[kind] = (lo, np.cumsum(w) / total)

    def probabilities(self, kind: NodeKind) -> np.ndarray:
        lo, cdf = self._tables[kind]
        return np.diff(np.concatenate([[0.0], cdf]))

    def sample(self, contexts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((len(contexts), k), dtype=np.int64)
        is_user = contexts < self.user_count
        for kind, mask in ((NodeKind.USER, is_user), (NodeKind.TWEET, ~is_user)):
            m = int(mask.sum())
            if m == 0:
                continue
            lo, cdf = self._tables[kind]
            u = rng.random((m, k))
            idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
            out[mask] = lo + idx
        return out


def _count_pairs(lengths: np.ndarray, c: int) -> int:
    total = 0
    for n in np.unique(lengths):
        n = int(n)
        per = sum(min(n - 1, i + c) - max(0, i - c) for i in range(n))
        total += per * int((lengths == n).sum())
    return total


def train_on_corpus(
    corpus: WalkCorpus,
    n_nodes: int,
    cfg: SgnsConfig,
    threads: int = 1,
) -> EmbeddingMatrix:
    emb = init_embeddings(n_nodes, cfg.dim, corpus.user_count, cfg.rng_seed)
    total = _count_pairs(corpus.lengths, cfg.context_size) * cfg.epochs
    if cfg.epochs == 0:
        return emb
    if total == 0:
        warnings.warn("walk corpus yields no training pairs; returning initial embeddings", RuntimeWarning)
        emb.status = "empty_corpus"
        return emb

    sampler = NegativeSampler(corpus, n_nodes)
    rng = np.random.default_rng([cfg.rng_seed, 0x9E6])
    seen = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        epoch_pairs = 0
        for lo in range(0, len(corpus), cfg.chunk_walks):
            hi = lo + cfg.chunk_walks
            centers, contexts = pair_arrays(corpus.tokens[lo:hi], corpus.lengths[lo:hi], cfg.context_size)
            if len(centers) == 0:
                continue
            negs = sampler.sample(contexts, cfg.negatives, rng)
            if cfg.mode == "hogwild" and threads > 1:
                bounds = np.linspace(0, len(centers), threads + 1).astype(np.int64)
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    parts = pool.map(
                        lambda ab: _sgns_kernel(
                            emb.input, emb.output,
                            centers[ab[0]:ab[1]], contexts[ab[0]:ab[1]], negs[ab[0]:ab[1]],
                            cfg.learning_rate, cfg.min_learning_rate, seen + ab[0], total,
                        ),
                        list(zip(bounds[:-1], bounds[1:])),
                    )
                    epoch_loss += sum(parts)
            else:
                epoch_loss += _sgns_kernel(
                    emb.input, emb.output, centers, contexts, negs,
                    cfg.learning_rate, cfg.min_learning_rate, seen, total,
                )
            seen += len(centers)
            epoch_pairs += len(centers)
        emb.history.append(epoch_loss / max(epoch_pairs, 1))
        log.debug("sgns epoch %d mean loss %.5f", epoch, emb.history[-1])
    if not np.all(np.isfinite(emb.input)):
        raise FloatingPointError("non-finite values in trained embeddings")
    emb.status = "ok"
    return emb


def train_embeddings(
    g: HetGraph,
    walk_cfg: WalkConfig,
    cfg: SgnsConfig,
    threads: int = 1,
) -> EmbeddingMatrix:
    """Walk the graph, then fit skip-gram embeddings; returns the input matrix side."""
    corpus = generate_walks(g, walk_cfg, threads=threads)
    return train_on_corpus(corpus, g.node_count, cfg, threads=threads)

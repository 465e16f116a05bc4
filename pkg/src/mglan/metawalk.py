"""Meta-path constrained, edge-weighted random walks.

At every step a walk moves to a neighbour of the kind the meta path asks
for next, chosen with probability proportional to the spread-edge weight.
Neighbours of any other kind, and non-neighbours, are never chosen. Walks
that reach a node without a suitable neighbour stop early.

Sampling uses one Vose alias table per node, so each step costs O(1).
Random streams are derived per start node from ``(seed, global node index)``
which keeps the corpus identical whatever the thread count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numba
import numpy as np

from mglan.errors import ConfigError
from mglan.hetgraph import (
    DEFAULT_META_PATH,
    HetGraph,
    MetaPathSchema,
    NodeKind,
    NodeRef,
)


@dataclass(frozen=True)
class WalkConfig:
    walk_length: int = 100
    walks_per_node: int = 5
    pattern: MetaPathSchema = DEFAULT_META_PATH
    rng_seed: int = 0
    # None means every kind that appears in the pattern
    start_kinds: Optional[tuple[NodeKind, ...]] = None

    def __post_init__(self) -> None:
        if self.walk_length < 2:
            raise ConfigError("walk_length must be >= 2")
        if self.walks_per_node < 1:
            raise ConfigError("walks_per_node must be >= 1")


@dataclass
class WalkCorpus:
    """Walks stored as rows of global node indices padded with -1."""

    tokens: np.ndarray
    lengths: np.ndarray
    user_count: int
    start_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.lengths)

    def walk(self, i: int) -> np.ndarray:
        return self.tokens[i, : self.lengths[i]]

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(len(self)):
            yield self.walk(i)

    def to_ref(self, g_index: int) -> NodeRef:
        if g_index < self.user_count:
            return NodeRef(NodeKind.USER, int(g_index))
        return NodeRef(NodeKind.TWEET, int(g_index - self.user_count))

    @property
    def walks(self) -> list[list[NodeRef]]:
        return [[self.to_ref(x) for x in w] for w in self]

    @property
    def token_count(self) -> int:
        return int(self.lengths.sum())

    def dump(self, path: str | Path) -> None:
        """One walk per line, space separated ``U<idx>``/``T<idx>`` tokens."""
        with open(path, "w", encoding="utf-8") as fh:
            for w in self:
                fh.write(" ".join(self.to_ref(x).token for x in w))
                fh.write("\n")

    @classmethod
    def load(cls, path: str | Path, user_count: int) -> "WalkCorpus":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                refs = [NodeRef.from_token(tok) for tok in line.split()]
                rows.append([r.index if r.kind is NodeKind.USER else r.index + user_count for r in refs])
        return cls.from_lists(rows, user_count)

    @classmethod
    def from_lists(cls, rows: Sequence[Sequence[int]], user_count: int) -> "WalkCorpus":
        width = max((len(r) for r in rows), default=1)
        tokens = np.full((len(rows), width), -1, dtype=np.int64)
        for i, r in enumerate(rows):
            tokens[i, : len(r)] = r
        lengths = np.array([len(r) for r in rows], dtype=np.int64)
        return cls(tokens, lengths, user_count)


def transition_distribution(g: HetGraph, v: NodeRef, next_kind: NodeKind) -> list[tuple[NodeRef, float]]:
    """Exact next-step distribution from ``v`` towards nodes of ``next_kind``."""
    g.validate(v)
    if next_kind is v.kind:
        return []
    idx, w = g.neighbor_arrays(v)
    if len(idx) == 0:
        return []
    p = w / w.sum()
    return [(NodeRef(next_kind, int(i)), float(x)) for i, x in zip(idx, p)]


@numba.njit(cache=True)
def _alias_tables(indptr, weights):
    n_edges = weights.shape[0]
    prob = np.ones(n_edges)
    alias = np.zeros(n_edges, dtype=np.int64)
    for node in range(indptr.shape[0] - 1):
        lo = indptr[node]
        hi = indptr[node + 1]
        k = hi - lo
        if k == 0:
            continue
        total = 0.0
        for j in range(lo, hi):
            total += weights[j]
        scaled = np.empty(k)
        for j in range(k):
            scaled[j] = weights[lo + j] * k / total
            alias[lo + j] = j
        small = np.empty(k, dtype=np.int64)
        large = np.empty(k, dtype=np.int64)
        ns = 0
        nl = 0
        for j in range(k):
            if scaled[j] < 1.0:
                small[ns] = j
                ns += 1
            else:
                large[nl] = j
                nl += 1
        while ns > 0 and nl > 0:
            ns -= 1
            s = small[ns]
            nl -= 1
            l = large[nl]
            prob[lo + s] = scaled[s]
            alias[lo + s] = l
            scaled[l] = (scaled[l] + scaled[s]) - 1.0
            if scaled[l] < 1.0:
                small[ns] = l
                ns += 1
            else:
                large[nl] = l
                nl += 1
        # leftovers are 1 up to rounding
        while nl > 0:
            nl -= 1
            prob[lo + large[nl]] = 1.0
        while ns > 0:
            ns -= 1
            prob[lo + small[ns]] = 1.0
    return prob, alias


@numba.njit(cache=True)
def _alias_draw(lo, k, prob, alias, u):
    x = u * k
    i = int(x)
    if i >= k:
        i = k - 1
    if x - i < prob[lo + i]:
        return i
    return alias[lo + i]


@numba.njit(cache=True, nogil=True)
def _walk_kernel(
    starts, uniforms, out, lengths, row0, user_count,
    u_indptr, u_nbr, u_prob, u_alias,
    t_indptr, t_nbr, t_prob, t_alias,
):
    walks_per_node = uniforms.shape[1]
    steps = uniforms.shape[2]
    for s in range(starts.shape[0]):
        start = starts[s]
        for w in range(walks_per_node):
            row = row0 + s * walks_per_node + w
            cur = start
            out[row, 0] = cur
            n = 1
            for step in range(steps):
                if cur < user_count:
                    lo = u_indptr[cur]
                    k = u_indptr[cur + 1] - lo
                    if k == 0:
                        break
                    j = _alias_draw(lo, k, u_prob, u_alias, uniforms[s, w, step])
                    cur = u_nbr[lo + j] + user_count
                else:
                    t = cur - user_count
                    lo = t_indptr[t]
                    k = t_indptr[t + 1] - lo
                    if k == 0:
                        break
                    j = _alias_draw(lo, k, t_prob, t_alias, uniforms[s, w, step])
                    cur = t_nbr[lo + j]
                out[row, n] = cur
                n += 1
            lengths[row] = n


class WalkSampler:
    """Alias-table sampler bound to one graph; cheap to reuse across seeds."""

    def __init__(self, g: HetGraph):
        self.g = g
        self._tables = {}
        for kind in NodeKind:
            indptr, nbr, w = g.csr(kind)
            prob, alias = _alias_tables(indptr, w)
            self._tables[kind] = (indptr, nbr, prob, alias)

    def step_from(self, v: NodeRef, uniforms: np.ndarray) -> np.ndarray:
        """Sample one next node per uniform (indices of the other kind)."""
        indptr, nbr, prob, alias = self._tables[v.kind]
        lo, hi = indptr[v.index], indptr[v.index + 1]
        k = hi - lo
        if k == 0:
            return np.zeros(0, dtype=np.int64)
        x = np.asarray(uniforms) * k
        i = np.minimum(x.astype(np.int64), k - 1)
        take = (x - i) < prob[lo + i]
        j = np.where(take, i, alias[lo + i])
        return nbr[lo + j]

    def generate(self, cfg: WalkConfig, threads: int = 1) -> WalkCorpus:
        g = self.g
        cfg.pattern.validate(g.schema)
        start_kinds = cfg.start_kinds or tuple(dict.fromkeys(cfg.pattern.pattern))
        for kind in start_kinds:
            if kind not in cfg.pattern.pattern:
                raise ConfigError(f"start kind {kind.value} does not occur in meta path {cfg.pattern}")
        starts = np.concatenate(
            [
                np.arange(g.user_count, dtype=np.int64) if NodeKind.USER in start_kinds else np.zeros(0, np.int64),
                np.arange(g.user_count, g.node_count, dtype=np.int64)
                if NodeKind.TWEET in start_kinds
                else np.zeros(0, np.int64),
            ]
        )
        wpn = cfg.walks_per_node
        n_walks = len(starts) * wpn
        out = np.full((n_walks, cfg.walk_length), -1, dtype=np.int64)
        lengths = np.zeros(n_walks, dtype=np.int64)
        ut = self._tables[NodeKind.USER]
        tt = self._tables[NodeKind.TWEET]

        def run(chunk: np.ndarray, row0: int) -> None:
            uniforms = np.empty((len(chunk), wpn, cfg.walk_length - 1))
            for s, node in enumerate(chunk):
                rng = np.random.default_rng([cfg.rng_seed & 0xFFFFFFFFFFFFFFFF, int(node)])
                uniforms[s] = rng.random((wpn, cfg.walk_length - 1))
            _walk_kernel(chunk, uniforms, out, lengths, row0, g.user_count, *ut, *tt)

        chunk_size = 512
        jobs = [(starts[i : i + chunk_size], i * wpn) for i in range(0, len(starts), chunk_size)]
        if threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(lambda job: run(*job), jobs))
        else:
            for job in jobs:
                run(*job)
        return WalkCorpus(out, lengths, g.user_count, np.repeat(starts, wpn))


def generate_walks(g: HetGraph, cfg: WalkConfig, threads: int = 1) -> WalkCorpus:
    return WalkSampler(g).generate(cfg, threads=threads)

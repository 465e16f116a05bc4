"""Heterogeneous user/tweet propagation graph.

The graph is bipartite: users *spread* tweets and tweets *are spread by*
users. Nodes are addressed by a :class:`NodeRef` holding a kind and a dense
per-kind index. For flat matrices (embeddings, GAT inputs) users occupy the
global rows ``[0, user_count)`` and tweets ``[user_count, user_count + tweet_count)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Hashable, Iterable, Sequence

import numpy as np

from mglan.errors import ConfigError, DomainError


class NodeKind(str, Enum):
    USER = "U"
    TWEET = "T"

    @property
    def other(self) -> "NodeKind":
        return NodeKind.TWEET if self is NodeKind.USER else NodeKind.USER


@dataclass(frozen=True, order=True)
class NodeRef:
    kind: NodeKind
    index: int

    @property
    def token(self) -> str:
        return f"{self.kind.value}{self.index}"

    @classmethod
    def from_token(cls, token: str) -> "NodeRef":
        try:
            return cls(NodeKind(token[0]), int(token[1:]))
        except (ValueError, IndexError):
            raise DomainError(f"malformed node token {token!r}") from None

    def __repr__(self) -> str:
        return self.token


def User(index: int) -> NodeRef:
    return NodeRef(NodeKind.USER, index)


def Tweet(index: int) -> NodeRef:
    return NodeRef(NodeKind.TWEET, index)


@dataclass(frozen=True)
class SpreadEdge:
    user: NodeRef
    tweet: NodeRef
    delay_minutes: float
    weight: float


def edge_weight(delay_minutes: float) -> float:
    """Time-decay weight of a spread edge, favouring early diffusers.

    Returns ``1 / (max(0, t) + 1)`` for a delay of ``t`` minutes.
    """
    t = float(delay_minutes)
    if not math.isfinite(t):
        raise DomainError(f"delay must be finite, got {delay_minutes!r}")
    return 1.0 / (max(0.0, t) + 1.0)


SPREAD_SCHEMA = frozenset({(NodeKind.USER, NodeKind.TWEET), (NodeKind.TWEET, NodeKind.USER)})


@dataclass(frozen=True)
class MetaPathSchema:
    """Cyclic pattern of node kinds a walk must follow."""

    pattern: tuple[NodeKind, ...]

    def __post_init__(self) -> None:
        pattern = tuple(NodeKind(k) for k in self.pattern)
        object.__setattr__(self, "pattern", pattern)
        if len(pattern) < 2:
            raise ConfigError("meta path pattern needs at least two kinds")

    @classmethod
    def parse(cls, text: str) -> "MetaPathSchema":
        """Parse ``"U-T"`` / ``"UT"`` / ``"T-U-T"`` style strings."""
        kinds = [c for c in text.replace("-", "").replace(" ", "").upper()]
        try:
            return cls(tuple(NodeKind(k) for k in kinds))
        except ValueError:
            raise ConfigError(f"unknown node kind in meta path {text!r}") from None

    def __str__(self) -> str:
        return "-".join(k.value for k in self.pattern)

    def validate(self, schema: Iterable[tuple[NodeKind, NodeKind]]) -> None:
        relations = set(schema)
        n = len(self.pattern)
        for i, kind in enumerate(self.pattern):
            nxt = self.pattern[(i + 1) % n]
            if (kind, nxt) not in relations:
                raise ConfigError(
                    f"meta path {self} uses relation {kind.value}->{nxt.value} absent from the graph schema"
                )

    def start_position(self, kind: NodeKind) -> int:
        return self.pattern.index(kind)

    def kind_at(self, position: int) -> NodeKind:
        return self.pattern[position % len(self.pattern)]


DEFAULT_META_PATH = MetaPathSchema((NodeKind.USER, NodeKind.TWEET))


class HetGraph:
    """Immutable bipartite spread graph with per-node sorted adjacency.

    Adjacency is held in CSR form per kind; ``_indptr[kind]``,
    ``_nbr[kind]`` and ``_w[kind]`` give the other-kind neighbours of each
    node of ``kind``, sorted by neighbour index.
    """

    schema = SPREAD_SCHEMA

    def __init__(
        self,
        user_ids: Sequence[Hashable],
        tweet_ids: Sequence[Hashable],
        edge_users: np.ndarray,
        edge_tweets: np.ndarray,
        edge_delays: np.ndarray,
    ):
        self.user_ids = tuple(user_ids)
        self.tweet_ids = tuple(tweet_ids)
        self._user_lookup = {uid: i for i, uid in enumerate(self.user_ids)}
        self._tweet_lookup = {tid: i for i, tid in enumerate(self.tweet_ids)}

        order = np.lexsort((edge_tweets, edge_users))
        self.edge_users = np.asarray(edge_users, dtype=np.int64)[order]
        self.edge_tweets = np.asarray(edge_tweets, dtype=np.int64)[order]
        self.edge_delays = np.asarray(edge_delays, dtype=np.float64)[order]
        self.edge_weights = 1.0 / (np.maximum(0.0, self.edge_delays) + 1.0)
        for arr in (self.edge_users, self.edge_tweets, self.edge_delays, self.edge_weights):
            arr.setflags(write=False)

        self._indptr: dict[NodeKind, np.ndarray] = {}
        self._nbr: dict[NodeKind, np.ndarray] = {}
        self._w: dict[NodeKind, np.ndarray] = {}
        for kind, own, other, n in (
            (NodeKind.USER, self.edge_users, self.edge_tweets, self.user_count),
            (NodeKind.TWEET, self.edge_tweets, self.edge_users, self.tweet_count),
        ):
            perm = np.lexsort((other, own))
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(own, minlength=n), out=indptr[1:])
            nbr = other[perm]
            w = self.edge_weights[perm]
            for arr in (indptr, nbr, w):
                arr.setflags(write=False)
            self._indptr[kind], self._nbr[kind], self._w[kind] = indptr, nbr, w

    # sizes -----------------------------------------------------------------
    @property
    def user_count(self) -> int:
        return len(self.user_ids)

    @property
    def tweet_count(self) -> int:
        return len(self.tweet_ids)

    @property
    def node_count(self) -> int:
        return self.user_count + self.tweet_count

    @property
    def edge_count(self) -> int:
        return len(self.edge_users)

    def count(self, kind: NodeKind) -> int:
        return self.user_count if kind is NodeKind.USER else self.tweet_count

    def kinds(self) -> set[NodeKind]:
        return {k for k in NodeKind if self.count(k) > 0}

    # addressing ------------------------------------------------------------
    def validate(self, v: NodeRef) -> None:
        if not isinstance(v, NodeRef) or not 0 <= v.index < self.count(v.kind):
            raise DomainError(f"{v!r} is not a node of this graph")

    def global_index(self, v: NodeRef) -> int:
        return v.index if v.kind is NodeKind.USER else self.user_count + v.index

    def node_at(self, global_index: int) -> NodeRef:
        if not 0 <= global_index < self.node_count:
            raise DomainError(f"global index {global_index} out of range")
        if global_index < self.user_count:
            return User(global_index)
        return Tweet(global_index - self.user_count)

    def user(self, uid: Hashable) -> NodeRef:
        return User(self._user_lookup[uid])

    def tweet(self, tid: Hashable) -> NodeRef:
        return Tweet(self._tweet_lookup[tid])

    def id_of(self, v: NodeRef) -> Hashable:
        self.validate(v)
        return self.user_ids[v.index] if v.kind is NodeKind.USER else self.tweet_ids[v.index]

    # adjacency -------------------------------------------------------------
    def neighbor_arrays(self, v: NodeRef) -> tuple[np.ndarray, np.ndarray]:
        """Indices (of the other kind) and weights of ``v``'s neighbours."""
        self.validate(v)
        lo, hi = self._indptr[v.kind][v.index], self._indptr[v.kind][v.index + 1]
        return self._nbr[v.kind][lo:hi], self._w[v.kind][lo:hi]

    def neighbors(self, v: NodeRef) -> list[tuple[NodeRef, float]]:
        idx, w = self.neighbor_arrays(v)
        other = v.kind.other
        return [(NodeRef(other, int(i)), float(x)) for i, x in zip(idx, w)]

    def degree(self, v: NodeRef) -> int:
        self.validate(v)
        return int(self._indptr[v.kind][v.index + 1] - self._indptr[v.kind][v.index])

    def csr(self, kind: NodeKind) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._indptr[kind], self._nbr[kind], self._w[kind]

    def edges(self) -> list[SpreadEdge]:
        return [
            SpreadEdge(User(int(u)), Tweet(int(t)), float(d), float(w))
            for u, t, d, w in zip(self.edge_users, self.edge_tweets, self.edge_delays, self.edge_weights)
        ]

    def edge_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Both directions of every edge as (src, dst, weight) over global rows."""
        u = self.edge_users
        t = self.edge_tweets + self.user_count
        src = np.concatenate([u, t])
        dst = np.concatenate([t, u])
        w = np.concatenate([self.edge_weights, self.edge_weights])
        return src, dst, w

    def edge_multiset(self) -> list[tuple[Hashable, Hashable, float]]:
        return sorted(
            (
                (self.user_ids[u], self.tweet_ids[t], float(w))
                for u, t, w in zip(self.edge_users, self.edge_tweets, self.edge_weights)
            ),
            key=repr,
        )

    def __repr__(self) -> str:
        return f"HetGraph(users={self.user_count}, tweets={self.tweet_count}, edges={self.edge_count})"


def neighbors_of_kind(g: HetGraph, v: NodeRef, kind: NodeKind) -> list[tuple[NodeRef, float]]:
    g.validate(v)
    if kind is v.kind:
        return []
    return g.neighbors(v)


def build_graph(
    edges: Iterable[tuple[Hashable, Hashable, float]],
    *,
    users: Iterable[Hashable] = (),
    tweets: Iterable[Hashable] = (),
) -> HetGraph:
    """Build a graph from ``(user_id, tweet_id, delay_minutes)`` triples.

    ``users`` and ``tweets`` pre-register nodes (in order) so that isolated
    nodes exist and indices are predictable; remaining ids are numbered in
    first-seen order. Repeated (user, tweet) pairs keep the smallest delay.
    """
    user_lookup: dict[Hashable, int] = {}
    tweet_lookup: dict[Hashable, int] = {}
    for uid in users:
        user_lookup.setdefault(uid, len(user_lookup))
    for tid in tweets:
        tweet_lookup.setdefault(tid, len(tweet_lookup))

    best: dict[tuple[int, int], float] = {}
    for uid, tid, delay in edges:
        d = float(delay)
        edge_weight(d)
        u = user_lookup.setdefault(uid, len(user_lookup))
        t = tweet_lookup.setdefault(tid, len(tweet_lookup))
        key = (u, t)
        if key not in best or d < best[key]:
            best[key] = d

    clash = user_lookup.keys() & tweet_lookup.keys()
    if clash:
        sample = ", ".join(repr(x) for x in sorted(clash, key=repr)[:5])
        raise DomainError(f"ids used both as user and tweet: {sample}")

    if best:
        pairs = np.array(list(best.keys()), dtype=np.int64)
        delays = np.array(list(best.values()), dtype=np.float64)
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
        delays = np.zeros(0, dtype=np.float64)
    return HetGraph(list(user_lookup), list(tweet_lookup), pairs[:, 0], pairs[:, 1], delays)

from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from conftest import random_bipartite
from mglan.errors import ConfigError
from mglan.hetgraph import MetaPathSchema, NodeKind, Tweet, User, build_graph
from mglan.metawalk import WalkConfig, WalkCorpus, WalkSampler, generate_walks, transition_distribution


def assert_disciplined(g, corpus, pattern):
    """Every step alternates kinds along the pattern and follows an existing edge."""
    for start, walk in zip(corpus.start_nodes, corpus):
        refs = [g.node_at(int(x)) for x in walk]
        assert g.global_index(refs[0]) == start
        pos = pattern.start_position(refs[0].kind)
        for i, (a, b) in enumerate(zip(refs, refs[1:])):
            assert b.kind is pattern.kind_at(pos + i + 1)
            assert b in {n for n, _ in g.neighbors(a)}
        # a walk only stops early at a dead end
        if len(refs) < corpus.tokens.shape[1]:
            assert g.degree(refs[-1]) == 0


def test_transition_distribution_is_normalised(toy_graph):
    dist = dict(transition_distribution(toy_graph, User(0), NodeKind.TWEET))
    assert sum(dist.values()) == pytest.approx(1.0)
    assert dist[Tweet(0)] == pytest.approx(60 / 61)
    assert transition_distribution(toy_graph, User(0), NodeKind.USER) == []
    assert transition_distribution(toy_graph, Tweet(2), NodeKind.USER) == []


def test_sampler_frequencies_match_distribution(rng):
    g = random_bipartite(rng, 30, 0.4)
    sampler = WalkSampler(g)
    for v in [User(i) for i in range(g.user_count)][:5]:
        dist = dict(transition_distribution(g, v, NodeKind.TWEET))
        if not dist:
            continue
        draws = sampler.step_from(v, rng.random(20000))
        freq = Counter(draws.tolist())
        for t, p in dist.items():
            assert abs(freq.get(t.index, 0) / 20000 - p) < 0.02
        assert set(freq) <= {t.index for t in dist}


def test_walks_follow_discipline(rng):
    for _ in range(5):
        g = random_bipartite(rng, 40, 0.2)
        cfg = WalkConfig(walk_length=12, walks_per_node=3, rng_seed=int(rng.integers(1 << 30)))
        corpus = generate_walks(g, cfg)
        assert len(corpus) == 3 * g.node_count
        assert_disciplined(g, corpus, cfg.pattern)


def test_isolated_start_yields_single_node_walk(toy_graph):
    corpus = generate_walks(toy_graph, WalkConfig(walk_length=5, walks_per_node=2))
    isolated = toy_graph.global_index(Tweet(2))
    rows = np.flatnonzero(corpus.start_nodes == isolated)
    assert len(rows) == 2
    assert all(corpus.lengths[r] == 1 for r in rows)


def test_start_kinds_and_longer_pattern(toy_graph):
    cfg = WalkConfig(walk_length=7, walks_per_node=1, pattern=MetaPathSchema.parse("T-U"), start_kinds=(NodeKind.TWEET,))
    corpus = generate_walks(toy_graph, cfg)
    assert len(corpus) == toy_graph.tweet_count
    assert all(toy_graph.node_at(int(w[0])).kind is NodeKind.TWEET for w in corpus)
    with pytest.raises(ConfigError):
        generate_walks(toy_graph, WalkConfig(pattern=MetaPathSchema.parse("U-U")))


def test_walks_are_seeded_and_thread_independent(rng):
    g = random_bipartite(rng, 50, 0.3)
    cfg = WalkConfig(walk_length=20, walks_per_node=2, rng_seed=9)
    a = generate_walks(g, cfg)
    b = generate_walks(g, cfg, threads=3)
    c = generate_walks(g, WalkConfig(walk_length=20, walks_per_node=2, rng_seed=10))
    assert np.array_equal(a.tokens, b.tokens)
    assert not np.array_equal(a.tokens, c.tokens)


def test_corpus_round_trip(tmp_path, toy_graph):
    corpus = generate_walks(toy_graph, WalkConfig(walk_length=6, walks_per_node=2, rng_seed=4))
    corpus.dump(tmp_path / "walks.txt")
    back = WalkCorpus.load(tmp_path / "walks.txt", toy_graph.user_count)
    assert [list(w) for w in back] == [list(w) for w in corpus]
    assert back.walks[0][0] == corpus.walks[0][0]
    assert (tmp_path / "walks.txt").read_text().split("\n")[0].split()[0] in {"U0", "U1", "U2"}


def test_invalid_walk_config():
    with pytest.raises(ConfigError):
        WalkConfig(walk_length=1)
    with pytest.raises(ConfigError):
        WalkConfig(walks_per_node=0)


def test_empty_graph_gives_empty_corpus():
    g = build_graph([])
    corpus = generate_walks(g, WalkConfig(walk_length=4))
    assert len(corpus) == 0

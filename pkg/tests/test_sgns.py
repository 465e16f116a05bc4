from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_bipartite
from mglan.errors import ConfigError
from mglan.hetgraph import NodeKind, Tweet, User, build_graph
from mglan.metawalk import WalkConfig, WalkCorpus, generate_walks
from mglan.sgns import (
    EmbeddingMatrix,
    NegativeSampler,
    SgnsConfig,
    _sgns_kernel,
    extract_pairs,
    init_embeddings,
    normal_features,
    pair_arrays,
    sgns_gradients,
    sgns_objective,
    sgns_step,
    train_embeddings,
    train_on_corpus,
)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def test_sgns_gradients_match_finite_differences(rng):
    x, y, neg = rng.normal(size=6), rng.normal(size=6), rng.normal(size=(3, 6))
    dx, dy, dneg = sgns_gradients(x, y, neg)
    f = lambda: sgns_objective(x, y, neg)
    for analytic, var in ((dx, x), (dy, y), (dneg, neg)):
        num = numeric_grad(f, var)
        rel = np.abs(analytic - num) / np.maximum(1e-8, np.abs(analytic) + np.abs(num))
        assert rel.max() < 1e-6


def test_kernel_matches_reference_step(rng):
    emb = init_embeddings(7, 5, 3, seed=1)
    emb.output[:] = rng.normal(scale=0.3, size=emb.output.shape)
    ref = emb.copy()
    # a repeated negative exercises accumulation into the same output row
    negatives = [Tweet(1), Tweet(3), Tweet(1)]
    sgns_step(ref, User(0), Tweet(0), negatives, lr=0.05)
    rows = np.array([[emb.row_of(v) for v in negatives]])
    _sgns_kernel(emb.input, emb.output, np.array([0]), np.array([3]), rows, 0.05, 0.05, 0, 1)
    assert np.allclose(emb.input, ref.input, atol=1e-12)
    assert np.allclose(emb.output, ref.output, atol=1e-12)


def test_step_improves_objective(rng):
    emb = init_embeddings(4, 8, 2, seed=0)
    emb.output[:] = rng.normal(scale=0.5, size=emb.output.shape)
    before = sgns_objective(emb.input[0], emb.output[2], emb.output[[3]])
    sgns_step(emb, User(0), Tweet(0), [Tweet(1)], lr=0.01)
    after = sgns_objective(emb.input[0], emb.output[2], emb.output[[3]])
    assert after > before


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.integers(0, 9), min_size=1, max_size=9), min_size=1, max_size=6), st.integers(1, 4))
def test_pair_arrays_match_reference(rows, c):
    corpus = WalkCorpus.from_lists(rows, user_count=5)
    centers, contexts = pair_arrays(corpus.tokens, corpus.lengths, c)
    ref = [(corpus.to_ref(a), corpus.to_ref(b)) for a, b in zip(centers, contexts)]
    assert ref == list(extract_pairs(corpus, c))
    assert all(x >= 0 for x in centers) and all(x >= 0 for x in contexts)


def test_negative_sampler_respects_kind(rng):
    corpus = WalkCorpus.from_lists([[0, 3, 1, 4, 0, 3, 0, 3]], user_count=3)
    sampler = NegativeSampler(corpus, n_nodes=6)
    p_user = sampler.probabilities(NodeKind.USER)
    counts = np.array([3, 1, 0], dtype=float) ** 0.75
    assert np.allclose(p_user, counts / counts.sum())
    contexts = np.array([0, 3] * 2000)
    negs = sampler.sample(contexts, 3, rng)
    assert np.all(negs[contexts < 3] < 3)
    assert np.all(negs[contexts >= 3] >= 3)
    # a node never seen in the corpus is never drawn
    assert not np.any(negs == 2) and not np.any(negs == 5)


def test_training_is_deterministic_and_lowers_loss(rng):
    g = random_bipartite(rng, 40, 0.3)
    wcfg = WalkConfig(walk_length=20, walks_per_node=3, rng_seed=2)
    cfg = SgnsConfig(dim=16, epochs=4, rng_seed=2)
    a = train_embeddings(g, wcfg, cfg)
    b = train_embeddings(g, wcfg, cfg)
    assert np.array_equal(a.input, b.input)
    assert a.history[-1] < a.history[0]
    assert a.input.shape == (g.node_count, 16) and a.status == "ok"


def test_planted_cliques_separate():
    edges = [(f"a{u}", f"x{t}", 0.0) for u in range(8) for t in range(8)]
    edges += [(f"b{u}", f"y{t}", 0.0) for u in range(8) for t in range(8)]
    g = build_graph(edges)
    emb = train_embeddings(g, WalkConfig(walk_length=30, walks_per_node=5), SgnsConfig(dim=16, epochs=5))
    x = emb.tweet_vectors()
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    sim = x @ x.T
    group = np.array([0] * 8 + [1] * 8)
    same = group[:, None] == group[None, :]
    off = ~np.eye(16, dtype=bool)
    assert sim[same & off].mean() > sim[~same].mean()


def test_zero_epochs_and_empty_corpus():
    corpus = WalkCorpus.from_lists([[0], [1]], user_count=1)
    init = train_on_corpus(corpus, 2, SgnsConfig(dim=4, epochs=0))
    assert np.array_equal(init.input, init_embeddings(2, 4, 1, 0).input)
    with pytest.warns(RuntimeWarning):
        emb = train_on_corpus(corpus, 2, SgnsConfig(dim=4, epochs=2))
    assert emb.status == "empty_corpus"


def test_hogwild_mode_runs(rng):
    g = random_bipartite(rng, 30, 0.4)
    emb = train_embeddings(g, WalkConfig(walk_length=10), SgnsConfig(dim=8, epochs=2, mode="hogwild"), threads=2)
    assert np.all(np.isfinite(emb.input))


def test_dumps_round_trip(tmp_path):
    emb = normal_features(5, 3, 2, seed=4)
    emb.dump_text(tmp_path / "e.txt")
    emb.dump_binary(tmp_path / "e.bin")
    lines = (tmp_path / "e.txt").read_text().splitlines()
    assert lines[0] == "5 3"
    assert [l.split()[0] for l in lines[1:]] == ["U0", "U1", "T0", "T1", "T2"]
    f32 = emb.input.astype(np.float32).astype(np.float64)
    t = EmbeddingMatrix.load_text(tmp_path / "e.txt")
    b = EmbeddingMatrix.load_binary(tmp_path / "e.bin", 2)
    assert t.user_count == 2
    assert np.array_equal(t.input, f32) and np.array_equal(b.input, f32)


def test_normal_features_are_seeded():
    a, b = normal_features(4, 3, 1, seed=1), normal_features(4, 3, 1, seed=1)
    assert np.array_equal(a.input, b.input)
    assert not np.array_equal(a.input, normal_features(4, 3, 1, seed=2).input)


@pytest.mark.parametrize("kwargs", [{"dim": 0}, {"context_size": 0}, {"negatives": 0}, {"learning_rate": 0}, {"mode": "async"}])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        SgnsConfig(**kwargs)

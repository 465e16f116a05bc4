from __future__ import annotations

import math

import numpy as np
import pytest

from mglan.dataio import SyntheticSpec, generate_synthetic, to_graph
from mglan.errors import DomainError
from mglan.evalkit import (
    DetectionPipeline,
    compute_metrics,
    early_detection_sweep,
    export_embeddings,
    knn_agreement,
    linear_probe_accuracy,
    principal_components,
    read_exported,
    read_metrics_csv,
    write_metrics_csv,
    write_sweep_csv,
)
from mglan.metawalk import WalkConfig
from mglan.model import ModelConfig
from mglan.sgns import SgnsConfig, normal_features


def test_metrics_on_known_confusion():
    golds = [0, 0, 1, 1, 2, 2]
    preds = [0, 1, 1, 1, 0, 0]
    m = compute_metrics(preds, golds, ("A", "B", "C"))
    assert m.accuracy == pytest.approx(0.5)
    assert m.confusion.tolist() == [[1, 1, 0], [0, 2, 0], [2, 0, 0]]
    assert m.f1["A"] == pytest.approx(2 * (1 / 3) * 0.5 / (1 / 3 + 0.5))
    assert m.f1["B"] == pytest.approx(0.8)
    assert m.f1["C"] == 0.0
    assert m.support == {"A": 2, "B": 2, "C": 2}


def test_metrics_errors():
    with pytest.raises(DomainError):
        compute_metrics([0, 1], [0], 2)
    with pytest.raises(DomainError):
        compute_metrics([], [], 2)
    with pytest.raises(DomainError):
        compute_metrics([3], [0], 2)


def test_metrics_csv_format(tmp_path):
    m = compute_metrics([0, 1], [0, 0], ("NR", "FR"))
    write_metrics_csv([(0.0, m), (60.0, m), (math.inf, m)], tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "deadline_minutes,accuracy,f1_NR,f1_FR"
    assert [l.split(",")[0] for l in lines[1:]] == ["0", "60", "inf"]
    assert read_metrics_csv(tmp_path / "m.csv")[2]["accuracy"] == "0.500000"


def test_export_round_trip_with_pca(tmp_path):
    es = generate_synthetic(SyntheticSpec(events_per_class=3, users=30, seed=1))
    g = to_graph(es)
    X = normal_features(g.node_count, 4, g.user_count, seed=2)
    export_embeddings(X, es, tmp_path / "e.tsv", pca=True)
    header = (tmp_path / "e.tsv").read_text().splitlines()[0].split("\t")
    assert header == ["eid", "label", "f1", "f2", "f3", "f4", "pc1", "pc2"]
    eids, labels, values, pcs = read_exported(tmp_path / "e.tsv")
    assert eids == [e.eid for e in es.events] and labels == [e.label for e in es.events]
    assert np.allclose(values, X.tweet_vectors().astype(np.float32))
    assert np.allclose(pcs.mean(axis=0), 0.0, atol=1e-6)
    with pytest.raises(DomainError):
        export_embeddings(normal_features(5, 4, 1), es, tmp_path / "x.tsv")


def test_principal_components_capture_main_axis(rng):
    x = np.outer(rng.normal(size=50), [3.0, 4.0]) + rng.normal(scale=0.01, size=(50, 2))
    pc = principal_components(x)
    assert np.var(pc[:, 0]) > 100 * np.var(pc[:, 1])


def test_separability_helpers(rng):
    labels = np.repeat([0, 1], 20)
    centres = np.array([[6.0, 0, 0, 0, 0], [0, 6.0, 0, 0, 0]])
    x = rng.normal(size=(40, 5)) + centres[labels]
    assert knn_agreement(x, labels) == 1.0
    assert linear_probe_accuracy(x, labels) == 1.0
    noise = rng.normal(size=(40, 5))
    assert knn_agreement(noise, labels) < 0.9


def test_early_detection_sweep_small():
    es = generate_synthetic(SyntheticSpec(events_per_class=4, users=50, seed=8))
    pipe = DetectionPipeline(
        WalkConfig(walk_length=10, walks_per_node=2),
        SgnsConfig(dim=8, epochs=1),
        ModelConfig(seq_len=6, word_dim=8, text_dim=12, heads=2, feature_dim=8, global_dim=6, gat_heads=2, epochs=2, min_count=1),
    )
    rows = early_detection_sweep(pipe, es, [0, 30, math.inf])
    assert [r.deadline for r in rows] == [0, 30, math.inf]
    edges = [r.edge_count for r in rows]
    assert edges == sorted(edges)
    # at deadline inf the sweep scores exactly what plain evaluation scores
    assert rows[-1].metrics.accuracy == pipe.score(es).accuracy
    with pytest.raises(DomainError):
        early_detection_sweep(pipe, es, [60, 0])
    retrained = early_detection_sweep(pipe, es, [0, math.inf], retrain=True)
    assert len(retrained) == 2

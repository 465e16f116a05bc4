"""Metrics, the early-detection sweep and embedding export."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mglan.dataio import EventSet, to_graph
from mglan.errors import DomainError
from mglan.metawalk import WalkConfig
from mglan.model import MglanModel, ModelConfig, evaluate, train
from mglan.sgns import EmbeddingMatrix, SgnsConfig, normal_features, train_embeddings

log = logging.getLogger(__name__)

DEFAULT_DEADLINES = (0.0, 60.0, 120.0, 240.0, 480.0, 1440.0, math.inf)


@dataclass
class Metrics:
    accuracy: float
    f1: dict[str, float]
    confusion: np.ndarray
    classes: tuple[str, ...]

    @property
    def support(self) -> dict[str, int]:
        return {c: int(n) for c, n in zip(self.classes, self.confusion.sum(axis=1))}

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": dict(self.f1),
            "confusion": self.confusion.tolist(),
            "classes": list(self.classes),
        }


def compute_metrics(preds: Sequence[int], golds: Sequence[int], classes: Sequence[str] | int) -> Metrics:
    """Accuracy, per-class F1 and the confusion matrix (rows = gold, columns = predicted).

    A class whose precision and recall are both zero gets F1 = 0.
    """
    preds = np.asarray(preds, dtype=np.int64)
    golds = np.asarray(golds, dtype=np.int64)
    if preds.shape != golds.shape:
        raise DomainError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if preds.size == 0:
        raise DomainError("cannot score an empty prediction list")
    names = tuple(str(i) for i in range(classes)) if isinstance(classes, int) else tuple(classes)
    k = len(names)
    if preds.min() < 0 or golds.min() < 0 or max(preds.max(), golds.max()) >= k:
        raise DomainError(f"class index outside [0, {k})")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (golds, preds), 1)
    f1 = {}
    for i, name in enumerate(names):
        tp = confusion[i, i]
        predicted = confusion[:, i].sum()
        actual = confusion[i, :].sum()
        p = tp / predicted if predicted else 0.0
        r = tp / actual if actual else 0.0
        f1[name] = float(2 * p * r / (p + r)) if p + r > 0 else 0.0
    return Metrics(float(np.trace(confusion) / confusion.sum()), f1, confusion, names)


# pipeline --------------------------------------------------------------------------------
@dataclass
class DetectionPipeline:
    """Embedding plus classifier configuration, optionally with a trained model."""

    walk: WalkConfig = field(default_factory=WalkConfig)
    sgns: SgnsConfig = field(default_factory=SgnsConfig)
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    features: str = "metapath"  # or "normal" for the structure-free ablation
    threads: int = 1
    model: Optional[MglanModel] = None

    def embed(self, events: EventSet) -> EmbeddingMatrix:
        g = to_graph(events)
        if self.features == "normal":
            return normal_features(g.node_count, self.sgns.dim, g.user_count, self.sgns.rng_seed)
        return train_embeddings(g, self.walk, self.sgns, threads=self.threads)

    def fit(self, events: EventSet, features: Optional[EmbeddingMatrix] = None):
        g = to_graph(events)
        features = features if features is not None else self.embed(events)
        result = train(events, g, features, self.model_cfg)
        self.model = result.model
        return result

    def score(self, events: EventSet, features: Optional[EmbeddingMatrix] = None, split: Optional[str] = "test") -> Metrics:
        if self.model is None:
            raise DomainError("pipeline has no trained model")
        g = to_graph(events)
        features = features if features is not None else self.embed(events)
        preds, golds = evaluate(self.model, events, g, features, split)
        return compute_metrics(preds, golds, events.classes)


@dataclass
class SweepRow:
    deadline: float
    metrics: Metrics
    edge_count: int
    reply_count: int
    user_count: int


def early_detection_sweep(
    pipeline: DetectionPipeline,
    events: EventSet,
    deadlines: Sequence[float] = DEFAULT_DEADLINES,
    retrain: bool = False,
    split: str = "test",
) -> list[SweepRow]:
    """Score the pipeline with propagation cut off at each deadline (minutes).

    The graph, reply sets and node embeddings are rebuilt from the records
    that happened before the deadline. By default the classifier is the one
    already fitted on complete data; ``retrain`` fits a new one per deadline.
    """
    deadlines = [float(d) for d in deadlines]
    if deadlines != sorted(deadlines):
        raise DomainError("deadlines must be sorted ascending")
    if pipeline.model is None and not retrain:
        pipeline.fit(events)
    rows = []
    for d in deadlines:
        cut = events.restrict(d)
        g = to_graph(cut)
        features = pipeline.embed(cut)
        if retrain:
            pipeline.fit(cut, features)
        metrics = pipeline.score(cut, features, split)
        rows.append(SweepRow(d, metrics, g.edge_count, sum(len(e.replies) for e in cut.events), g.user_count))
        log.info("deadline %s: accuracy %.3f edges %d", d, metrics.accuracy, g.edge_count)
    for a, b in zip(rows, rows[1:]):
        if b.edge_count < a.edge_count or b.reply_count < a.reply_count:
            raise AssertionError("propagation data shrank as the deadline grew")
    return rows


def format_deadline(d: float) -> str:
    return "inf" if math.isinf(d) else f"{d:g}"


def write_metrics_csv(rows: Sequence[tuple[float, Metrics]], path: str | Path) -> None:
    """``deadline_minutes,accuracy,f1_<class>...`` with one row per deadline."""
    classes = rows[0][1].classes if rows else ()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["deadline_minutes", "accuracy"] + [f"f1_{c}" for c in classes])
        for d, m in rows:
            w.writerow([format_deadline(d), f"{m.accuracy:.6f}"] + [f"{m.f1[c]:.6f}" for c in classes])


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    write_metrics_csv([(r.deadline, r.metrics) for r in rows], path)


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# embedding export ----------------------------------------------------------------------------
def principal_components(values: np.ndarray, k: int = 2) -> np.ndarray:
    centred = values - values.mean(axis=0, keepdims=True)
    if centred.shape[0] < 2:
        return np.zeros((centred.shape[0], k))
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    proj = centred @ vt[:k].T
    if proj.shape[1] < k:
        proj = np.pad(proj, ((0, 0), (0, k - proj.shape[1])))
    return proj - proj.mean(axis=0, keepdims=True)


def export_embeddings(X: EmbeddingMatrix, events: EventSet, path: str | Path, pca: bool = False) -> None:
    """Write one TSV row per event: ``eid, label, f1..fd`` (plus ``pc1, pc2``)."""
    if X.tweet_count != len(events):
        raise DomainError(f"embedding has {X.tweet_count} tweet rows for {len(events)} events")
    rows = X.tweet_vectors()
    extra = principal_components(rows) if pca else None
    header = ["eid", "label"] + [f"f{i + 1}" for i in range(X.dim)] + (["pc1", "pc2"] if pca else [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for i, e in enumerate(events.events):
            vals = [repr(float(v)) for v in rows[i]]
            if extra is not None:
                vals += [repr(float(v)) for v in extra[i]]
            w.writerow([e.eid, e.label] + vals)


def read_exported(path: str | Path) -> tuple[list[str], list[str], np.ndarray, Optional[np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        r = csv.reader(fh, delimiter="\t")
        header = next(r)
        rows = list(r)
    has_pca = header[-2:] == ["pc1", "pc2"]
    eids = [row[0] for row in rows]
    labels = [row[1] for row in rows]
    values = np.array([[float(x) for x in row[2:]] for row in rows]).reshape(len(rows), -1)
    if has_pca:
        return eids, labels, values[:, :-2], values[:, -2:]
    return eids, labels, values, None


# separability checks ---------------------------------------------------------------------------
def knn_agreement(features: np.ndarray, labels: Sequence) -> float:
    """Leave-one-out 1-nearest-neighbour label agreement (cosine distance)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms > 0, norms, 1.0)
    sim = x @ x.T
    np.fill_diagonal(sim, -np.inf)
    nearest = np.argmax(sim, axis=1)
    return float(np.mean(y[nearest] == y))


def linear_probe_accuracy(features: np.ndarray, labels: Sequence, folds: int = 5, seed: int = 0) -> float:
    """Cross-validated accuracy of a logistic-regression probe."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedKFold, cross_val_score
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return float(np.mean(cross_val_score(probe, np.asarray(features), np.asarray(labels), cv=cv)))

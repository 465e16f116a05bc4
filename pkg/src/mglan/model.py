"""The rumour classifier: local text attention, global graph attention, softmax head.

For a batch of events the forward pass

1. encodes source and reply texts with the CNN text encoder,
2. runs multi-head self attention over each event's replies, mean-pools the
   result and merges it with the source through a second (cross) attention,
3. runs two graph attention layers over the user/tweet graph, starting from
   the frozen node embeddings, and reads off each event's tweet row,
4. concatenates the local and global vectors and applies a linear softmax
   classifier trained with cross entropy.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from mglan import autodiff as ad
from mglan.autodiff import MASK_VALUE, Tensor
from mglan.dataio import FOUR_CLASS, EventSet
from mglan.errors import ConfigError, DataFormatError, ShapeError
from mglan.hetgraph import HetGraph
from mglan.textenc import TextEncoderParams, Vocab, encode_batch, init_text_encoder, tokenize_and_pad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MGLANCK1"


@dataclass
class ModelConfig:
    classes: tuple[str, ...] = FOUR_CLASS
    seq_len: int = 35
    word_dim: int = 300
    text_dim: int = 300
    heads: int = 6
    feature_dim: int = 256
    global_dim: int = 300
    gat_heads: int = 8
    max_replies: int = 50
    # "verbatim": key = source, query = value = pooled replies; "conventional": query = source, key = value = replies
    cross_attention: str = "verbatim"
    gat_edge_bias: bool = False
    # "frozen": node embeddings are fixed inputs; "joint": they are fine-tuned by the classifier loss
    embeddings: str = "frozen"
    optimizer: str = "sgd"
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 30
    min_count: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        self.classes = tuple(self.classes)
        if self.text_dim % self.heads:
            raise ConfigError(f"text_dim {self.text_dim} not divisible by {self.heads} heads")
        if self.text_dim % 3:
            raise ConfigError(f"text_dim {self.text_dim} not divisible by 3")
        if self.cross_attention not in ("verbatim", "conventional"):
            raise ConfigError(f"unknown cross attention mode {self.cross_attention!r}")
        if self.embeddings not in ("frozen", "joint"):
            raise ConfigError(f"unknown embedding mode {self.embeddings!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# attention ----------------------------------------------------------------------------
@dataclass
class MultiHeadAttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bv: Tensor
    bo: Tensor
    heads: int

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator, prefix: str) -> "MultiHeadAttentionParams":
        mats = {n: ad.glorot(rng, (dim, dim), name=f"{prefix}.{n}") for n in ("wq", "wk", "wv", "wo")}
        # no key bias: it adds a per-query constant to every score, which softmax cancels
        biases = {n: ad.parameter(np.zeros(dim), name=f"{prefix}.{n}") for n in ("bq", "bv", "bo")}
        return cls(**mats, **biases, heads=heads)

    def parameters(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.bq, self.bv, self.bo]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    p: MultiHeadAttentionParams,
    key_mask: Optional[np.ndarray] = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``p.heads`` heads.

    ``query`` is ``(B, Tq, d)``; ``key``/``value`` are ``(B, Tk, d)``.
    ``key_mask`` marks valid keys with True. Returns the ``(B, Tq, d)``
    output and the ``(B, heads, Tq, Tk)`` attention weights.
    """
    if key.shape != value.shape[:2] + key.shape[2:] or key.shape[:2] != value.shape[:2]:
        raise ShapeError(f"attention: key {key.shape} and value {value.shape} disagree")
    b, tq, d = query.shape
    q = _split_heads(query @ p.wq + p.bq, p.heads)
    k = _split_heads(key @ p.wk, p.heads)
    v = _split_heads(value @ p.wv + p.bv, p.heads)
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d // p.heads))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_VALUE)[:, None, None, :]
        scores = scores + bias
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (b, tq, d))
    return ctx @ p.wo + p.bo, weights


@dataclass
class LocalEncoderParams:
    self_attn: MultiHeadAttentionParams
    cross_attn: MultiHeadAttentionParams
    mode: str = "verbatim"

    def parameters(self) -> list[Tensor]:
        return self.self_attn.parameters() + self.cross_attn.parameters()


def encode_local_batch(source: Tensor, replies: Tensor, reply_mask: np.ndarray, params: LocalEncoderParams) -> Tensor:
    """Fuse each source vector ``(B, d)`` with its padded replies ``(B, R, d)``.

    Events without replies pass their source vector through unchanged.
    """
    reply_mask = np.asarray(reply_mask, dtype=bool)
    if replies.shape[1] == 0:
        return source
    b, r, d = replies.shape
    counts = reply_mask.sum(axis=1)
    attended, _ = multi_head_attention(replies, replies, replies, params.self_attn, reply_mask)
    valid = reply_mask[:, :, None].astype(np.float64)
    pooled = ad.tsum(attended * valid, axis=1) * (1.0 / np.maximum(counts, 1))[:, None]
    src = ad.reshape(source, (b, 1, d))
    pooled3 = ad.reshape(pooled, (b, 1, d))
    if params.mode == "verbatim":
        fused, _ = multi_head_attention(pooled3, src, pooled3, params.cross_attn)
    else:
        fused, _ = multi_head_attention(src, attended, attended, params.cross_attn, reply_mask)
    fused = ad.reshape(fused, (b, d))
    has = (counts > 0).astype(np.float64)[:, None]
    return fused * has + source * (1.0 - has)


def encode_local(source_vec: Tensor, reply_vecs: Tensor, params: LocalEncoderParams) -> Tensor:
    """Single-event form of :func:`encode_local_batch`."""
    d = source_vec.shape[-1]
    r = reply_vecs.shape[0] if reply_vecs.ndim == 2 else 0
    src = ad.reshape(source_vec, (1, d))
    reps = ad.reshape(reply_vecs, (1, r, d)) if r else Tensor(np.zeros((1, 0, d)))
    return ad.reshape(encode_local_batch(src, reps, np.ones((1, r), dtype=bool), params), (d,))


# graph attention ------------------------------------------------------------------------
@dataclass
class GatLayerParams:
    weight: Tensor
    att_src: Tensor
    att_dst: Tensor
    bias: Tensor
    heads: int
    slope: float = 0.2

    @classmethod
    def init(cls, d_in: int, d_out: int, heads: int, rng: np.random.Generator, prefix: str) -> "GatLayerParams":
        return cls(
            ad.glorot(rng, (d_in, heads * d_out), name=f"{prefix}.weight"),
            ad.glorot(rng, (heads, d_out), name=f"{prefix}.att_src"),
            ad.glorot(rng, (heads, d_out), name=f"{prefix}.att_dst"),
            ad.parameter(np.zeros(d_out), name=f"{prefix}.bias"),
            heads,
        )

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.bias.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.att_src, self.att_dst, self.bias]


def gat_layer(
    x: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    dst_rows: np.ndarray,
    p: GatLayerParams,
    log_weight: Optional[np.ndarray] = None,
) -> tuple[Tensor, Tensor]:
    """One graph attention layer with heads averaged.

    ``x`` holds input rows; edge ``e`` sends row ``src[e]`` to output node
    ``dst[e]`` whose own input row is ``dst_rows[dst[e]]``. Returns the
    ``(len(dst_rows), d_out)`` output and the ``(E, heads)`` coefficients.
    """
    if x.shape[1] != p.d_in:
        raise ShapeError(f"GAT input width {x.shape[1]} does not match weight {p.weight.shape}")
    m = x.shape[0]
    n_dst = len(dst_rows)
    h = ad.reshape(x @ p.weight, (m, p.heads, p.d_out))
    s_src = ad.tsum(h * p.att_src, axis=-1)
    s_dst = ad.tsum(h * p.att_dst, axis=-1)
    scores = ad.leaky_relu(ad.take(s_src, src) + ad.take(s_dst, dst_rows[dst]), p.slope)
    if log_weight is not None:
        scores = scores + log_weight[:, None]
    alpha = ad.segment_softmax(scores, dst, n_dst)
    msg = ad.take(h, src) * ad.reshape(alpha, alpha.shape + (1,))
    agg = ad.segment_sum(msg, dst, n_dst)
    return ad.mean(agg, axis=1) + p.bias, alpha


class GraphIndex:
    """Incoming-edge lists (with self loops) over global node rows."""

    def __init__(self, g: HetGraph):
        self.n = g.node_count
        self.user_count = g.user_count
        src, dst, w = g.edge_index()
        loops = np.arange(self.n, dtype=np.int64)
        src = np.concatenate([src, loops])
        dst = np.concatenate([dst, loops])
        w = np.concatenate([w, np.ones(self.n)])
        order = np.lexsort((src, dst))
        self.src, self.dst, self.weight = src[order], dst[order], w[order]
        self.indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.dst, minlength=self.n), out=self.indptr[1:])

    def incoming(self, nodes: np.ndarray) -> np.ndarray:
        """Positions (into the edge arrays) of all edges ending at ``nodes``."""
        if len(nodes) == 0:
            return np.zeros(0, dtype=np.int64)
        lo, hi = self.indptr[nodes], self.indptr[nodes + 1]
        return np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)])


@dataclass
class GlobalEncoderParams:
    gat1: GatLayerParams
    gat2: GatLayerParams
    edge_bias: bool = False

    def parameters(self) -> list[Tensor]:
        return self.gat1.parameters() + self.gat2.parameters()


def _local_ids(universe: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.searchsorted(universe, values)


def encode_global(
    features: Tensor,
    graph: GraphIndex | HetGraph,
    params: GlobalEncoderParams,
    targets: Optional[np.ndarray] = None,
) -> Tensor:
    """Two GAT layers over the graph; rows for ``targets`` (default: every node).

    Only the two-hop neighbourhood of ``targets`` is evaluated, which gives the
    same rows as a full pass.
    """
    gi = graph if isinstance(graph, GraphIndex) else GraphIndex(graph)
    if features.shape[0] != gi.n:
        raise ShapeError(f"feature rows {features.shape[0]} != graph nodes {gi.n}")
    if features.shape[1] != params.gat1.d_in:
        raise ShapeError(f"feature width {features.shape[1]} != GAT input {params.gat1.d_in}")
    targets = np.arange(gi.n, dtype=np.int64) if targets is None else np.asarray(targets, dtype=np.int64)

    tgt_unique = np.unique(targets)
    e2 = gi.incoming(tgt_unique)
    hop1 = np.unique(np.concatenate([tgt_unique, gi.src[e2]]))
    e1 = gi.incoming(hop1)
    hop2 = np.unique(np.concatenate([hop1, gi.src[e1]]))

    x = features if len(hop2) == gi.n else ad.take(features, hop2)
    bias1 = np.log(gi.weight[e1]) if params.edge_bias else None
    h1, _ = gat_layer(
        x, _local_ids(hop2, gi.src[e1]), _local_ids(hop1, gi.dst[e1]), _local_ids(hop2, hop1), params.gat1, bias1
    )
    h1 = ad.elu(h1)
    bias2 = np.log(gi.weight[e2]) if params.edge_bias else None
    h2, _ = gat_layer(
        h1, _local_ids(hop1, gi.src[e2]), _local_ids(tgt_unique, gi.dst[e2]), _local_ids(hop1, tgt_unique), params.gat2, bias2
    )
    return ad.take(h2, _local_ids(tgt_unique, targets))


def gat_attention(features: Tensor, graph: GraphIndex | HetGraph, p: GatLayerParams, edge_bias: bool = False):
    """Edge list and coefficients of one layer over all nodes (for inspection)."""
    gi = graph if isinstance(graph, GraphIndex) else GraphIndex(graph)
    rows = np.arange(gi.n)
    _, alpha = gat_layer(features, gi.src, gi.dst, rows, p, np.log(gi.weight) if edge_bias else None)
    return gi.src, gi.dst, alpha.data


# classification ------------------------------------------------------------------------------
@dataclass
class Prediction:
    probabilities: np.ndarray
    label: int
    logits: Optional[Tensor] = None


def classify(m_local: Tensor, m_global: Tensor, weight: Tensor, bias: Tensor) -> Prediction:
    """Softmax over ``weight^T [m_local, m_global] + bias``; ties go to the lowest class."""
    joint = ad.concat([ad.reshape(m_local, (1, -1)), ad.reshape(m_global, (1, -1))], axis=1)
    if joint.shape[1] != weight.shape[0]:
        raise ShapeError(f"classifier input width {joint.shape[1]} != weight {weight.shape}")
    logits = joint @ weight + bias
    probs = ad.softmax(logits, axis=1).data[0]
    return Prediction(probs, int(np.argmax(probs)), logits)


def loss(pred: Prediction, label: int) -> Tensor:
    """Cross entropy ``-log p[label]`` computed stably from the logits."""
    return ad.cross_entropy(pred.logits, [label])


# the model --------------------------------------------------------------------------------------
@dataclass
class PreparedEvents:
    sources: np.ndarray
    replies: list[np.ndarray]
    labels: np.ndarray


class MglanModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng([cfg.seed, 0x3A1])
        self.cfg = cfg
        self.vocab = vocab
        self.text = init_text_encoder(len(vocab), cfg.word_dim, cfg.text_dim, rng)
        self.local = LocalEncoderParams(
            MultiHeadAttentionParams.init(cfg.text_dim, cfg.heads, rng, "self_attn"),
            MultiHeadAttentionParams.init(cfg.text_dim, cfg.heads, rng, "cross_attn"),
            cfg.cross_attention,
        )
        self.glob = GlobalEncoderParams(
            GatLayerParams.init(cfg.feature_dim, cfg.global_dim, cfg.gat_heads, rng, "gat1"),
            GatLayerParams.init(cfg.global_dim, cfg.global_dim, 1, rng, "gat2"),
            cfg.gat_edge_bias,
        )
        width = cfg.text_dim + cfg.global_dim
        self.cls_weight = ad.glorot(rng, (width, len(cfg.classes)), name="classifier.weight")
        self.cls_bias = ad.parameter(np.zeros(len(cfg.classes)), name="classifier.bias")
        # trainable node-feature table, only in joint mode
        self.node_features: Optional[Tensor] = None

    def attach_features(self, values: np.ndarray) -> Tensor:
        self.node_features = ad.parameter(np.array(values, dtype=np.float64), name="node_features")
        return self.node_features

    # parameters -------------------------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("text.embedding", self.text.embedding)]
        for h, w, b in zip(self.text.windows, self.text.conv_weights, self.text.conv_biases):
            out += [(f"text.conv{h}.weight", w), (f"text.conv{h}.bias", b)]
        for prefix, p in (("self_attn", self.local.self_attn), ("cross_attn", self.local.cross_attn)):
            out += [(f"{prefix}.{n}", getattr(p, n)) for n in ("wq", "wk", "wv", "wo", "bq", "bv", "bo")]
        for prefix, p in (("gat1", self.glob.gat1), ("gat2", self.glob.gat2)):
            out += [(f"{prefix}.{n}", getattr(p, n)) for n in ("weight", "att_src", "att_dst", "bias")]
        out += [("classifier.weight", self.cls_weight), ("classifier.bias", self.cls_bias)]
        if self.node_features is not None:
            out.append(("node_features", self.node_features))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.named_parameters():
            if state[n].shape != t.shape:
                raise ShapeError(f"parameter {n}: checkpoint shape {state[n].shape} != model {t.shape}")
            t.data = np.array(state[n], dtype=np.float64)

    # data ---------------------------------------------------------------------------------------
    def prepare(self, events: EventSet) -> PreparedEvents:
        L = self.cfg.seq_len
        sources = np.stack([tokenize_and_pad(e.text, self.vocab, L).indices for e in events.events]) if len(events) else np.zeros((0, L), np.int64)
        replies = []
        for e in events.events:
            kept = sorted(e.replies, key=lambda r: r.delay)[: self.cfg.max_replies]
            rows = [tokenize_and_pad(r.text, self.vocab, L).indices for r in kept]
            replies.append(np.stack(rows) if rows else np.zeros((0, L), dtype=np.int64))
        labels = np.array([events.label_index(e) for e in events.events], dtype=np.int64)
        return PreparedEvents(sources, replies, labels)

    # forward ------------------------------------------------------------------------------------
    def logits(self, batch: np.ndarray, data: PreparedEvents, features: Tensor, graph: GraphIndex) -> Tensor:
        batch = np.asarray(batch, dtype=np.int64)
        b = len(batch)
        d = self.cfg.text_dim
        counts = np.array([len(data.replies[i]) for i in batch])
        rmax = int(counts.max()) if b else 0
        texts = [data.sources[batch]] + [data.replies[i] for i in batch if len(data.replies[i])]
        encoded = encode_batch(np.concatenate(texts, axis=0), self.text)
        source = ad.getitem(encoded, slice(0, b))
        if rmax:
            padded = ad.concat([encoded, Tensor(np.zeros((1, d)))], axis=0)
            pad_row = encoded.shape[0]
            index = np.full((b, rmax), pad_row, dtype=np.int64)
            pos = b
            for row, c in enumerate(counts):
                index[row, :c] = np.arange(pos, pos + c)
                pos += c
            replies = ad.take(padded, index)
        else:
            replies = Tensor(np.zeros((b, 0, d)))
        mask = np.arange(rmax)[None, :] < counts[:, None]
        m_local = encode_local_batch(source, replies, mask, self.local)
        m_global = encode_global(features, graph, self.glob, targets=graph.user_count + batch)
        joint = ad.concat([m_local, m_global], axis=1)
        return joint @ self.cls_weight + self.cls_bias

    def predict_proba(self, indices: np.ndarray, data: PreparedEvents, features: Tensor, graph: GraphIndex, batch_size: int = 64) -> np.ndarray:
        out = []
        for lo in range(0, len(indices), batch_size):
            z = self.logits(indices[lo : lo + batch_size], data, features, graph)
            out.append(ad.softmax(z, axis=1).data)
        return np.concatenate(out) if out else np.zeros((0, len(self.cfg.classes)))

    def predict(self, indices: np.ndarray, data: PreparedEvents, features: Tensor, graph: GraphIndex) -> np.ndarray:
        return np.argmax(self.predict_proba(indices, data, features, graph), axis=1)

    # checkpoint ----------------------------------------------------------------------------------
    def save(self, path: str | Path, extra: Optional[dict] = None) -> None:
        """Header (JSON, length-prefixed) then each tensor as little-endian f32."""
        tensors, offset, blobs = [], 0, []
        for name, t in self.named_parameters():
            blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            tensors.append({"name": name, "shape": list(t.shape), "dtype": "<f4", "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
            blobs.append(blob)
        header = {
            "format": "mglan-checkpoint/1",
            "config": self.cfg.to_dict(),
            "vocab": self.vocab.to_dict(),
            "vocab_sha256": self.vocab.digest(),
            "tensors": tensors,
            **(extra or {}),
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            for blob in blobs:
                fh.write(blob)

    @staticmethod
    def read_header(path: str | Path) -> dict:
        with open(path, "rb") as fh:
            if fh.read(8) != CHECKPOINT_MAGIC:
                raise DataFormatError(f"{path}: not a model checkpoint")
            (n,) = struct.unpack("<Q", fh.read(8))
            return json.loads(fh.read(n))

    @classmethod
    def load(cls, path: str | Path) -> tuple["MglanModel", dict]:
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: not a model checkpoint")
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + n])
        body = raw[16 + n :]
        vocab = Vocab.from_dict(header["vocab"])
        if vocab.digest() != header["vocab_sha256"]:
            raise DataFormatError(f"{path}: vocabulary hash mismatch")
        model = cls(ModelConfig.from_dict(header["config"]), vocab)
        for t in header["tensors"]:
            if t["name"] == "node_features":
                model.attach_features(np.zeros(t["shape"]))
        state = {}
        for t in header["tensors"]:
            arr = np.frombuffer(body[t["offset"] : t["offset"] + t["nbytes"]], dtype=t["dtype"])
            state[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
        model.load_state(state)
        return model, header


# training -----------------------------------------------------------------------------------------
@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: MglanModel
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1


def _features_tensor(features) -> Tensor:
    values = getattr(features, "input", features)
    return Tensor(np.asarray(values, dtype=np.float64))


def train(
    dataset: EventSet,
    g: HetGraph,
    features,
    cfg: ModelConfig,
    refresh_features: Optional[Callable[[int], np.ndarray]] = None,
) -> TrainResult:
    """Mini-batch training on the train split; returns the best-validation weights.

    ``features`` is an embedding matrix (or array) with one row per graph
    node. It stays frozen unless ``cfg.embeddings == "joint"``, in which case
    the model keeps a trainable copy. ``refresh_features(epoch)``, when given,
    supplies new frozen features at the start of every epoch.
    """
    if cfg.embeddings == "joint" and refresh_features is not None:
        raise ConfigError("refresh_features cannot be combined with joint embedding training")
    train_idx = dataset.indices("train")
    if len(train_idx) == 0:
        raise ConfigError("training split is empty")
    val_idx = dataset.indices("val")
    if tuple(cfg.classes) != tuple(dataset.classes):
        cfg = replace(cfg, classes=tuple(dataset.classes))

    texts = [dataset.events[i].text for i in train_idx] + [r.text for i in train_idx for r in dataset.events[i].replies]
    vocab = Vocab.build(texts, min_count=cfg.min_count)
    model = MglanModel(cfg, vocab)
    data = model.prepare(dataset)
    gi = GraphIndex(g)
    x = _features_tensor(features)
    if x.shape[0] != g.node_count:
        raise ShapeError(f"feature rows {x.shape[0]} != graph nodes {g.node_count}")
    if cfg.embeddings == "joint":
        x = model.attach_features(x.data)

    params = model.parameters()
    opt = (
        ad.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        if cfg.optimizer == "sgd"
        else ad.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    )
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    result = TrainResult(model)
    best_score, best_state = -1.0, model.state()
    for epoch in range(cfg.epochs):
        if refresh_features is not None:
            x = _features_tensor(refresh_features(epoch))
        order = train_idx[rng.permutation(len(train_idx))]
        total, seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            objective = ad.cross_entropy(model.logits(batch, data, x, gi), data.labels[batch])
            objective.backward()
            opt.step()
            total += objective.item() * len(batch)
            seen += len(batch)
        train_acc = float(np.mean(model.predict(train_idx, data, x, gi) == data.labels[train_idx]))
        val_acc = float(np.mean(model.predict(val_idx, data, x, gi) == data.labels[val_idx])) if len(val_idx) else train_acc
        result.history.append(EpochMetrics(epoch, total / seen, train_acc, val_acc))
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, total / seen, train_acc, val_acc)
        if val_acc > best_score:
            best_score, best_state, result.best_epoch = val_acc, model.state(), epoch
    model.load_state(best_state)
    return result


def evaluate(
    model: MglanModel,
    dataset: EventSet,
    g: HetGraph,
    features,
    split: Optional[str] = "test",
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted and gold class indices for one split (``None`` for all events).

    A jointly trained model uses its own tuned node features when they cover
    the graph; a different graph (for example a deadline cut) falls back to
    ``features``.
    """
    idx = np.arange(len(dataset)) if split is None else dataset.indices(split)
    data = model.prepare(dataset)
    x = _features_tensor(features)
    if model.node_features is not None and model.node_features.shape == x.shape:
        x = model.node_features
    preds = model.predict(idx, data, x, GraphIndex(g))
    return preds, data.labels[idx]


def embedding_digest(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f4").tobytes()).hexdigest()

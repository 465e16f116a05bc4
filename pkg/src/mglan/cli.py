"""``mglan`` command line: file-staged pipeline from raw cascades to metrics.

Every stage reads and writes files in one run directory and leaves a
``<stage>.manifest.json`` next to its outputs. Downstream stages compare the
hashes recorded there with the files on disk and refuse stale inputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

from mglan import dataio, evalkit
from mglan.dataio import EventSet, SyntheticSpec, to_graph
from mglan.errors import ConfigError, MglanError, StaleArtifactError
from mglan.hetgraph import MetaPathSchema
from mglan.metawalk import WalkConfig, WalkCorpus, generate_walks
from mglan.model import MglanModel, ModelConfig, evaluate, train
from mglan.sgns import EmbeddingMatrix, SgnsConfig, normal_features, train_on_corpus

log = logging.getLogger("mglan")

OUT_ENV = "MGLAN_OUT"
DEFAULT_OUT = "mglan-run"

EVENTS = "events.jsonl"
CORPUS = "corpus.txt"
EMB_TEXT = "embeddings.txt"
EMB_BIN = "embeddings.bin"
CHECKPOINT = "model.ckpt"
HISTORY = "train_history.csv"
METRICS = "metrics.csv"
METRICS_JSON = "metrics.json"
EARLY = "early_detection.csv"
EXPORT = "tweet_embeddings.tsv"


# manifests ---------------------------------------------------------------------------------
def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for pkg in ("mglan", "numpy", "numba", "scipy"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def manifest_path(out: Path, stage: str) -> Path:
    return out / f"{stage}.manifest.json"


def write_manifest(out: Path, stage: str, config: dict, inputs: Sequence[str], outputs: Sequence[str]) -> dict:
    m = {
        "stage": stage,
        "config": config,
        "inputs": {name: sha256_file(out / name) for name in inputs},
        "outputs": {name: sha256_file(out / name) for name in outputs},
        "versions": versions(),
    }
    manifest_path(out, stage).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return m


def read_manifest(out: Path, stage: str) -> Optional[dict]:
    p = manifest_path(out, stage)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def require(out: Path, name: str, hint: str) -> Path:
    p = out / name
    if not p.exists():
        raise MglanError(f"missing input file {p} (run `mglan {hint}` first)")
    return p


def check_chain(out: Path, stage: str, names: Sequence[str]) -> Optional[dict]:
    """Verify that each named file still matches what ``stage`` recorded.

    A name listed among the stage's outputs must hash to the recorded
    value; a name listed among its inputs must too, otherwise the stage's
    outputs were computed from a different version of that file.
    """
    m = read_manifest(out, stage)
    if m is None:
        return None
    for name in names:
        recorded = m["outputs"].get(name) or m["inputs"].get(name)
        if recorded is None or not (out / name).exists():
            continue
        if sha256_file(out / name) != recorded:
            raise StaleArtifactError(f"{name} changed since the {stage} stage ran; rerun `mglan {stage}`")
    return m


# stage helpers ---------------------------------------------------------------------------------
def load_events(out: Path) -> EventSet:
    path = require(out, EVENTS, "synth` or `mglan ingest")
    # the producing manifest pins the class set (a 4-class file may hold only NR/FR events)
    classes, digest = None, sha256_file(path)
    for stage in ("ingest", "synth"):
        m = read_manifest(out, stage)
        if m is not None and m["outputs"].get(EVENTS) == digest:
            classes = m["config"].get("classes")
    return EventSet.load(path, classes)


def walk_config_of(args) -> WalkConfig:
    return WalkConfig(
        walk_length=args.walk_length,
        walks_per_node=args.walks_per_node,
        pattern=MetaPathSchema.parse(args.meta_path),
        rng_seed=args.seed,
    )


def sgns_config_of(args) -> SgnsConfig:
    return SgnsConfig(
        dim=args.dim,
        context_size=args.context,
        negatives=args.negatives,
        epochs=args.sgns_epochs,
        learning_rate=args.sgns_lr,
        rng_seed=args.seed,
        mode=args.mode,
    )


def walk_config_dict(cfg: WalkConfig) -> dict:
    return {"walk_length": cfg.walk_length, "walks_per_node": cfg.walks_per_node, "meta_path": str(cfg.pattern), "seed": cfg.rng_seed}


def walk_config_from(d: dict) -> WalkConfig:
    return WalkConfig(d["walk_length"], d["walks_per_node"], MetaPathSchema.parse(d["meta_path"]), d["seed"])


def run_walk(out: Path, events: EventSet, cfg: WalkConfig, threads: int) -> WalkCorpus:
    g = to_graph(events)
    corpus = generate_walks(g, cfg, threads=threads)
    corpus.dump(out / CORPUS)
    write_manifest(out, "walk", walk_config_dict(cfg), [EVENTS], [CORPUS])
    return corpus


def run_embed(out: Path, events: EventSet, walk: WalkConfig, sgns: SgnsConfig, features: str, threads: int) -> EmbeddingMatrix:
    g = to_graph(events)
    if features == "normal":
        X = normal_features(g.node_count, sgns.dim, g.user_count, sgns.rng_seed)
        inputs = [EVENTS]
    else:
        if (out / CORPUS).exists() and _corpus_matches(out, walk):
            corpus = WalkCorpus.load(out / CORPUS, g.user_count)
        else:
            corpus = run_walk(out, events, walk, threads)
        X = train_on_corpus(corpus, g.node_count, sgns, threads=threads)
        inputs = [EVENTS, CORPUS]
    X.dump_text(out / EMB_TEXT)
    X.dump_binary(out / EMB_BIN)
    config = {"features": features, "walk": walk_config_dict(walk), "sgns": asdict(sgns), "status": X.status}
    write_manifest(out, "embed", config, inputs, [EMB_TEXT, EMB_BIN])
    return X


def _corpus_matches(out: Path, walk: WalkConfig) -> bool:
    m = check_chain(out, "walk", [CORPUS, EVENTS])
    return m is not None and m["config"] == walk_config_dict(walk)


def load_embeddings(out: Path, events: EventSet) -> tuple[EmbeddingMatrix, dict]:
    require(out, EMB_BIN, "embed")
    m = check_chain(out, "embed", [EMB_BIN, EVENTS])
    if m is None:
        raise MglanError(f"{out / EMB_BIN} has no embed manifest; rerun `mglan embed`")
    user_count = len(events.users)
    X = EmbeddingMatrix.load_binary(out / EMB_BIN, user_count)
    if X.n != user_count + len(events):
        raise StaleArtifactError(f"embedding has {X.n} rows but the events define {user_count + len(events)} nodes")
    return X, m


def model_config_of(args, classes, feature_dim: int) -> ModelConfig:
    return ModelConfig(
        classes=tuple(classes),
        feature_dim=feature_dim,
        seq_len=args.seq_len,
        word_dim=args.word_dim,
        text_dim=args.text_dim,
        heads=args.heads,
        global_dim=args.global_dim,
        gat_heads=args.gat_heads,
        max_replies=args.max_replies,
        cross_attention=args.cross_attention,
        gat_edge_bias=args.gat_edge_bias,
        embeddings=args.embeddings,
        optimizer=args.optimizer,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        min_count=args.min_count,
        seed=args.seed,
    )


def load_model(out: Path) -> MglanModel:
    require(out, CHECKPOINT, "train")
    check_chain(out, "train", [CHECKPOINT, EVENTS, EMB_BIN])
    model, _ = MglanModel.load(out / CHECKPOINT)
    return model


# subcommands ---------------------------------------------------------------------------------------
def cmd_ingest(args) -> None:
    out = args.out
    if args.format == "twitter":
        es = dataio.load_tree_dataset(args.labels, args.trees, args.sources, args.replies, seed=args.seed)
    elif args.format == "weibo":
        es = dataio.load_weibo_dataset(args.labels, args.trees, seed=args.seed)
    else:
        es = EventSet.load(args.labels, seed=args.seed)
    es.dump(out / EVENTS)
    config = {"format": args.format, "classes": list(es.classes), "seed": args.seed, "coverage": es.coverage()}
    inputs_cfg = {k: str(v) for k, v in (("labels", args.labels), ("trees", args.trees), ("sources", args.sources), ("replies", args.replies)) if v}
    write_manifest(out, "ingest", {**config, "paths": inputs_cfg}, [], [EVENTS])
    print(f"{len(es)} events {es.class_counts()} -> {out / EVENTS}")


def cmd_synth(args) -> None:
    if args.config:
        spec = SyntheticSpec.from_config_text(Path(args.config).read_text(encoding="utf-8"))
    else:
        spec = SyntheticSpec(
            events_per_class=args.events_per_class,
            users=args.users,
            classes=args.classes,
            structural_bias=args.structural_bias,
            text_signal=args.text_signal,
            seed=args.seed,
        )
    es = dataio.generate_synthetic(spec)
    es.dump(args.out / EVENTS)
    write_manifest(args.out, "synth", {"spec": asdict(spec), "classes": list(es.classes)}, [], [EVENTS])
    print(f"{len(es)} events {es.class_counts()} -> {args.out / EVENTS}")


def cmd_walk(args) -> None:
    events = load_events(args.out)
    corpus = run_walk(args.out, events, walk_config_of(args), args.threads)
    print(f"{len(corpus.lengths)} walks, {corpus.token_count} tokens -> {args.out / CORPUS}")


def cmd_embed(args) -> None:
    events = load_events(args.out)
    X = run_embed(args.out, events, walk_config_of(args), sgns_config_of(args), args.features, args.threads)
    print(f"{X.n} x {X.dim} embedding ({X.status}) -> {args.out / EMB_TEXT}")


def cmd_train(args) -> None:
    out = args.out
    events = load_events(out)
    if not (out / EMB_BIN).exists():
        log.info("no embeddings yet; running the embed stage with its defaults")
        run_embed(out, events, walk_config_of(args), sgns_config_of(args), args.features, args.threads)
    X, _ = load_embeddings(out, events)
    cfg = model_config_of(args, events.classes, X.dim)
    result = train(events, to_graph(events), X, cfg)
    result.model.save(out / CHECKPOINT)
    with open(out / HISTORY, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,train_accuracy,val_accuracy\n")
        for h in result.history:
            fh.write(f"{h.epoch},{h.loss:.6f},{h.train_accuracy:.6f},{h.val_accuracy:.6f}\n")
    write_manifest(out, "train", {"model": cfg.to_dict(), "best_epoch": result.best_epoch}, [EVENTS, EMB_BIN], [CHECKPOINT, HISTORY])
    print(f"best epoch {result.best_epoch} -> {out / CHECKPOINT}")


def cmd_evaluate(args) -> None:
    out = args.out
    events = load_events(out)
    model = load_model(out)
    X, _ = load_embeddings(out, events)
    split = None if args.split == "all" else args.split
    preds, golds = evaluate(model, events, to_graph(events), X, split)
    m = evalkit.compute_metrics(preds, golds, events.classes)
    evalkit.write_metrics_csv([(math.inf, m)], out / METRICS)
    (out / METRICS_JSON).write_text(json.dumps({"split": args.split, **m.to_dict()}, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "evaluate", {"split": args.split}, [EVENTS, EMB_BIN, CHECKPOINT], [METRICS, METRICS_JSON])
    print(f"{args.split} accuracy {m.accuracy:.4f} -> {out / METRICS}")


def cmd_early_detect(args) -> None:
    out = args.out
    events = load_events(out)
    model = load_model(out)
    _, m = load_embeddings(out, events)
    walk = walk_config_from(m["config"]["walk"])
    sgns = SgnsConfig(**m["config"]["sgns"])
    pipeline = evalkit.DetectionPipeline(walk, sgns, model.cfg, m["config"]["features"], args.threads, model)
    deadlines = sorted(parse_deadline(d) for d in args.deadlines)
    rows = evalkit.early_detection_sweep(pipeline, events, deadlines, retrain=args.retrain, split=args.split)
    evalkit.write_sweep_csv(rows, out / EARLY)
    config = {"deadlines": [evalkit.format_deadline(d) for d in deadlines], "retrain": args.retrain, "split": args.split}
    write_manifest(out, "early-detect", config, [EVENTS, EMB_BIN, CHECKPOINT], [EARLY])
    for r in rows:
        print(f"deadline {evalkit.format_deadline(r.deadline):>6}  accuracy {r.metrics.accuracy:.4f}  edges {r.edge_count}")


def cmd_export(args) -> None:
    out = args.out
    events = load_events(out)
    X, _ = load_embeddings(out, events)
    evalkit.export_embeddings(X, events, out / EXPORT, pca=args.pca)
    write_manifest(out, "export-embeddings", {"pca": args.pca}, [EVENTS, EMB_BIN], [EXPORT])
    print(f"{len(events)} tweet rows -> {out / EXPORT}")


def parse_deadline(text: str) -> float:
    text = text.strip().lower()
    if text in ("inf", "infinity", "∞"):
        return math.inf
    value = float(text)
    if math.isnan(value):
        raise ConfigError("deadline cannot be NaN")
    return value


# argument parsing ---------------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.exit(2, f"error: {message}\n")


def _add_walk_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("random walks")
    g.add_argument("--walk-length", type=int, default=100, help="nodes per walk")
    g.add_argument("--walks-per-node", type=int, default=5, help="walks started at every node")
    g.add_argument("--meta-path", default="U-T", help="cyclic node-kind pattern")


def _add_sgns_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("skip-gram")
    g.add_argument("--dim", type=int, default=256, help="embedding dimension")
    g.add_argument("--context", type=int, default=7, help="context window radius")
    g.add_argument("--negatives", type=int, default=3, help="negative samples per pair")
    g.add_argument("--sgns-epochs", type=int, default=5, help="passes over the walk corpus")
    g.add_argument("--sgns-lr", type=float, default=0.025, help="initial learning rate")
    g.add_argument("--mode", choices=("sync", "hogwild"), default="sync", help="update scheme")
    g.add_argument("--features", choices=("metapath", "normal"), default="metapath",
                   help="node features: trained embeddings or seeded normal noise")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    g = p.add_argument_group("classifier")
    g.add_argument("--epochs", type=int, default=d.epochs, help="training epochs")
    g.add_argument("--lr", type=float, default=d.lr, help="learning rate")
    g.add_argument("--optimizer", choices=("sgd", "adam"), default=d.optimizer, help="optimizer")
    g.add_argument("--embeddings", choices=("frozen", "joint"), default=d.embeddings,
                   help="keep node embeddings fixed or fine-tune them with the classifier")
    g.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum")
    g.add_argument("--weight-decay", type=float, default=d.weight_decay, help="L2 penalty")
    g.add_argument("--batch-size", type=int, default=d.batch_size, help="events per mini-batch")
    g.add_argument("--seq-len", type=int, default=d.seq_len, help="tokens kept per text")
    g.add_argument("--word-dim", type=int, default=d.word_dim, help="word vector size")
    g.add_argument("--text-dim", type=int, default=d.text_dim, help="text encoder output size")
    g.add_argument("--heads", type=int, default=d.heads, help="local attention heads")
    g.add_argument("--global-dim", type=int, default=d.global_dim, help="graph attention output size")
    g.add_argument("--gat-heads", type=int, default=d.gat_heads, help="heads in the first graph attention layer")
    g.add_argument("--max-replies", type=int, default=d.max_replies, help="earliest replies kept per event")
    g.add_argument("--min-count", type=int, default=d.min_count, help="vocabulary frequency cut-off")
    g.add_argument("--cross-attention", choices=("verbatim", "conventional"), default=d.cross_attention, help="reply/source attention wiring")
    g.add_argument("--gat-edge-bias", action="store_true", help="add log edge weight to attention scores")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--out", type=Path, default=Path(os.environ.get(OUT_ENV, DEFAULT_OUT)),
                        help=f"run directory (environment variable {OUT_ENV} changes the default)")
    common.add_argument("--threads", type=int, default=1, help="worker threads; 1 is fully deterministic")
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="mglan", description="Fake news detection on propagation graphs.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], formatter_class=fmt, help="normalise a raw dataset into records")
    p.add_argument("--format", choices=("twitter", "weibo", "records"), default="twitter", help="input layout")
    p.add_argument("--labels", type=Path, required=True, help="label file (or records file for --format records)")
    p.add_argument("--trees", type=Path, default=None, help="tree directory (twitter) or post JSON directory (weibo)")
    p.add_argument("--sources", type=Path, default=None, help="eid<TAB>text source tweet file")
    p.add_argument("--replies", type=Path, default=None, help="eid<TAB>delay<TAB>text reply file")
    p.set_defaults(func=cmd_ingest)

    d = SyntheticSpec()
    p = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="generate a planted-structure dataset")
    p.add_argument("--events-per-class", type=int, default=d.events_per_class, help="events generated per class")
    p.add_argument("--users", type=int, default=d.users, help="user pool size")
    p.add_argument("--classes", type=int, choices=(2, 4), default=d.classes, help="2 (NR/FR) or 4 classes")
    p.add_argument("--structural-bias", type=float, default=d.structural_bias, help="chance a spreader comes from the class community")
    p.add_argument("--text-signal", type=float, default=d.text_signal, help="chance a token comes from the class vocabulary")
    p.add_argument("--config", type=Path, default=None, help="key = value dataset settings file (overrides the flags)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("walk", parents=[common], formatter_class=fmt, help="sample meta-path walks")
    _add_walk_flags(p)
    p.set_defaults(func=cmd_walk)

    p = sub.add_parser("embed", parents=[common], formatter_class=fmt, help="train node embeddings")
    _add_walk_flags(p)
    _add_sgns_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train the classifier")
    _add_walk_flags(p)
    _add_sgns_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt, help="score a trained model")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test", help="split to score")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("early-detect", parents=[common], formatter_class=fmt, help="accuracy under time deadlines")
    p.add_argument("--deadlines", nargs="+", default=[evalkit.format_deadline(x) for x in evalkit.DEFAULT_DEADLINES],
                   help="deadlines in minutes ('inf' keeps everything)")
    p.add_argument("--retrain", action="store_true", help="fit a new classifier per deadline")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to score")
    p.set_defaults(func=cmd_early_detect)

    p = sub.add_parser("export-embeddings", parents=[common], formatter_class=fmt, help="write tweet vectors as TSV")
    p.add_argument("--pca", action="store_true", help="append the first two principal components")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args)
    except (MglanError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

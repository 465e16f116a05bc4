"""Event datasets: loaders, normalised records, splits and synthetic data.

An :class:`Event` is one source post with its replies (local neighbours,
carrying text) and its spread records (global neighbours, the users who
posted or re-shared it). All loaders converge on :class:`EventSet`, whose
canonical on-disk form is JSON-lines with one event per line.
"""
from __future__ import annotations

import ast
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mglan.errors import ConfigError, DataFormatError
from mglan.hetgraph import HetGraph, build_graph

log = logging.getLogger(__name__)

FOUR_CLASS = ("NR", "FR", "UR", "TR")
BINARY = ("NR", "FR")
LABEL_ALIASES = {
    "non-rumor": "NR",
    "false": "FR",
    "unverified": "UR",
    "true": "TR",
    "nr": "NR",
    "fr": "FR",
    "ur": "UR",
    "tr": "TR",
}
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class Reply:
    text: str
    delay: float


@dataclass(frozen=True)
class Spread:
    uid: str
    delay: float


@dataclass(frozen=True)
class Event:
    eid: str
    text: str
    label: str
    replies: tuple[Reply, ...] = ()
    spreads: tuple[Spread, ...] = ()

    def to_record(self, split: Optional[str] = None) -> dict:
        rec = {
            "eid": self.eid,
            "text": self.text,
            "label": self.label,
            "replies": [{"text": r.text, "delay": r.delay} for r in self.replies],
            "spreads": [{"uid": s.uid, "delay": s.delay} for s in self.spreads],
        }
        if split is not None:
            rec["split"] = split
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Event":
        try:
            return cls(
                eid=str(rec["eid"]),
                text=str(rec.get("text", "")),
                label=str(rec["label"]),
                replies=tuple(Reply(str(r["text"]), _finite(r["delay"])) for r in rec.get("replies", [])),
                spreads=tuple(Spread(str(s["uid"]), _finite(s["delay"])) for s in rec.get("spreads", [])),
            )
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed event record: missing {exc}") from None


def _finite(x) -> float:
    v = float(x)
    if not math.isfinite(v):
        raise DataFormatError(f"non-finite delay {x!r}")
    return v


@dataclass
class EventSet:
    events: list[Event]
    classes: tuple[str, ...] = FOUR_CLASS
    split: dict[str, str] = field(default_factory=dict)
    skipped_lines: int = 0

    def __post_init__(self) -> None:
        for e in self.events:
            if e.label not in self.classes:
                raise DataFormatError(f"event {e.eid}: label {e.label!r} not in class set {self.classes}")
        eids = [e.eid for e in self.events]
        if len(set(eids)) != len(eids):
            raise DataFormatError("duplicate event ids")

    def __len__(self) -> int:
        return len(self.events)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventSet):
            return NotImplemented
        return (self.events, self.classes, self.split) == (other.events, other.classes, other.split)

    @property
    def users(self) -> list[str]:
        return list(dict.fromkeys(s.uid for e in self.events for s in e.spreads))

    def label_index(self, event: Event) -> int:
        return self.classes.index(event.label)

    def labels(self) -> np.ndarray:
        return np.array([self.label_index(e) for e in self.events], dtype=np.int64)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.events) if self.split.get(e.eid) == split], dtype=np.int64)

    def class_counts(self) -> dict[str, int]:
        c = Counter(e.label for e in self.events)
        return {k: c.get(k, 0) for k in self.classes}

    def coverage(self) -> dict[str, int]:
        """How much of each record kind the source files actually carried."""
        return {
            "events": len(self.events),
            "with_source_text": sum(1 for e in self.events if e.text),
            "with_replies": sum(1 for e in self.events if e.replies),
            "replies": sum(len(e.replies) for e in self.events),
            "spreads": sum(len(e.spreads) for e in self.events),
            "users": len(self.users),
            "skipped_lines": self.skipped_lines,
        }

    def with_events(self, events: list[Event]) -> "EventSet":
        return EventSet(events, self.classes, dict(self.split), self.skipped_lines)

    def restrict(self, deadline: Optional[float]) -> "EventSet":
        """Drop spreads and replies that happened after ``deadline`` minutes."""
        if deadline is None or deadline == math.inf:
            return self.with_events(list(self.events))
        return self.with_events(
            [
                replace(
                    e,
                    replies=tuple(r for r in e.replies if r.delay <= deadline),
                    spreads=tuple(s for s in e.spreads if s.delay <= deadline),
                )
                for e in self.events
            ]
        )

    # records ---------------------------------------------------------------------
    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self.events:
                fh.write(json.dumps(e.to_record(self.split.get(e.eid)), ensure_ascii=False))
                fh.write("\n")

    @classmethod
    def load(cls, path: str | Path, classes: Optional[Sequence[str]] = None, seed: int = 0) -> "EventSet":
        """Read JSON-lines records; missing splits are assigned stratified.

        Without ``classes`` the set is binary when only NR/FR labels occur,
        four-class otherwise.
        """
        events, split = [], {}
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"{path}:{n}: {exc}") from None
                e = Event.from_record(rec)
                events.append(e)
                if "split" in rec:
                    split[e.eid] = rec["split"]
        if classes is None:
            labels = {e.label for e in events}
            classes = BINARY if labels <= set(BINARY) else FOUR_CLASS
        es = cls(events, tuple(classes), split)
        if len(split) != len(events):
            es.split = stratified_split(es.events, es.classes, seed)
        return es


def dump_records(es: EventSet, path: str | Path) -> None:
    es.dump(path)


def load_records(path: str | Path, classes: Optional[Sequence[str]] = None, seed: int = 0) -> EventSet:
    return EventSet.load(path, classes, seed)


# splitting ------------------------------------------------------------------------
def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    raw = [round(total * r, 9) for r in ratios]
    base = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def stratified_split(
    events: Sequence[Event],
    classes: Sequence[str],
    seed: int = 0,
    ratios: Sequence[float] = SPLIT_RATIOS,
) -> dict[str, str]:
    """Assign train/val/test so totals follow ``ratios`` and each class is within one event of them."""
    rng = np.random.default_rng([seed, 0x5B1])
    by_class = {c: [e.eid for e in events if e.label == c] for c in classes}
    quota = _largest_remainder(len(events), ratios)

    alloc = {}
    for c in classes:
        n = len(by_class[c])
        alloc[c] = [math.floor(round(n * r, 9)) for r in ratios]
        quota = [q - a for q, a in zip(quota, alloc[c])]
    # leftover events: at most one more per (class, split) keeps every class within one
    # event of its ideal share; serving the classes with most leftovers first and giving
    # each the splits with most unfilled quota always fills the quotas exactly
    extras = {c: len(by_class[c]) - sum(alloc[c]) for c in classes}
    for c in sorted(classes, key=lambda c: (-extras[c], classes.index(c))):
        n = len(by_class[c])
        rema = [n * r - a for r, a in zip(ratios, alloc[c])]
        picks = sorted(range(len(ratios)), key=lambda i: (-quota[i], -rema[i], i))[: extras[c]]
        for i in picks:
            alloc[c][i] += 1
            quota[i] -= 1

    split = {}
    for c in classes:
        eids = list(by_class[c])
        perm = rng.permutation(len(eids))
        pos = 0
        for name, k in zip(SPLITS, alloc[c]):
            for j in perm[pos : pos + k]:
                split[eids[j]] = name
            pos += k
    return {e.eid: split[e.eid] for e in events}


# tree-format loader -------------------------------------------------------------------
_TREE_LINE = re.compile(r"^\s*(\[.*?\])\s*->\s*(\[.*?\])\s*$")


def _parse_node(text: str) -> tuple[str, str, float]:
    items = ast.literal_eval(text)
    if not isinstance(items, list) or len(items) != 3:
        raise ValueError(text)
    uid, mid, delay = str(items[0]), str(items[1]), float(items[2])
    if not math.isfinite(delay):
        raise ValueError(text)
    return uid, mid, delay


def parse_tree_file(path: str | Path) -> tuple[list[Spread], int]:
    """Spread records from one propagation-tree file, plus the number of skipped lines."""
    spreads: dict[tuple[str, float], None] = {}
    skipped = 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            if not line.strip():
                continue
            m = _TREE_LINE.match(line)
            try:
                if m is None:
                    raise ValueError(line)
                parent = _parse_node(m.group(1))
                child = _parse_node(m.group(2))
            except (ValueError, SyntaxError):
                skipped += 1
                continue
            for uid, _mid, delay in (parent, child):
                if uid != "ROOT":
                    spreads.setdefault((uid, delay), None)
    return [Spread(uid, delay) for uid, delay in spreads], skipped


def read_label_file(path: str | Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            label, sep, eid = line.partition(":")
            if not sep:
                raise DataFormatError(f"{path}:{n}: expected '<label>:<event_id>'")
            code = LABEL_ALIASES.get(label.strip().lower())
            if code is None:
                raise DataFormatError(f"{path}:{n}: unknown label {label!r}")
            out.append((code, eid.strip()))
    return out


def _read_tsv_map(path: Optional[str | Path]) -> dict[str, str]:
    if path is None:
        return {}
    out = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            eid, sep, text = line.rstrip("\n").partition("\t")
            if sep:
                out[eid.strip()] = text
    return out


def _read_replies(path: Optional[str | Path]) -> dict[str, list[Reply]]:
    """Reply side file: ``<event_id>\\t<delay_minutes>\\t<text>`` per line."""
    if path is None:
        return {}
    out: dict[str, list[Reply]] = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t", 2)
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{n}: expected '<eid>\\t<delay>\\t<text>'")
            out.setdefault(parts[0].strip(), []).append(Reply(parts[2], _finite(parts[1])))
    return out


def load_tree_dataset(
    label_file: str | Path,
    tree_dir: str | Path,
    source_file: Optional[str | Path] = None,
    reply_file: Optional[str | Path] = None,
    seed: int = 0,
) -> EventSet:
    """Load a Twitter15/16-style dataset (label file plus one tree file per event)."""
    labels = read_label_file(label_file)
    tree_dir = Path(tree_dir)
    missing = [eid for _, eid in labels if not (tree_dir / f"{eid}.txt").exists()]
    if missing:
        raise DataFormatError(f"missing tree files for events: {', '.join(missing)}")
    sources = _read_tsv_map(source_file)
    replies = _read_replies(reply_file)

    events, skipped = [], 0
    for label, eid in labels:
        spreads, bad = parse_tree_file(tree_dir / f"{eid}.txt")
        skipped += bad
        events.append(Event(eid, sources.get(eid, ""), label, tuple(replies.get(eid, ())), tuple(spreads)))
    if skipped:
        log.warning("skipped %d unparseable tree lines", skipped)
    es = EventSet(events, FOUR_CLASS, {}, skipped)
    es.split = stratified_split(events, FOUR_CLASS, seed)
    return es


def load_weibo_dataset(label_file: str | Path, json_dir: str | Path, seed: int = 0) -> EventSet:
    """Load a Weibo-style dataset.

    ``label_file`` lines look like ``eid:<id>\\tlabel:<0|1>\\t...``; each
    ``<id>.json`` holds a list of posts with ``uid``, ``text`` and ``t``
    (unix seconds). The first post is the source; every other post with text
    becomes a reply and every participant a spread record.
    """
    json_dir = Path(json_dir)
    entries = []
    with open(label_file, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            fields = dict(part.split(":", 1) for part in line.split("\t") if ":" in part)
            try:
                eid, raw = fields["eid"].strip(), fields["label"].strip()
            except KeyError:
                raise DataFormatError(f"{label_file}:{n}: expected eid:<id> and label:<0|1>") from None
            if raw not in ("0", "1"):
                raise DataFormatError(f"{label_file}:{n}: unknown label {raw!r}")
            entries.append((eid, "NR" if raw == "0" else "FR"))
    missing = [eid for eid, _ in entries if not (json_dir / f"{eid}.json").exists()]
    if missing:
        raise DataFormatError(f"missing post files for events: {', '.join(missing)}")

    events = []
    for eid, label in entries:
        posts = json.loads((json_dir / f"{eid}.json").read_text(encoding="utf-8"))
        if not posts:
            events.append(Event(eid, "", label))
            continue
        t0 = float(posts[0].get("t", 0))
        replies, spreads = [], []
        for i, post in enumerate(posts):
            delay = (float(post.get("t", t0)) - t0) / 60.0
            spreads.append(Spread(str(post.get("uid", "")), delay))
            text = str(post.get("text", "") or "")
            if i > 0 and text.strip():
                replies.append(Reply(text, delay))
        events.append(Event(eid, str(posts[0].get("text", "")), label, tuple(replies), tuple(spreads)))
    es = EventSet(events, BINARY, {})
    es.split = stratified_split(events, BINARY, seed)
    return es


# graph construction ---------------------------------------------------------------------
def to_graph(events: EventSet, deadline_minutes: Optional[float] = None) -> HetGraph:
    """One tweet node per event (in event order) and one user node per spreader.

    Spread records later than ``deadline_minutes`` are left out.
    """
    cutoff = math.inf if deadline_minutes is None else float(deadline_minutes)
    edges = [(s.uid, e.eid, s.delay) for e in events.events for s in e.spreads if s.delay <= cutoff]
    return build_graph(edges, tweets=[e.eid for e in events.events])


# synthetic data -----------------------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticSpec:
    events_per_class: int = 40
    users: int = 200
    classes: int = 4
    # probability that a spreader comes from the class community (and spreads early)
    structural_bias: float = 0.9
    # probability that a text token comes from the class-specific vocabulary
    text_signal: float = 0.5
    vocab_size: int = 400
    spreads_per_event: tuple[int, int] = (8, 16)
    replies_per_event: tuple[int, int] = (1, 5)
    text_length: tuple[int, int] = (8, 20)
    early_delay: float = 5.0
    late_delay: float = 600.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("events_per_class", "users", "classes", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.classes not in (2, 4):
            raise ConfigError("classes must be 2 or 4")
        if self.users < self.events_per_class * self.classes:
            raise ConfigError("users must be at least the number of events")
        if self.users < self.classes:
            raise ConfigError("need at least one user per class community")
        if self.vocab_size < 2 * self.classes:
            raise ConfigError("vocab_size too small for class vocabularies")
        if not (0 <= self.structural_bias <= 1 and 0 <= self.text_signal <= 1):
            raise ConfigError("structural_bias and text_signal must lie in [0, 1]")

    @classmethod
    def from_config_text(cls, text: str) -> "SyntheticSpec":
        """Parse ``key = value`` lines (``#`` comments allowed)."""
        kwargs = {}
        fields = cls.__dataclass_fields__
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in fields:
                raise ConfigError(f"synthetic config line {n}: unknown entry {line!r}")
            default = fields[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(x) for x in value.replace(",", " ").split())
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def generate_synthetic(spec: SyntheticSpec) -> EventSet:
    """Events with planted class signal in both text and spread structure.

    Users are split into one community per class. A spreader of a class-c
    event comes from community c with probability ``structural_bias`` and
    then spreads early; otherwise it is drawn from all users and spreads late.
    Text tokens come from a class vocabulary with probability ``text_signal``
    and from a shared vocabulary otherwise.
    """
    rng = np.random.default_rng([spec.seed, 0x5717])
    classes = FOUR_CLASS if spec.classes == 4 else BINARY
    n_cls = len(classes)
    communities = np.array_split(np.arange(spec.users), n_cls)
    per_class_vocab = max(1, spec.vocab_size // (2 * n_cls))
    class_vocab = [np.arange(c * per_class_vocab, (c + 1) * per_class_vocab) for c in range(n_cls)]
    shared_vocab = np.arange(n_cls * per_class_vocab, spec.vocab_size)

    def text(c: int) -> str:
        n = int(rng.integers(spec.text_length[0], spec.text_length[1] + 1))
        signal = rng.random(n) < spec.text_signal
        toks = np.where(signal, rng.choice(class_vocab[c], n), rng.choice(shared_vocab, n))
        return " ".join(f"w{t}" for t in toks)

    def spreader(c: int) -> tuple[int, float]:
        if rng.random() < spec.structural_bias:
            return int(rng.choice(communities[c])), float(rng.exponential(spec.early_delay))
        return int(rng.integers(spec.users)), float(rng.exponential(spec.late_delay))

    labels = np.repeat(np.arange(n_cls), spec.events_per_class)
    labels = labels[rng.permutation(len(labels))]
    events = []
    for i, c in enumerate(labels):
        c = int(c)
        poster, _ = spreader(c)
        spreads = [Spread(f"u{poster}", 0.0)]
        for _ in range(int(rng.integers(spec.spreads_per_event[0], spec.spreads_per_event[1] + 1))):
            uid, delay = spreader(c)
            spreads.append(Spread(f"u{uid}", round(delay, 3)))
        n_rep = int(rng.integers(spec.replies_per_event[0], spec.replies_per_event[1] + 1))
        replies = [Reply(text(c), round(float(rng.exponential(spec.late_delay / 4)), 3)) for _ in range(n_rep)]
        events.append(Event(f"e{i:05d}", text(c), classes[c], tuple(replies), tuple(spreads)))
    es = EventSet(events, classes, {})
    es.split = stratified_split(events, classes, spec.seed)
    return es

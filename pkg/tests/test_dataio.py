from __future__ import annotations

import json
import math
from collections import Counter
from importlib import resources

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mglan.dataio import (
    BINARY,
    FOUR_CLASS,
    Event,
    EventSet,
    Reply,
    Spread,
    SyntheticSpec,
    generate_synthetic,
    load_tree_dataset,
    load_weibo_dataset,
    parse_tree_file,
    read_label_file,
    stratified_split,
    to_graph,
)
from mglan.errors import ConfigError, DataFormatError

FIXTURE = resources.files("mglan") / "fixtures" / "twitter_mini"


def load_fixture():
    return load_tree_dataset(
        FIXTURE / "label.txt", FIXTURE / "tree", FIXTURE / "source_tweets.txt", FIXTURE / "replies.txt"
    )


def test_fixture_counts_and_round_trip(tmp_path):
    es = load_fixture()
    assert len(es) == 10
    assert es.class_counts() == {"NR": 3, "FR": 3, "UR": 2, "TR": 2}
    assert es.skipped_lines == 0
    cov = es.coverage()
    assert (cov["events"], cov["spreads"], cov["users"], cov["replies"]) == (10, 54, 25, 11)
    assert cov["with_source_text"] == 10 and 0 < cov["with_replies"] <= 10
    es.dump(tmp_path / "events.jsonl")
    assert (tmp_path / "events.jsonl").read_text() == (FIXTURE / "expected.jsonl").read_text()
    assert EventSet.load(tmp_path / "events.jsonl", FOUR_CLASS) == es


def test_tree_parser_skips_root_dedupes_and_counts_bad_lines(tmp_path):
    f = tmp_path / "t.txt"
    f.write_text(
        "['ROOT', 'ROOT', '0.0']->['11', '99', '0.0']\n"
        "['11', '99', '0.0']->['12', '99', '5.5']\n"
        "['11', '99', '0.0']->['12', '99', '5.5']\n"
        "garbage line\n"
        "['12', '99', '5.5']->['13', '99', 'nan']\n"
        "\n"
    )
    spreads, skipped = parse_tree_file(f)
    assert spreads == [Spread("11", 0.0), Spread("12", 5.5)]
    assert skipped == 2


def test_label_file_errors(tmp_path):
    (tmp_path / "ok.txt").write_text("false:1\nnon-rumor:2\n\n")
    assert read_label_file(tmp_path / "ok.txt") == [("FR", "1"), ("NR", "2")]
    (tmp_path / "bad.txt").write_text("maybe:1\n")
    with pytest.raises(DataFormatError, match="maybe"):
        read_label_file(tmp_path / "bad.txt")
    (tmp_path / "nocolon.txt").write_text("false 1\n")
    with pytest.raises(DataFormatError):
        read_label_file(tmp_path / "nocolon.txt")


def test_missing_tree_files_are_listed(tmp_path):
    (tmp_path / "label.txt").write_text("true:77\ntrue:78\n")
    (tmp_path / "tree").mkdir()
    with pytest.raises(DataFormatError, match="77, 78"):
        load_tree_dataset(tmp_path / "label.txt", tmp_path / "tree")


def test_weibo_loader(tmp_path):
    (tmp_path / "Weibo.txt").write_text("eid:1\tlabel:1\tx\neid:2\tlabel:0\ty\n")
    (tmp_path / "posts").mkdir()
    posts = [{"uid": "a", "text": "src", "t": 1000}, {"uid": "b", "text": "reply", "t": 1120}, {"uid": "c", "text": "", "t": 1060}]
    (tmp_path / "posts" / "1.json").write_text(json.dumps(posts))
    (tmp_path / "posts" / "2.json").write_text("[]")
    es = load_weibo_dataset(tmp_path / "Weibo.txt", tmp_path / "posts")
    assert es.classes == BINARY
    e = es.events[0]
    assert e.label == "FR" and e.text == "src"
    assert e.replies == (Reply("reply", 2.0),)
    assert [s.delay for s in e.spreads] == [0.0, 2.0, 1.0]


def test_records_round_trip_and_class_inference(tmp_path):
    events = [Event("a", "x", "NR", (Reply("r", 1.0),), (Spread("u", 0.0),)), Event("b", "y", "FR")]
    es = EventSet(events, BINARY, {"a": "train", "b": "test"})
    es.dump(tmp_path / "r.jsonl")
    back = EventSet.load(tmp_path / "r.jsonl")
    assert back == es and back.classes == BINARY
    assert EventSet.load(tmp_path / "r.jsonl", FOUR_CLASS).classes == FOUR_CLASS
    (tmp_path / "bad.jsonl").write_text('{"eid": "a"}\n')
    with pytest.raises(DataFormatError):
        EventSet.load(tmp_path / "bad.jsonl")
    with pytest.raises(DataFormatError):
        EventSet([Event("a", "", "XX")], BINARY)


def test_split_sizes_for_forty_events():
    es = generate_synthetic(SyntheticSpec(events_per_class=10, users=100, seed=1))
    sizes = Counter(es.split.values())
    assert (sizes["train"], sizes["val"], sizes["test"]) == (28, 6, 6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=4, max_size=4), st.integers(0, 1000))
def test_split_is_stratified(counts, seed):
    events = [Event(f"{c}-{i}", "", c) for c, n in zip(FOUR_CLASS, counts) for i in range(n)]
    split = stratified_split(events, FOUR_CLASS, seed)
    assert set(split) == {e.eid for e in events}
    total = len(events)
    sizes = Counter(split.values())
    for name, r in zip(("train", "val", "test"), (0.7, 0.15, 0.15)):
        assert abs(sizes[name] - total * r) < 1 + 1e-9
    for c, n in zip(FOUR_CLASS, counts):
        per = Counter(split[e.eid] for e in events if e.label == c)
        for name, r in zip(("train", "val", "test"), (0.7, 0.15, 0.15)):
            assert abs(per[name] - n * r) <= 1 + 1e-9
    assert stratified_split(events, FOUR_CLASS, seed) == split


def test_restrict_and_graph_are_monotone():
    es = generate_synthetic(SyntheticSpec(events_per_class=5, users=60, seed=2))
    edges = [to_graph(es.restrict(d)).edge_count for d in (0, 5, 60, 600, math.inf)]
    assert edges == sorted(edges) and edges[0] >= len(es)
    assert to_graph(es, 0).edge_count == edges[0]
    zero = es.restrict(0)
    assert all(s.delay <= 0 for e in zero.events for s in e.spreads)
    assert all(not e.replies or min(r.delay for r in e.replies) <= 0 for e in zero.events)
    g = to_graph(es)
    assert g.tweet_count == len(es) and g.id_of(g.tweet(es.events[3].eid)) == es.events[3].eid


def test_synthetic_generator_is_seeded_and_planted():
    spec = SyntheticSpec(events_per_class=6, users=80, structural_bias=1.0, seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a == b
    assert a.class_counts() == {c: 6 for c in FOUR_CLASS}
    # with full bias every spreader of a class-c event lies in community c
    for e in a.events:
        c = FOUR_CLASS.index(e.label)
        assert all(20 * c <= int(s.uid[1:]) < 20 * (c + 1) for s in e.spreads)
    binary = generate_synthetic(SyntheticSpec(events_per_class=3, users=20, classes=2))
    assert binary.classes == BINARY


def test_synthetic_spec_validation_and_config_text():
    with pytest.raises(ConfigError):
        SyntheticSpec(events_per_class=50, users=10)
    with pytest.raises(ConfigError):
        SyntheticSpec(classes=3)
    spec = SyntheticSpec.from_config_text("events_per_class = 5  # small\nusers=40\ntext-signal = 0.2\nspreads_per_event = 2, 3\n")
    assert (spec.events_per_class, spec.users, spec.text_signal, spec.spreads_per_event) == (5, 40, 0.2, (2, 3))
    with pytest.raises(ConfigError):
        SyntheticSpec.from_config_text("colour = red")

from __future__ import annotations

import json
import re
from importlib import resources

import pytest

from mglan.cli import build_parser, main

SMALL_TRAIN = ["--epochs", "2", "--word-dim", "8", "--text-dim", "12", "--heads", "2", "--global-dim", "6", "--gat-heads", "2"]
SMALL_EMBED = ["--walk-length", "10", "--walks-per-node", "2", "--dim", "8", "--sgns-epochs", "1"]


def run(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "run"
    assert run("synth", "--events-per-class", 10, "--seed", 7, "--out", out) == 0
    return out


def test_synth_train_evaluate_pipeline(synth_dir):
    out = synth_dir
    assert run("train", "--out", out, *SMALL_EMBED, *SMALL_TRAIN) == 0
    assert (out / "embeddings.bin").exists() and (out / "model.ckpt").exists()
    assert run("evaluate", "--out", out) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "deadline_minutes,accuracy,f1_NR,f1_FR,f1_UR,f1_TR"
    assert 0.0 <= float(rows[1].split(",")[1]) <= 1.0
    assert run("early-detect", "--out", out, "--deadlines", "0", "60", "inf") == 0
    early = (out / "early_detection.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in early[1:]] == ["0", "60", "inf"]
    assert early[-1].split(",")[1:] == rows[1].split(",")[1:]
    assert run("export-embeddings", "--out", out, "--pca") == 0
    header = (out / "tweet_embeddings.tsv").read_text().splitlines()[0].split("\t")
    assert header[:3] == ["eid", "label", "f1"] and header[-1] == "pc2"
    manifest = json.loads((out / "train.manifest.json").read_text())
    assert set(manifest) == {"stage", "config", "inputs", "outputs", "versions"}
    assert set(manifest["inputs"]) == {"events.jsonl", "embeddings.bin"}


def test_embed_header_uses_requested_dimension(synth_dir):
    assert run("embed", "--out", synth_dir, "--dim", 256, "--walk-length", 100, "--context", 7, "--negatives", 3, "--sgns-epochs", 1) == 0
    with open(synth_dir / "embeddings.txt") as fh:
        n, d = fh.readline().split()
    assert d == "256" and int(n) > 40
    assert len((synth_dir / "corpus.txt").read_text().splitlines()[0].split()) == 100


def test_same_seed_runs_are_byte_identical(tmp_path):
    dirs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("synth", "--events-per-class", 6, "--seed", 3, "--out", out) == 0
        assert run("embed", "--out", out, "--threads", 1, *SMALL_EMBED) == 0
        assert run("train", "--out", out, *SMALL_TRAIN) == 0
        assert run("evaluate", "--out", out) == 0
        dirs.append(out)
    a, b = dirs
    for name in ("events.jsonl", "embeddings.txt", "embeddings.bin", "model.ckpt", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    for stage in ("synth", "walk", "embed", "train", "evaluate"):
        assert (a / f"{stage}.manifest.json").read_text() == (b / f"{stage}.manifest.json").read_text()


def test_stale_inputs_are_rejected(synth_dir, capsys):
    out = synth_dir
    assert run("embed", "--out", out, *SMALL_EMBED) == 0
    assert run("synth", "--events-per-class", 10, "--seed", 8, "--out", out) == 0
    capsys.readouterr()
    assert run("train", "--out", out, *SMALL_TRAIN) == 2
    err = capsys.readouterr().err
    assert err.startswith("error:") and "events.jsonl" in err and err.count("\n") == 1


def test_missing_input_and_unknown_flag(tmp_path, capsys):
    assert run("evaluate", "--out", tmp_path / "empty") == 2
    assert "missing input file" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--no-such-flag"])
    assert exc.value.code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MGLAN_OUT", str(tmp_path / "env"))
    assert main(["synth", "--events-per-class", "2", "--users", "20"]) == 0
    assert (tmp_path / "env" / "events.jsonl").exists()


def test_ingest_fixture(tmp_path):
    fx = resources.files("mglan") / "fixtures" / "twitter_mini"
    out = tmp_path / "ing"
    code = run("ingest", "--out", out, "--labels", fx / "label.txt", "--trees", fx / "tree",
               "--sources", fx / "source_tweets.txt", "--replies", fx / "replies.txt")
    assert code == 0
    assert (out / "events.jsonl").read_text() == (fx / "expected.jsonl").read_text()
    assert run("embed", "--out", out, *SMALL_EMBED) == 0


def test_help_lists_every_flag_with_default():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        formatter = p._get_formatter()
        for action in p._actions:
            if action.dest == "help":
                continue
            assert action.option_strings[-1] in text, (name, action.dest)
            if not action.required:
                assert action.help and "%(default)" in formatter._get_help_string(action), (name, action.dest)
        assert "--out" in text and "--threads" in text
        assert "(default: 1)" in re.sub(r"\s+", " ", text)

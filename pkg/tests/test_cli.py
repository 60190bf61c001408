from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from cedkit import __version__
from cedkit.cli import SEED_ENV, main
from cedkit.core import ConceptTrace, LabeledTrace, ProbTrace, iter_jsonl, write_jsonl
from cedkit.fsm import label_trace


def run(*argv):
    return main([str(a) for a in argv])


def lines(path):
    return path.read_text().splitlines()


@pytest.fixture(scope="module")
def traces(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "traces.jsonl"
    assert run("generate", "--count", 40, "--seed", 5, "--out", path) == 0
    return path


def test_generate_outputs_and_run_record(traces):
    recs = list(iter_jsonl(traces))
    assert len(recs) == 40 and all(isinstance(r, ConceptTrace) and len(r) == 60 for r in recs)
    meta = json.loads(traces.with_name("traces.jsonl.run.json").read_text())
    assert meta["subcommand"] == "generate"
    assert meta["seeds"] == {"seed": 5}
    assert meta["version"] == __version__
    assert meta["config_hash"] and meta["wall_time_s"] >= 0
    assert "--count" in meta["argv"]


def test_generate_is_byte_identical_with_jobs(tmp_path, traces):
    out = tmp_path / "again.jsonl"
    assert run("generate", "--count", 40, "--seed", 5, "--jobs", 2, "--out", out) == 0
    assert out.read_bytes() == traces.read_bytes()


def test_seed_from_environment(tmp_path, monkeypatch):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    monkeypatch.setenv(SEED_ENV, "9")
    assert run("generate", "--count", 3, "--out", a) == 0
    monkeypatch.delenv(SEED_ENV)
    assert run("generate", "--count", 3, "--seed", 9, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert run("generate", "--count", 3, "--out", tmp_path / "c.jsonl") == 1


def test_label_line_count(tmp_path, traces):
    out = tmp_path / "labeled.jsonl"
    code = run("label", "--in", traces, "--out", out, "--on-conflict", "lowest")
    assert code == 0
    assert len(lines(out)) == len(lines(traces))
    recs = list(iter_jsonl(out))
    assert all(isinstance(r, LabeledTrace) for r in recs)


def test_label_conflict_policies(tmp_path):
    clash = ConceptTrace.from_symbols(
        ["sit", "click_mouse", "click_mouse", "click_mouse", "click_mouse", "flush_toilet", "click_mouse"], id="clash"
    )
    calm = ConceptTrace.from_symbols(["walk"] * 4, id="calm")
    src = tmp_path / "in.jsonl"
    write_jsonl([clash, calm], src)
    assert run("label", "--in", src, "--out", tmp_path / "e.jsonl") == 2
    assert run("label", "--in", src, "--out", tmp_path / "s.jsonl", "--on-conflict", "skip") == 0
    assert [r.id for r in iter_jsonl(tmp_path / "s.jsonl")] == ["calm"]
    assert run("label", "--in", src, "--out", tmp_path / "l.jsonl", "--on-conflict", "lowest") == 0
    assert next(iter_jsonl(tmp_path / "l.jsonl")).labels[-1] == 1


def test_detect_one_hot_equals_labels(tmp_path, traces):
    labeled = tmp_path / "labeled.jsonl"
    run("label", "--in", traces, "--out", labeled, "--on-conflict", "skip")
    onehot = tmp_path / "onehot.jsonl"
    write_jsonl([ProbTrace.one_hot(r.trace) for r in iter_jsonl(labeled)], onehot)
    pred = tmp_path / "pred.jsonl"
    assert run("detect", "--in", onehot, "--threshold", 0.5, "--out", pred) == 0
    got = [json.loads(line)["ce"] for line in lines(pred)]
    assert got == [list(r.labels) for r in iter_jsonl(labeled)]
    # concept traces are accepted directly and treated as one-hot
    pred2 = tmp_path / "pred2.jsonl"
    assert run("detect", "--in", labeled, "--out", pred2, "--jobs", 2) == 0
    assert pred2.read_bytes() == pred.read_bytes()


def test_build_stats_eval_pipeline(tmp_path):
    ds = tmp_path / "ds"
    assert run("build", "--count", 60, "--seed", 1, "--out", ds, "--max-discard-rate", 0.2) == 0
    assert (ds / "run.json").exists() and (ds / "manifest.json").exists()
    st = tmp_path / "stats.json"
    assert run("stats", "--in", ds, "--out", st) == 0
    assert json.loads(st.read_text())["n_samples"] == 60
    assert run("stats", "--in", ds, "--out", tmp_path / "stats.csv", "--format", "csv", "--split-name", "train") == 0
    assert lines(tmp_path / "stats.csv")[1].startswith("train,")
    report = tmp_path / "report.json"
    truth = ds / "traces.jsonl"
    assert run("eval", "--pred", truth, "--truth", ds, "--out", report) == 0
    rep = json.loads(report.read_text())
    assert rep["f1_pos"] == 1.0 and rep["f1_all"] == 1.0 and rep["schema_version"] == 1
    assert run("eval", "--pred", truth, "--truth", truth, "--out", tmp_path / "r.csv", "--format", "csv") == 0
    assert lines(tmp_path / "r.csv")[0].startswith("All,Pos.,e0")


def test_build_from_manifest(tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"name": "mf", "split": "val", "count": 5, "config_id": "office", "seed_base": 2}))
    assert run("build", "--manifest", m, "--out", tmp_path / "a", "--max-discard-rate", 1) == 0
    assert run("build", "--manifest", m, "--out", tmp_path / "b", "--max-discard-rate", 1) == 0
    assert (tmp_path / "a" / "traces.jsonl").read_bytes() == (tmp_path / "b" / "traces.jsonl").read_bytes()
    recs = list(iter_jsonl(tmp_path / "a" / "traces.jsonl"))
    assert {r.trace.generator_tag for r in recs} == {"office"}
    assert recs[0].id == "mf-val-00000"


def test_corrupt_and_curve(tmp_path, traces):
    labeled = tmp_path / "labeled.jsonl"
    run("label", "--in", traces, "--out", labeled, "--on-conflict", "skip")
    probs, obs = tmp_path / "p.jsonl", tmp_path / "o.jsonl"
    assert run("corrupt", "--in", labeled, "--noise", 0.1, "--seed", 3, "--out", probs, "--observed", obs) == 0
    assert len(lines(probs)) == len(lines(obs)) == len(lines(labeled))
    p = next(iter_jsonl(probs))
    assert isinstance(p, ProbTrace) and np.allclose(p.as_array().sum(axis=1), 1)
    again = tmp_path / "p2.jsonl"
    run("corrupt", "--in", labeled, "--noise", 0.1, "--seed", 3, "--out", again)
    assert again.read_bytes() == probs.read_bytes()
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps(np.full((9, 9), 1 / 9).tolist()))
    assert run("corrupt", "--in", labeled, "--seed", 3, "--confusion", conf, "--out", tmp_path / "p3.jsonl") == 0
    conf.write_text(json.dumps([[1, 0]]))
    assert run("corrupt", "--in", labeled, "--seed", 3, "--confusion", conf, "--out", tmp_path / "p4.jsonl") == 2
    curve = tmp_path / "curve.csv"
    assert run("curve", "--in", labeled, "--noise", "0,0.1", "--seed", 4, "--out", curve) == 0
    header, first, _ = lines(curve)
    assert header.startswith("noise,f1_pos_argmax")
    assert first.startswith("0.0,1.0000,1.0000")


def test_stdout_output(capsys, traces):
    assert run("label", "--in", traces, "--on-conflict", "skip") == 0
    out = capsys.readouterr().out
    assert out.count("\n") >= 30


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["label"],
        ["generate", "--count", "0", "--seed", "1"],
        ["generate", "--seed", "-1"],
        ["detect", "--in", "x", "--threshold", "0"],
        ["curve", "--in", "x", "--noise", "0,2"],
        ["build", "--out", "somewhere"],
    ],
)
def test_usage_errors(argv, capsys):
    assert run(*argv) == 1
    assert "usage:" in capsys.readouterr().err or argv == ["build", "--out", "somewhere"]


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "ae": ["teleport"]}\n')
    assert run("label", "--in", bad, "--out", tmp_path / "o.jsonl") == 2
    assert run("label", "--in", tmp_path / "missing.jsonl", "--out", tmp_path / "o.jsonl") == 2
    assert run("generate", "--config", "nope", "--seed", 1, "--out", tmp_path / "g.jsonl") == 2
    pred = tmp_path / "pred.jsonl"
    pred.write_text('{"id": "zzz", "ce": [0]}\n')
    truth = tmp_path / "truth.jsonl"
    write_jsonl([label_trace(ConceptTrace.from_symbols(["walk"], id="a"))], truth)
    assert run("eval", "--pred", pred, "--truth", truth, "--out", tmp_path / "r.json") == 2


def test_help_and_version(capsys):
    assert run("--version") == 0
    assert __version__ in capsys.readouterr().out
    assert run("label", "--help") == 0
    assert "--on-conflict" in capsys.readouterr().out


@pytest.mark.skipif(shutil.which("cedkit") is None, reason="console script not installed")
def test_console_script(tmp_path):
    out = tmp_path / "t.jsonl"
    proc = subprocess.run(["cedkit", "generate", "--count", "2", "--seed", "1", "--out", str(out)], capture_output=True)
    assert proc.returncode == 0
    assert len(lines(out)) == 2
    proc = subprocess.run([sys.executable, "-m", "cedkit.cli", "eval"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr

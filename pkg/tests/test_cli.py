import csv
import json

import pytest

from resofilter import dataio as D
from resofilter import diffscore, objective
from resofilter.cli import main

TINY = ["--d-model", "16", "--n-heads", "2", "--n-layers", "2", "--d-ff", "32", "--max-seq-len", "96"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert run("synth", "--clean", 24, "--dirty", 8, "--seed", 7, "--out", d / "data.jsonl") == 0
    assert run("synth", "--clean", 30, "--dirty", 0, "--seed", 8, "--out", d / "boot.jsonl") == 0
    assert run("pretrain", "--data", d / "boot.jsonl", "--vocab-from", d / "data.jsonl",
               "--out", d / "base.ckpt", "--epochs", 1, *TINY) == 0
    assert run("score", "--ckpt", d / "base.ckpt", "--data", d / "data.jsonl", "--out", d / "scores.jsonl",
               "--last-layers", 2) == 0
    return d


def test_synth_counts_and_repeatability(tmp_path):
    assert run("synth", "--clean", 40, "--dirty", 10, "--seed", 7, "--out", tmp_path / "a.jsonl") == 0
    assert run("synth", "--clean", 40, "--dirty", 10, "--seed", 7, "--out", tmp_path / "b.jsonl") == 0
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 50
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert run("synth", "--clean", -1, "--out", tmp_path / "c.jsonl") == 2
    assert not (tmp_path / "c.jsonl").exists()


def test_pretrain_deterministic_and_learns(pipeline, tmp_path, capsys):
    args = ["pretrain", "--data", pipeline / "boot.jsonl", "--vocab-from", pipeline / "data.jsonl",
            "--epochs", 1, *TINY]
    assert run(*args, "--out", tmp_path / "again.ckpt", "--heldout", pipeline / "data.jsonl") == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (pipeline / "base.ckpt").read_bytes()
    out = capsys.readouterr().out
    before = float(out.split("heldout loss before: ")[1].split()[0])
    after = float(out.split("heldout loss after: ")[1].split()[0])
    assert after < before


def test_pretrain_missing_data(tmp_path):
    assert run("pretrain", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "m.ckpt") == 1
    assert not (tmp_path / "m.ckpt").exists()


def test_score_workers_identical(pipeline, tmp_path):
    base = ["score", "--ckpt", pipeline / "base.ckpt", "--data", pipeline / "data.jsonl", "--last-layers", 2]
    assert run(*base, "--workers", 8, "--out", tmp_path / "w8.jsonl") == 0
    assert (tmp_path / "w8.jsonl").read_bytes() == (pipeline / "scores.jsonl").read_bytes()


def test_score_stat_variants(pipeline, tmp_path):
    base = ["score", "--ckpt", pipeline / "base.ckpt", "--data", pipeline / "data.jsonl", "--last-layers", 2]
    assert run(*base, "--stat", "p90", "--out", tmp_path / "p90.jsonl") == 0
    entries = diffscore.load_scores(tmp_path / "p90.jsonl")
    assert {e.stat for e in entries} == {"p90"}
    for e in entries:
        layers = [e.per_cell[(layer, "w_up")]["p90"] for layer in (0, 1)]
        assert e.score == pytest.approx(sum(layers) / 2, rel=1e-15)
    assert run(*base, "--stat", "median", "--out", tmp_path / "bad.jsonl") == 2


def test_filter(pipeline, tmp_path):
    out = tmp_path / "kept.jsonl"
    assert run("filter", "--data", pipeline / "data.jsonl", "--scores", pipeline / "scores.jsonl",
               "--out", out, "--retain", 0.5, "--order", "original", "--last-layers", 2) == 0
    kept = D.load_jsonl(out)
    full = D.load_jsonl(pipeline / "data.jsonl")
    assert len(kept) == len(full) // 2
    positions = [full.index(s) for s in kept]
    assert positions == sorted(positions)
    manifest = json.loads((tmp_path / "kept.jsonl.manifest.json").read_text())
    assert manifest["kept_indices"] == positions
    assert run("filter", "--data", pipeline / "data.jsonl", "--scores", pipeline / "scores.jsonl",
               "--out", tmp_path / "none.jsonl", "--retain", 0) == 2


def test_sweep_matches_objective(pipeline, tmp_path):
    assert run("sweep", "--scores", pipeline / "scores.jsonl", "--out", tmp_path / "one.csv", "--grid", "0.5") == 0
    assert len((tmp_path / "one.csv").read_text().splitlines()) == 2
    assert run("sweep", "--scores", pipeline / "scores.jsonl", "--out", tmp_path / "s.csv",
               "--grid", "0.25,0.5,0.75,1.0", "--beta", 0.5, "--lambda", 0.05) == 0
    rows = list(csv.DictReader((tmp_path / "s.csv").open()))
    rich = [float(r["richness"]) for r in rows]
    assert rich == sorted(rich)
    entries = diffscore.load_scores(pipeline / "scores.jsonl")
    ref = objective.sweep(entries, [0.25, 0.5, 0.75, 1.0], objective.ObjectiveParams(beta=0.5, lam=0.05))
    assert [float(r["E"]) for r in rows] == [r["E"] for r in ref]


def test_analyze(pipeline, tmp_path):
    assert run("analyze", "--ckpt", pipeline / "base.ckpt", "--data", pipeline / "data.jsonl",
               "--scores", pipeline / "scores.jsonl", "--out", tmp_path / "r.json", "--fraction", 0.25) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert sorted(rep["metrics"]) == sorted(["token_length", "avg_token_frequency", "unique_token_ratio",
                                             "intra_class_similarity"])
    assert rep["class_sizes"] == {"high_diff": 8, "low_diff": 8, "random": 8}


BENCH_SMALL = ["--clean", 16, "--dirty", 4, "--bootstrap", 16, "--heldout", 6, "--analysis-fraction", 0.25, *TINY]


def test_bench_schema_and_determinism(tmp_path):
    assert run("bench", "--seed", 3, "--out", tmp_path / "a.json", *BENCH_SMALL) == 0
    assert run("bench", "--seed", 3, "--out", tmp_path / "b.json", *BENCH_SMALL) == 0
    rep = json.loads((tmp_path / "a.json").read_text())
    assert {"auc", "loss_resofilter", "loss_random", "retain", "seed"} <= set(rep)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json.timings.json").exists()


def test_help_lists_defaults(capsys):
    assert run("bench", "--help") == 0
    assert "(default: 400)" in capsys.readouterr().out


def test_config_precedence(pipeline, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"clean": 5, "dirty": 2, "seed": 7}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "a.jsonl") == 0
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 7
    assert run("synth", "--config", cfg, "--dirty", 0, "--out", tmp_path / "b.jsonl") == 0
    assert len((tmp_path / "b.jsonl").read_text().splitlines()) == 5
    cfg.write_text(json.dumps({"clean": 5, "colour": "red"}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "c.jsonl") == 2
    assert not (tmp_path / "c.jsonl").exists()


def test_workers_env(monkeypatch, pipeline, tmp_path):
    monkeypatch.setenv("RESOFILTER_WORKERS", "4")
    assert run("score", "--ckpt", pipeline / "base.ckpt", "--data", pipeline / "data.jsonl",
               "--last-layers", 2, "--out", tmp_path / "env.jsonl") == 0
    assert (tmp_path / "env.jsonl").read_bytes() == (pipeline / "scores.jsonl").read_bytes()


def test_corrupt_inputs_exit_one(pipeline, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"instruction": "q"\n')
    assert run("filter", "--data", bad, "--scores", pipeline / "scores.jsonl", "--out", tmp_path / "o.jsonl") == 1
    assert run("score", "--ckpt", bad, "--data", pipeline / "data.jsonl", "--out", tmp_path / "s.jsonl") == 1
    assert not (tmp_path / "o.jsonl").exists() and not (tmp_path / "s.jsonl").exists()

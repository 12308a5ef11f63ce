import csv
import json
import subprocess
import sys

import pytest

from cpm import cli
from cpm.denoiser import DenoiserModel
from cpm.errors import ArgumentError, DataLeak, NoModelForRelation


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset plus one trained align primitive and a monolithic model."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--task", "pour", "--n", 12, "--seed", 7, "--out", root / "data") == 0
    for extra in (("--kind", "primitive", "--relation", "align"), ("--kind", "monolithic")):
        code = run(
            "train", "--task", "pour", "--data", root / "data" / "dataset.jsonl", "--seed", 7, *extra,
            "--epochs", 2, "--limit", 4, "--batch-size", 4, "--layers", 1, "--out", root / "models",
        )
        assert code == 0
    return root


def test_gen_counts_and_manifest(workspace):
    lines = (workspace / "data" / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 12
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["count"] == 12 and manifest["master_seed"] == 7
    assert sum(manifest["per_function_category"].values()) == 12
    assert json.loads(lines[0])["id"] == "pour-s7-000000"


def test_gen_is_byte_identical(tmp_path, workspace):
    assert run("gen", "--task", "pour", "--n", 12, "--seed", 7, "--out", tmp_path) == 0
    assert (tmp_path / "dataset.jsonl").read_bytes() == (workspace / "data" / "dataset.jsonl").read_bytes()


def test_gen_rejects_zero(tmp_path, capsys):
    assert run("gen", "--n", 0, "--out", tmp_path) == ArgumentError.exit_code == 2
    assert "--n" in capsys.readouterr().err


def test_seed_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("CPM_SEED", "11")
    assert run("gen", "--n", 2, "--seed", 7, "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["master_seed"] == 11


def test_config_file_mirrors_flags(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text(f"# quick run\ntask = place\nn = 3\nseed = 5\nout = {tmp_path / 'd'}\n")
    assert run("--config", cfg, "gen") == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["task"] == "place" and manifest["count"] == 3 and manifest["master_seed"] == 5
    # flags given on the command line win over the file
    assert run("--config", cfg, "gen", "--n", 1) == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["count"] == 1


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert run("--config", cfg, "gen") == 2


def test_bogus_relation_lists_valid_ones(workspace, capsys):
    code = run("train", "--data", workspace / "data" / "dataset.jsonl", "--relation", "bogus", "--out", workspace / "x")
    assert code == 2
    err = capsys.readouterr().err
    assert "align" in err and "facing-up" in err


def test_missing_dataset_is_io_error(tmp_path):
    assert run("train", "--data", tmp_path / "none.jsonl", "--relation", "align", "--out", tmp_path) == cli.IO_EXIT


def test_train_writes_checkpoint_and_loss(workspace):
    ckpt = workspace / "models" / "primitive-align" / "align.ckpt"
    model = DenoiserModel.load(ckpt)
    assert model.relation == "align"
    assert model.meta["master_seed"] == 7 and len(model.meta["trained_ids"]) == 4
    assert model.meta["run_config"]["relation"] == "align"
    assert (workspace / "models" / "monolithic" / "whole.ckpt").exists()
    with open(workspace / "models" / "primitive-align" / "loss.csv") as fh:
        assert next(csv.reader(fh)) == ["step", "loss"]


def test_sample_is_deterministic(workspace):
    outs = []
    for name in ("a.jsonl", "b.jsonl"):
        out = workspace / name
        code = run(
            "sample", "--task", "pour", "--data", workspace / "data" / "dataset.jsonl", "--models", workspace / "models",
            "--model-set", "individual:align", "--seed", 3, "--start", 10, "--count", 2, "--n", 2, "--out", out,
        )
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    recs = [json.loads(x) for x in outs[0].decode().splitlines()]
    assert len(recs) == 4 and "align" in recs[0]["scores"]


def test_sample_unknown_model_set(workspace):
    code = run("sample", "--data", workspace / "data" / "dataset.jsonl", "--models", workspace / "models", "--model-set", "cpm", "--out", workspace / "c.jsonl")
    assert code == NoModelForRelation.exit_code


def test_eval_then_report_reaggregates(workspace):
    out = workspace / "rep"
    code = run(
        "eval", "--task", "pour", "--data", workspace / "data" / "dataset.jsonl", "--models", workspace / "models",
        "--protocol", "instance", "--seed", 7, "--trials", 2, "--samples", 1, "--seeds", 2, "--out", out,
    )
    assert code == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert {r["model_set"] for r in rows} == {"individual:align", "monolithic"}
    assert run("report", "--trials", out / "trials.jsonl", "--out", workspace / "again.csv") == 0
    again = {r["model_set"]: r for r in csv.DictReader(open(workspace / "again.csv"))}
    for r in rows:
        assert again[r["model_set"]]["mean"] == r["mean"]
        assert again[r["model_set"]]["std"] == r["std"]


def test_eval_refuses_leaked_test_records(workspace):
    # the models were trained on the first four records of the instance split
    # under seed 7; a different split seed puts some of them on the test side
    leaked = None
    for seed in range(20):
        code = run(
            "eval", "--task", "pour", "--data", workspace / "data" / "dataset.jsonl", "--models", workspace / "models",
            "--model-sets", "individual:align", "--seed", seed, "--trials", 3, "--samples", 1, "--seeds", 1, "--out", workspace / "leak",
        )
        if code == DataLeak.exit_code:
            leaked = seed
            break
    assert leaked is not None


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cpm", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("cpm ")

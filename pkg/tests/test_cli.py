"""Command-line front end: outputs, exit codes and config precedence."""

from __future__ import annotations

import json
import subprocess
import sys
from argparse import Namespace

import pytest

from conftest import tiny_cfg
from moder import cli
from moder.config import parse_toml
from moder.errors import TrainingDivergenceError


@pytest.fixture()
def tiny_toml(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(tiny_cfg().to_toml())
    return p


@pytest.fixture()
def run_dir(tmp_path, tiny_toml):
    out = tmp_path / "run"
    assert cli.main(["run", "-c", str(tiny_toml), "-o", str(out)]) == cli.EXIT_OK
    return out


def test_run_writes_the_output_layout(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert names == {"config.lock", "hub.modr", "accuracy.csv", "metrics.json", "report.md", "logs"}
    assert {p.name for p in (run_dir / "logs").iterdir()} == {
        "run.log", "expert_loss.csv", "generator_loss.csv", "merges.jsonl"}
    assert not list(run_dir.rglob("*.tmp"))
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert {"faa", "ci_transfer", "timestamp", "zero_shot", "config_hash", "accuracy"} <= set(metrics)
    assert set(metrics["zero_shot"]) == {"faa", "ci_transfer"}
    lock = (run_dir / "config.lock").read_text()
    assert metrics["config_hash"] in lock
    assert "| faa |" in (run_dir / "report.md").read_text()


def test_config_lock_reproduces_the_run_hash(run_dir):
    lock = parse_toml((run_dir / "config.lock").read_text())
    assert lock.content_hash() == json.loads((run_dir / "metrics.json").read_text())["config_hash"]


def test_hub_inspect_and_verify(run_dir, tiny_toml, capsys):
    hub = str(run_dir / "hub.modr")
    assert cli.main(["hub", "inspect", hub]) == cli.EXIT_OK
    assert "6 entries" in capsys.readouterr().out
    assert cli.main(["hub", "verify", hub, "-c", str(tiny_toml)]) == cli.EXIT_OK
    assert capsys.readouterr().out.startswith("OK")


def test_verify_truncated_hub_exits_2(run_dir, tmp_path, capsys):
    bad = tmp_path / "trunc.modr"
    bad.write_bytes((run_dir / "hub.modr").read_bytes()[:500])
    assert cli.main(["hub", "verify", str(bad)]) == cli.EXIT_IO
    assert "truncated" in capsys.readouterr().err


def test_verify_wrong_encoder_prints_both_fingerprints(run_dir, tmp_path, capsys):
    other = tmp_path / "other.toml"
    other.write_text("[encoder]\nseed = 1\n")
    assert cli.main(["hub", "verify", str(run_dir / "hub.modr"), "-c", str(other)]) == cli.EXIT_IO
    err = capsys.readouterr().err
    assert "fingerprint mismatch" in err and err.count("0x") == 2


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[forge]\nk = 0\n")
    assert cli.main(["run", "-c", str(bad), "-o", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "forge" in capsys.readouterr().err
    assert cli.main(["run", "--set", "nosuch.key=1", "-o", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--set", "novalue", "-o", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["run", "-c", str(tmp_path / "missing.toml")]) == cli.EXIT_CONFIG


def test_divergence_exits_3(tmp_path, tiny_toml, monkeypatch):
    def boom(*a, **k):
        raise TrainingDivergenceError("loss became nan")

    monkeypatch.setattr(cli, "run_pipeline", boom)
    assert cli.main(["run", "-c", str(tiny_toml), "-o", str(tmp_path / "o")]) == cli.EXIT_DIVERGENCE


def test_flag_precedence(tmp_path, monkeypatch):
    p = tmp_path / "c.toml"
    p.write_text("seed = 3\nthreads = 1\n")
    args = Namespace(config=str(p), set=["forge.k=2", 'experts.loss="cross_entropy"'], seed=None,
                     threads=2, out=None)
    monkeypatch.setenv("MODER_SEED", "8")
    cfg = cli.resolve_config(args)
    assert (cfg.seed, cfg.threads, cfg.forge.k, cfg.experts.loss) == (8, 2, 2, "cross_entropy")
    args.seed = 12
    assert cli.resolve_config(args).seed == 12


def test_gen_world(tmp_path, tiny_toml):
    out = tmp_path / "w" / "world.json"
    assert cli.main(["gen-world", "-c", str(tiny_toml), str(out)]) == cli.EXIT_OK
    doc = json.loads(out.read_text())
    assert len(doc["classes"]) == 6 and len(doc["stream"]["tasks"]) == 3
    assert doc["config_hash"] == tiny_cfg().content_hash()


def test_ablate_writes_tables(tmp_path, tiny_toml):
    out = tmp_path / "abl"
    rc = cli.main(["ablate", "-c", str(tiny_toml), "-o", str(out), "--axis", "alpha", "--values", "0,0.5"])
    assert rc == cli.EXIT_OK
    md = (out / "ablation_alpha.md").read_text().splitlines()
    assert len(md) == 2 + 3 and "zero-shot" in md[-1]
    rows = json.loads((out / "ablation_alpha.json").read_text())
    assert [r["label"] for r in rows] == ["alpha=0", "alpha=0.5", "zero-shot"]
    assert rows[0]["accuracy"] == rows[2]["accuracy"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "moder", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("moder ")

import subprocess
import sys

import numpy as np
import pytest

from paretorl.cli import EXIT_CHECKPOINT, EXIT_CONFIG, main
from paretorl.trainer import metric_columns, read_metrics

from .conftest import TINY


def tiny_args(out_dir, **extra):
    sets = [f"{k}={v}" for k, v in {**TINY, "out_dir": out_dir, **extra}.items()]
    return [a for s in sets for a in ("--set", s)]


def test_pareto_demo_prints_front(tmp_path, capsys):
    f = tmp_path / "r.txt"
    f.write_text("# rows are samples\n1 1 1\n0 0 0\n0.5 0.5 0.5\n")
    assert main(["pareto-demo", str(f)]) == 0
    assert capsys.readouterr().out.strip() == "{0}"
    f.write_text("1 0\n0 1\n0.5 0.5\n0 0\n")
    assert main(["pareto-demo", str(f)]) == 0
    assert capsys.readouterr().out.strip() == "{0, 1, 2}"


@pytest.mark.parametrize("text", ["1 2\n3\n", "a b\n", ""])
def test_pareto_demo_bad_input(tmp_path, capsys, text):
    f = tmp_path / "r.txt"
    f.write_text(text)
    assert main(["pareto-demo", str(f)]) == EXIT_CONFIG
    assert "error: bad config or input" in capsys.readouterr().err


def test_invalid_config_exits_2(capsys):
    assert main(["gen-data", "--set", "clip_eps=1.5"]) == EXIT_CONFIG
    assert "clip_eps" in capsys.readouterr().err


def test_missing_artifacts_exit_3(tmp_path, capsys):
    assert main(["train-rl"] + tiny_args(tmp_path / "empty")) == EXIT_CHECKPOINT
    assert "error: checkpoint" in capsys.readouterr().err


def test_config_reference_via_module():
    out = subprocess.run([sys.executable, "-m", "paretorl", "--config-reference"], capture_output=True, text=True,
                         check=True).stdout
    assert "beta (float) = 0.1" in out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    for cmd in ("gen-data", "train-encoders", "train-scorer", "pretrain", "fit-normalizer"):
        assert main([cmd] + tiny_args(d)) == 0, cmd
    return d


def test_pipeline_files(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"data", "encoders.ckpt", "scorer.ckpt", "actor_pretrained.ckpt", "normalizer.ckpt"} <= names
    assert {p.name for p in (run_dir / "data").iterdir()} == {"paired.txt", "preferences.txt", "corpus.txt"}
    assert (run_dir / "encoders.ckpt").read_bytes()[:4] == b"PRLC"


def test_zero_iterations_writes_header_only(run_dir):
    assert main(["train-rl"] + tiny_args(run_dir, iterations=0)) == 0
    header, rows = read_metrics(run_dir / "metrics.csv")
    assert rows == []
    assert header["config_hash"] and len(header["normalizer_max"].split()) == 3
    assert (run_dir / "metrics.csv").read_text().splitlines()[-1] == ",".join(metric_columns(3))


def test_train_evaluate_ablate(run_dir, capsys):
    assert main(["train-rl"] + tiny_args(run_dir, iterations=2)) == 0
    _, rows = read_metrics(run_dir / "metrics.csv")
    assert [r["iteration"] for r in rows] == [1.0, 2.0]
    assert np.isfinite(rows[-1]["kl"])
    capsys.readouterr()
    assert main(["evaluate"] + tiny_args(run_dir)) == 0
    assert "match_rate=" in capsys.readouterr().out
    assert main(["ablate-tokens"] + tiny_args(run_dir)) == 0
    table = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in table] == ["token", "none", "adherence", "quality", "preference"]


def test_resume_extends_metrics(run_dir):
    assert main(["train-rl"] + tiny_args(run_dir, iterations=2)) == 0
    assert main(["train-rl", "--resume"] + tiny_args(run_dir, iterations=3)) == 0
    _, rows = read_metrics(run_dir / "metrics.csv")
    assert [r["iteration"] for r in rows] == [1.0, 2.0, 3.0]


def test_evaluate_missing_checkpoint_exits_3(run_dir, capsys):
    assert main(["evaluate", "--checkpoint", "nope.ckpt"] + tiny_args(run_dir)) == EXIT_CHECKPOINT

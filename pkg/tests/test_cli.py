import subprocess
import sys
from pathlib import Path

import pytest

from aqora import cli
from aqora.errors import TrainingError

QUICK = str(Path(__file__).resolve().parents[1] / "configs" / "quick.yaml")
PIPELINE = ("gen-data", "gen-workload", "train", "eval")


def run(*args):
    return cli.main(list(args))


@pytest.fixture(scope="module")
def quick_runs(tmp_path_factory):
    dirs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        for cmd in PIPELINE:
            assert run(cmd, "--config", QUICK, "--out", str(out)) == 0
        dirs.append(out)
    return dirs


def test_pipeline_outputs(quick_runs, capsys):
    out = quick_runs[0]
    for f in ("data/manifest.json", "workload/workload.json", "checkpoint.bin", "train_log.jsonl",
              "eval/records.csv", "eval/summary.csv"):
        assert (out / f).exists(), f
    summary = (out / "eval" / "summary.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in summary[1:]] == ["baseline-syntactic-aqe", "baseline-cbo-aqe", "aqora"]
    assert run("inspect-plan", "--config", QUICK, "--out", str(out), "--save", str(out / "plan.txt")) == 0
    text = (out / "plan.txt").read_text()
    assert "== syntactic plan" in text and "== cbo plan" in text and "== aqora executed plan" in text


def test_runs_are_byte_identical(quick_runs):
    a, b = quick_runs
    for f in ("checkpoint.bin", "train_log.jsonl", "eval/records.csv", "eval/summary.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_method_filter_and_resume(quick_runs, tmp_path, capsys):
    out = quick_runs[0]
    assert run("eval", "--config", QUICK, "--out", str(out), "--method", "baseline-cbo-aqe",
               "--checkpoint", str(tmp_path / "none.bin")) == 0
    rows = (out / "eval" / "records.csv").read_text().splitlines()[1:]
    assert rows and all(",baseline-cbo-aqe," in r for r in rows)
    # training again with a finished checkpoint is a no-op
    before = (out / "checkpoint.bin").read_bytes()
    assert run("train", "--config", QUICK, "--out", str(out)) == 0
    assert (out / "checkpoint.bin").read_bytes() == before


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert run("gen-data", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)) == 2
    assert "not found" in capsys.readouterr().err
    assert run("eval", "--config", QUICK, "--out", str(tmp_path / "empty")) == 3
    assert run("inspect-plan", "--config", QUICK, "--out", str(tmp_path / "empty")) == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {episodes: -3}\n")
    assert run("train", "--config", str(bad), "--out", str(tmp_path)) == 2

    def boom(self, *a, **k):
        raise TrainingError("actor loss is not finite (nan)", {"episode": 3})

    out = tmp_path / "t"
    assert run("gen-data", "--config", QUICK, "--out", str(out)) == 0
    assert run("gen-workload", "--config", QUICK, "--out", str(out)) == 0
    monkeypatch.setattr(cli.Trainer, "run", boom)
    assert run("train", "--config", QUICK, "--out", str(out)) == 4
    assert '"episode": 3' in capsys.readouterr().err


def test_usage_errors_and_module_entry():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        run("train", "--config", QUICK, "--curriculum", "maybe")
    r = subprocess.run([sys.executable, "-m", "aqora", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "gen-workload", "train", "eval", "inspect-plan"):
        assert cmd in r.stdout

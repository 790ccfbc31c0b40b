"""Command-line behavior: flags, output, exit codes."""

import os
import subprocess
import sys

import pytest

from ernet import cli
from ernet.data import read_ppm


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("cli") / "data")
    code = cli.main(["synth", "--out", root, "--classes", "3",
                     "--per-class", "10", "--size", "64x64", "--seed", "1"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(tree, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli_out"))
    code = cli.main(["train", "--data", tree, "--out", out,
                     "--variant", "scfcnet", "--input", "64x64x3",
                     "--epochs", "2", "--iters", "2", "--batch", "6",
                     "--lr0", "0.002", "--seed", "3"])
    assert code == 0
    return os.path.join(out, "scfcnet.ernet")


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    out = capsys.readouterr().out
    assert "usage" in out
    for command in ("synth", "train", "eval", "bench", "cam", "serve"):
        assert command in out


def test_subcommand_help_exits_zero(capsys):
    assert cli.main(["train", "--help"]) == 0
    assert "--variant" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert cli.main([]) == 1
    assert cli.main(["synth", "--bogus", "x"]) == 1
    assert cli.main(["not-a-command"]) == 1
    assert cli.main(["eval", "--model", "m"]) == 1  # --data is required
    err = capsys.readouterr().err
    assert "error" in err


def test_bad_argument_exits_one(tmp_path, capsys):
    code = cli.main(["synth", "--out", str(tmp_path / "x"), "--size", "64"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_synth_reports_counts(tmp_path, capsys):
    code = cli.main(["synth", "--out", str(tmp_path / "t"), "--classes", "2",
                     "--per-class", "3", "--size", "64x64"])
    assert code == 0
    assert "wrote 6 images" in capsys.readouterr().out


def test_train_prints_history_and_paths(tree, tmp_path, capsys):
    code = cli.main(["train", "--data", tree, "--out", str(tmp_path),
                     "--variant", "scfcnet", "--input", "64x64x3",
                     "--epochs", "1", "--iters", "1", "--batch", "4",
                     "--seed", "5"])
    assert code == 0
    out = capsys.readouterr().out
    assert "train_loss" in out
    assert "model:" in out
    assert "best epoch" in out
    assert os.path.isfile(os.path.join(str(tmp_path), "scfcnet.ernet"))


def test_eval_table_and_kv(tree, trained, capsys):
    code = cli.main(["eval", "--model", trained, "--data", tree, "--seed", "3"])
    assert code == 0
    assert "avg_acc" in capsys.readouterr().out
    code = cli.main(["eval", "--model", trained, "--data", tree, "--seed", "3",
                     "--format", "kv"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert all("=" in line for line in lines)
    assert any(line.startswith("confusion_0=") for line in lines)


def test_eval_missing_model_exits_two(tree, tmp_path, capsys):
    code = cli.main(["eval", "--model", str(tmp_path / "no.ernet"),
                     "--data", tree])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_bench_prints_rows(capsys):
    code = cli.main(["bench", "--models", "scfcnet", "--input", "64x64x3",
                     "--warmup", "0", "--runs", "10", "--baseline", "scfcnet"])
    assert code == 0
    out = capsys.readouterr().out
    assert "speedup" in out
    assert "machine:" in out


def test_bench_unknown_baseline_exits_one(capsys):
    code = cli.main(["bench", "--models", "scfcnet", "--input", "64x64x3",
                     "--runs", "10", "--baseline", "basenet"])
    assert code == 1


def test_cam_writes_overlay(tree, trained, tmp_path, capsys):
    img = os.path.join(tree, "class_00", "img_0001.ppm")
    code = cli.main(["cam", "--model", trained, "--images", img,
                     "--out", str(tmp_path), "--alpha", "0.4"])
    assert code == 0
    assert "->" in capsys.readouterr().out
    overlay = os.path.join(str(tmp_path), "img_0001_cam.ppm")
    assert read_ppm(overlay).shape == (64, 64, 3)


def test_training_is_reproducible_from_the_cli(tree, tmp_path):
    paths = []
    for name in ("one", "two"):
        out = str(tmp_path / name)
        code = cli.main(["train", "--data", tree, "--out", out,
                         "--variant", "scfcnet", "--input", "64x64x3",
                         "--epochs", "1", "--iters", "1", "--batch", "4",
                         "--seed", "7"])
        assert code == 0
        paths.append(os.path.join(out, "scfcnet.ernet"))
    with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
        assert a.read() == b.read()


def test_unreachable_server_exits_two(capsys):
    code = cli.main(["--server", "http://127.0.0.1:9", "eval",
                     "--model", "m", "--data", "d"])
    assert code == 2
    assert "request failed" in capsys.readouterr().err


def test_module_entrypoint():
    proc = subprocess.run([sys.executable, "-m", "ernet.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "usage" in proc.stdout

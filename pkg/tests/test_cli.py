import subprocess
import sys

import pytest

from stad.cli import EXIT_DEPENDENCY, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from stad.data import read_header


def test_unknown_flag_is_usage_error(capsys):
    assert main(["collect", "--bogus"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_missing_subcommand():
    assert main([]) == EXIT_USAGE


def test_bad_config_value_is_usage_error(tmp_path, capsys):
    assert main(["collect", "--run-dir", str(tmp_path), "--episodes", "lots"]) == EXIT_USAGE
    assert "episodes" in capsys.readouterr().err


def test_missing_dependency_exit_code(tmp_path, capsys):
    assert main(["train-ctrl", "--run-dir", str(tmp_path)]) == EXIT_DEPENDENCY
    err = capsys.readouterr().err
    assert "vae/vae.ckpt" in err and "stad train-vae" in err


def test_runtime_failure_exit_code(tmp_path, capsys):
    (tmp_path / "ctrl").mkdir()
    (tmp_path / "eval").mkdir()
    (tmp_path / "ctrl" / "stats.csv").write_text("generation,min,mean,max,best_so_far\n")
    (tmp_path / "eval" / "summary.txt").write_text("Episodes: 0\n")
    assert main(["report", "--run-dir", str(tmp_path)]) == EXIT_RUNTIME
    assert "runtime failure" in capsys.readouterr().err
    assert not (tmp_path / "report").exists()


def test_collect_writes_header(tmp_path, capsys):
    rc = main(["collect", "--run-dir", str(tmp_path), "--episodes", "2", "--frames", "20",
               "--obs-height", "16", "--obs-width", "16"])
    assert rc == EXIT_OK
    assert read_header(tmp_path / "collect" / "dataset.stad") == {"height": 16, "width": 16, "episodes": 2,
                                                                  "frames": 20, "stride": 4}
    assert "collect: done" in capsys.readouterr().out
    assert main(["collect", "--run-dir", str(tmp_path), "--episodes", "2", "--frames", "20",
                 "--obs-height", "16", "--obs-width", "16"]) == EXIT_OK
    assert "skipped (up to date)" in capsys.readouterr().out


def test_runs_dir_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("STAD_RUNS_DIR", str(tmp_path))
    assert main(["collect", "--name", "named", "--episodes", "1", "--frames", "6",
                 "--obs-height", "16", "--obs-width", "16"]) == EXIT_OK
    assert (tmp_path / "named" / "collect" / "dataset.stad").is_file()


@pytest.mark.parametrize("args", [["--help"], ["collect", "--help"]])
def test_help(args, capsys):
    assert main(args) == EXIT_OK
    assert "usage" in capsys.readouterr().out


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stad.cli", "eval", "--run-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_DEPENDENCY

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stad.config import ConfigError, PipelineConfig, load_config, parse_config_text
from stad.data import read_header
from stad.pipeline import STAGES, DependencyError, Pipeline, default_run_dir
from stad.report import ReportError, budget_rows, budget_table, emit_report, line_chart_svg

TINY = {
    "obs_height": 16, "obs_width": 16, "channels": "4,8", "z_dim": 4, "h_dim": 6, "mixtures": 2,
    "episodes": 3, "frames": 12, "vae_epochs": 1, "vae_batch": 16, "rnn_epochs": 1, "rnn_batch": 2,
    "generations": 2, "population": 4, "eval_rollouts": 2, "frame_limit": 30,
}


def tiny_config(**kw):
    return load_config(overrides={**TINY, **kw})


# config -----------------------------------------------------------------------------


def test_defaults_validate():
    cfg = load_config()
    assert (cfg.episodes, cfg.generations, cfg.population) == (1000, 600, 8)
    assert cfg.effective_beta == 1 / 4096


def test_text_round_trip():
    cfg = tiny_config(beta="0.125", dual_branch=True, sigma0=0.3)
    back = parse_config_text(cfg.to_text())
    assert back == cfg


def test_resolved_pins_beta():
    assert PipelineConfig(obs_height=16, obs_width=16).resolved().beta == repr(1 / 256)


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("# comment\nepisodes = 7\nz_only = yes  # trailing\nvariant = DiffOutput\n")
    cfg = load_config(p, {"episodes": "9"})
    assert cfg.episodes == 9 and cfg.z_only and cfg.variant == "DiffOutput"


@pytest.mark.parametrize("text,match", [
    ("episodes = many\n", "bad value"),
    ("colour = red\n", "unknown config key"),
    ("just words\n", "expected 'key = value'"),
    ("variant = Sideways\n", "unknown variant"),
    ("obs_height = 20\n", "divisible"),
    ("frames = 3\n", "must exceed stride"),
    ("beta = -1\n", "beta"),
    ("population = 1\n", "population"),
])
def test_config_errors(tmp_path, text, match):
    p = tmp_path / "c.conf"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.conf")


def test_runs_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("STAD_RUNS_DIR", str(tmp_path))
    assert default_run_dir("x") == tmp_path / "x"
    monkeypatch.delenv("STAD_RUNS_DIR")
    assert str(default_run_dir("x")) == "runs/x"


# report -------------------------------------------------------------------------------


def test_default_budget_lines():
    lines = budget_table(1000, 600, 8).splitlines()
    assert "Rollouts: 1000 (10%)" in lines
    assert "Number of Generations: 600 (30%)" in lines
    assert "Agents per Generation: 8 (12.5%)" in lines
    assert "Total Agents Evaluated: 4800 (3.75%)" in lines


@given(st.integers(1, 5000), st.integers(2, 200))
def test_total_agents_is_product(g, lam):
    assert budget_rows(10, g, lam)[3].value == g * lam


def test_svg_chart_well_formed():
    import xml.etree.ElementTree as ET

    root = ET.fromstring(line_chart_svg([0, 1, 2], [1.0, -3.0, 7.5], "t", "x", "y"))
    assert root.tag.endswith("svg")


def _stats(path, rows):
    path.write_text("generation,min,mean,max,best_so_far\n" + "".join(f"{r}\n" for r in rows))


def test_emit_report_bundle(tmp_path):
    _stats(tmp_path / "stats.csv", ["0,-1,0,1,1", "1,0,1,2,2"])
    (tmp_path / "summary.txt").write_text("Episodes: 2\n")
    files = emit_report(tmp_path / "stats.csv", tmp_path / "summary.txt", tmp_path / "report", 1000, 600, 8)
    names = sorted(p.name for p in files)
    assert names == ["budget.txt", "report.txt", "reward_max.svg", "reward_mean.svg", "reward_min.svg"]
    assert "Total Agents Evaluated: 4800 (3.75%)" in (tmp_path / "report" / "report.txt").read_text()


def test_empty_stats_leaves_no_bundle(tmp_path):
    _stats(tmp_path / "stats.csv", [])
    (tmp_path / "summary.txt").write_text("Episodes: 2\n")
    with pytest.raises(ReportError):
        emit_report(tmp_path / "stats.csv", tmp_path / "summary.txt", tmp_path / "report", 1, 1, 2)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["stats.csv", "summary.txt"]


def test_missing_report_inputs_named(tmp_path):
    with pytest.raises(ReportError, match="stats.csv"):
        emit_report(tmp_path / "stats.csv", tmp_path / "summary.txt", tmp_path / "r", 1, 1, 2)


# stages -------------------------------------------------------------------------------------


def test_stage_without_inputs_names_artifact(tmp_path):
    with pytest.raises(DependencyError, match=r"vae/vae\.ckpt.*stad train-vae"):
        Pipeline(tiny_config(), tmp_path).run_stage("train-ctrl")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    results = Pipeline(tiny_config(), run).run_all()
    return run, results


def test_all_stages_recorded(tiny_run):
    run, results = tiny_run
    assert [r.stage for r in results] == list(STAGES) and not any(r.skipped for r in results)
    manifest = json.loads((run / "manifest.json").read_text())
    assert [s["stage"] for s in manifest["stages"]] == list(STAGES)
    for s in manifest["stages"]:
        assert {"config_hash", "inputs", "outputs", "wall_clock_seconds", "commit"} <= set(s)


def test_stage_artifacts(tiny_run):
    run, _ = tiny_run
    assert read_header(run / "collect" / "dataset.stad") == {"height": 16, "width": 16, "episodes": 3,
                                                             "frames": 12, "stride": 4}
    for rel in ("vae/vae.ckpt", "vae/vae_curve.csv", "rnn/rnn.ckpt", "rnn/rnn_curve.csv", "ctrl/stats.csv",
                "ctrl/cma_snapshot.ckpt", "eval/summary.txt", "eval/episodes.csv", "report/budget.txt"):
        assert (run / rel).is_file(), rel
    echoed = parse_config_text((run / "ctrl" / "config.txt").read_text())
    assert echoed == tiny_config().resolved()


def test_rerun_skips_unchanged(tiny_run):
    run, first = tiny_run
    again = Pipeline(tiny_config(), run).run_all()
    assert all(r.skipped for r in again)
    assert [r.manifest for r in again] == [r.manifest for r in first]


def test_changed_key_reruns_downstream_only(tiny_run, tmp_path):
    import shutil

    run, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(run, copy)
    results = Pipeline(tiny_config(eval_rollouts=3), copy).run_all()
    skipped = {r.stage: r.skipped for r in results}
    assert skipped == {"collect": True, "train-vae": True, "train-rnn": True, "train-ctrl": True,
                       "eval": False, "report": False}
    assert "Episodes: 3" in (copy / "eval" / "summary.txt").read_text()


def test_tampered_output_reruns(tiny_run, tmp_path):
    import shutil

    run, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(run, copy)
    (copy / "eval" / "summary.txt").write_text("edited\n")
    res = Pipeline(tiny_config(), copy).run_stage("eval")
    assert not res.skipped
    assert (copy / "eval" / "summary.txt").read_bytes() == (run / "eval" / "summary.txt").read_bytes()


def test_sampled_targets_and_window(tmp_path):
    cfg = tiny_config(rnn_sampled_targets=True, rnn_window=4)
    p = Pipeline(cfg, tmp_path)
    for stage in ("collect", "train-vae", "train-rnn"):
        p.run_stage(stage)
    curve = (tmp_path / "rnn" / "rnn_curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,train_nll,heldout_nll" and len(curve) == 2
    assert np.isfinite(float(curve[1].split(",")[1]))

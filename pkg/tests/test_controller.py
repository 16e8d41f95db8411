import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stad.controller import (
    SOLVED_THRESHOLD,
    ControllerConfig,
    ControllerConfigError,
    ControllerParams,
    FinalReport,
    act,
    evaluate_final,
    evaluate_fitness,
    final_eval_seeds,
    generation_track_seeds,
    load_genome,
    rollout,
    top_count,
    train_controller,
)
from stad.mdn import MDNRNN
from stad.sim import ConstantPolicy, SimConfig, run_episode
from stad.vae import DiffVAE, VaeConfig

SIM = SimConfig(obs_height=16, obs_width=16, frame_limit=60)


@pytest.fixture(scope="module")
def models():
    vae = DiffVAE(VaeConfig("DiffInputOutput", 16, 16, z_dim=4, channels=(4, 8)), seed=0)
    rnn = MDNRNN(z_dim=4, action_dim=3, hidden=6, mixtures=2, seed=0)
    return vae, rnn


def genome_len(models, z_only=False):
    vae, rnn = models
    return ControllerParams.genome_length(4 + (0 if z_only else 6))


# act / genome ---------------------------------------------------------------------


def test_zero_params_action():
    np.testing.assert_array_equal(act(ControllerParams.zeros(5), np.zeros(3), np.zeros(2)), [0.0, 0.5, 0.5])


def test_reference_genome_length():
    assert ControllerParams.genome_length(32 + 128) == 483


def test_genome_round_trip_exact():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        g = rng.normal(scale=10, size=ControllerParams.genome_length(7))
        np.testing.assert_array_equal(ControllerParams.from_genome(g, 7).to_genome(), g)


def test_genome_layout():
    g = np.arange(9.0)
    p = ControllerParams.from_genome(g, 2)
    np.testing.assert_array_equal(p.weight, [[0, 1], [2, 3], [4, 5]])
    np.testing.assert_array_equal(p.bias, [6, 7, 8])


@settings(max_examples=50)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_action_bounds_extreme(a, b, c):
    p = ControllerParams(np.zeros((3, 1)), np.array([a, b, c]))
    out = act(p, np.zeros(1))
    assert -1 <= out[0] <= 1 and 0 <= out[1] <= 1 and 0 <= out[2] <= 1


def test_dimension_mismatch_errors():
    with pytest.raises(ControllerConfigError):
        act(ControllerParams.zeros(4), np.zeros(3))
    with pytest.raises(ControllerConfigError):
        ControllerParams.from_genome(np.zeros(10), 2)


# fitness ------------------------------------------------------------------------


def test_zero_genome_matches_constant_policy(models):
    vae, rnn = models
    g = np.zeros(genome_len(models))
    a = evaluate_fitness(g, vae, rnn, [5], SIM)
    b = evaluate_fitness(g, vae, rnn, [5], SIM)
    ref = run_episode(ConstantPolicy(0.0, 0.5, 0.5), 5, frame_limit=60, config=SIM, keep_frames=False).total
    assert a == b == ref


def test_fitness_is_mean_over_seeds(models):
    vae, rnn = models
    g = np.random.default_rng(1).normal(scale=0.5, size=genome_len(models))
    singles = [evaluate_fitness(g, vae, rnn, [s], SIM) for s in (1, 2, 3)]
    assert evaluate_fitness(g, vae, rnn, [1, 2, 3], SIM) == pytest.approx(math.fsum(singles) / 3, abs=1e-12)


def test_rollout_deterministic(models):
    vae, rnn = models
    p = ControllerParams.from_genome(np.random.default_rng(2).normal(size=genome_len(models)), 10)
    assert rollout(p, vae, rnn, 4, SIM) == rollout(p, vae, rnn, 4, SIM)


def test_z_only_mode(models):
    vae, rnn = models
    g = np.random.default_rng(3).normal(size=genome_len(models, z_only=True))
    assert np.isfinite(evaluate_fitness(g, vae, rnn, [0], SIM, z_only=True))
    with pytest.raises(ControllerConfigError):
        evaluate_fitness(g, vae, rnn, [0], SIM)


def test_tuned_genome_beats_zero_genome(models):
    """Gentle constant throttle, no brake: collects tiles without leaving the field."""
    vae, rnn = models
    sim = SimConfig(obs_height=16, obs_width=16, frame_limit=300)
    tuned = np.zeros(genome_len(models))
    tuned[-2], tuned[-1] = math.log(0.3 / 0.7), -20.0
    seeds = [0, 1, 2]
    assert evaluate_fitness(tuned, vae, rnn, seeds, sim) > evaluate_fitness(np.zeros_like(tuned), vae, rnn, seeds, sim)


def test_model_mismatch_errors(models):
    vae, rnn = models
    g = np.zeros(genome_len(models))
    with pytest.raises(ControllerConfigError, match="VAE expects"):
        evaluate_fitness(g, vae, rnn, [0], SimConfig(obs_height=32, obs_width=32))
    other = MDNRNN(z_dim=5, action_dim=3, hidden=6, mixtures=2)
    with pytest.raises(ControllerConfigError, match="z_dim"):
        evaluate_fitness(g, vae, other, [0], SIM)


# training --------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ControllerConfigError):
        ControllerConfig(population=1)
    with pytest.raises(ControllerConfigError):
        ControllerConfig(sigma0=0)


def test_track_seeds_fresh_per_generation():
    a, b = generation_track_seeds(0, 0, 2), generation_track_seeds(0, 1, 2)
    assert len(set(a + b)) == 4
    assert generation_track_seeds(0, 3, 2) == generation_track_seeds(0, 3, 2)


@pytest.fixture(scope="module")
def trained(models, tmp_path_factory):
    vae, rnn = models
    out = tmp_path_factory.mktemp("ctrl")
    cfg = ControllerConfig(generations=4, population=4, sigma0=0.5, seed=1, snapshot_every=2)
    return train_controller(vae, rnn, cfg, sim=SIM, out_dir=out), out, cfg


def test_stats_invariants(trained):
    result, out, _ = trained
    assert [s.generation for s in result.stats] == [0, 1, 2, 3]
    best = [s.best_so_far for s in result.stats]
    assert all(b >= a for a, b in zip(best, best[1:]))
    for s in result.stats:
        assert s.min <= s.mean <= s.max <= s.best_so_far
    rows = list(csv.reader(open(out / "stats.csv")))
    assert rows[0] == ["generation", "min", "mean", "max", "best_so_far"] and len(rows) == 5
    trace = list(csv.reader(open(out / "cma_trace.csv")))
    assert trace[0] == ["generation", "sigma", "best_fitness", "median_fitness", "worst_fitness", "condition_number"]


def test_best_genome_persisted(trained, models):
    result, out, _ = trained
    params, z_only = load_genome(out / "best_controller.ckpt")
    assert not z_only
    np.testing.assert_array_equal(params.to_genome(), result.best_genome)
    assert result.best_reward == max(s.max for s in result.stats) == result.stats[-1].best_so_far
    # the stored genome reproduces its reward on the generation's tracks
    g = next(s.generation for s in result.stats if s.max == result.best_reward)
    vae, rnn = models
    seeds = generation_track_seeds(trained[2].seed, g, 1)
    assert evaluate_fitness(result.best_genome, vae, rnn, seeds, SIM) == result.best_reward


def test_training_deterministic(trained, models):
    vae, rnn = models
    again = train_controller(vae, rnn, trained[2], sim=SIM)
    assert [s.as_row() for s in again.stats] == [s.as_row() for s in trained[0].stats]


def test_resume_matches_uninterrupted(trained, models, tmp_path):
    vae, rnn = models
    cfg = trained[2]
    half = ControllerConfig(generations=2, population=4, sigma0=0.5, seed=1, snapshot_every=2)
    train_controller(vae, rnn, half, sim=SIM, out_dir=tmp_path)
    resumed = train_controller(vae, rnn, cfg, sim=SIM, out_dir=tmp_path, resume=True)
    assert [s.as_row() for s in resumed.stats] == [s.as_row() for s in trained[0].stats]
    np.testing.assert_array_equal(resumed.best_genome, trained[0].best_genome)


def test_resume_shape_mismatch(trained, models):
    vae, rnn = models
    cfg = ControllerConfig(generations=5, population=6, seed=1)
    with pytest.raises(ControllerConfigError, match="snapshot"):
        train_controller(vae, rnn, cfg, sim=SIM, out_dir=trained[1], resume=True)


def test_missing_models_fail_before_evaluation(models):
    vae, _ = models
    bad = MDNRNN(z_dim=4, action_dim=2, hidden=6, mixtures=2)
    with pytest.raises(ControllerConfigError, match="action_dim"):
        train_controller(vae, bad, ControllerConfig(generations=1, population=2), sim=SIM)


def test_parallel_training_matches_serial(models):
    vae, rnn = models
    cfg = ControllerConfig(generations=2, population=4, sigma0=0.5, seed=2)
    a = train_controller(vae, rnn, cfg, sim=SIM)
    b = train_controller(vae, rnn, cfg, sim=SIM, workers=2)
    assert [s.as_row() for s in a.stats] == [s.as_row() for s in b.stats]


# final evaluation --------------------------------------------------------------------


def test_identical_seeds_trimmed_equals_mean(models):
    vae, rnn = models
    p = ControllerParams.from_genome(np.random.default_rng(4).normal(size=genome_len(models)), 10)
    rep = evaluate_final(p, vae, rnn, [7] * 10, SIM)
    assert np.all(rep.rewards == rep.rewards[0])
    assert rep.top_mean == rep.mean


def test_final_report_deterministic(models, tmp_path):
    vae, rnn = models
    p = ControllerParams.from_genome(np.random.default_rng(5).normal(size=genome_len(models)), 10)
    seeds = final_eval_seeds(0, 4)
    a = evaluate_final(p, vae, rnn, seeds, SIM)
    b = evaluate_final(p, vae, rnn, seeds, SIM)
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for name in ("summary.txt", "episodes.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_solved_flag_and_top_count():
    assert top_count(100) == 90 and top_count(10) == 9 and top_count(1) == 1
    rewards = np.array([950.0] * 90 + [850.0] * 10)
    rep = FinalReport(rewards, list(range(100)), 90)
    assert rep.mean == 940.0 and rep.top_mean == 950.0 and rep.solved
    low = FinalReport(np.array([950.0] * 50 + [849.0] * 50), list(range(100)), 90)
    assert low.mean < SOLVED_THRESHOLD and not low.solved
    assert "Solved (mean >= 900): no" in low.summary_lines()
    assert FinalReport(np.full(4, 900.0), [0, 1, 2, 3], 4).solved

"""Acceptance suite: one test per primary criterion, run at its stated tolerance.

The end of the pytest run prints one PASS/FAIL line per criterion (see conftest.py).
"""

import math
import time

import numpy as np
import pytest

from oracles import mdn_gradient_error, vae_gradient_error
from stad.cli import main
from stad.cma import minimize
from stad.config import load_config
from stad.mdn import MDNRNN, MixtureParams, mdn_nll, train_rnn, two_mode_sequences, two_mode_true_nll
from stad.nn import LSTM, Conv2d, ConvTranspose2d, Dense, Flatten, ReLU, Reshape, Sigmoid, Tanh, grad_check
from stad.nn import gaussian_kl, mse, numeric_grad, relative_error
from stad.pipeline import Pipeline
from stad.report import budget_table
from stad.sim import generate_track, scripted_lap
from stad.util import read_csv
from stad.vae import DiffVAE, PairSource, VaeConfig, Variant, diff_correlation, evaluate_vae, moving_square_corpus
from stad.vae import train_vae

GRAD_TOL = 1e-4
SEEDS10 = range(10)

# toy end-to-end configuration: 16x16 frames, z=8, h=16, E=20, T=50, G=30, lambda=8
TOY = {
    "obs_height": 16, "obs_width": 16, "z_dim": 8, "h_dim": 16, "episodes": 20, "frames": 50,
    "generations": 30, "population": 8, "sigma0": 0.5, "rollouts_per_agent": 3, "frame_limit": 300,
    "eval_rollouts": 10, "vae_epochs": 10, "rnn_epochs": 20,
}


@pytest.fixture
def criterion(record_property):
    def declare(number, title):
        record_property("criterion", number)
        record_property("title", title)
        return lambda detail: record_property("detail", detail)
    return declare


# 1 -------------------------------------------------------------------------------------


def test_reward_contract(criterion):
    detail = criterion(1, "scripted full-lap reward at frames 1000 and 702")
    track = generate_track(0)
    full = scripted_lap(track, 1000).total
    best = scripted_lap(track, 702).total
    detail(f"F=1000 -> {full!r}, F=702 -> {best!r}")
    assert abs(full - 900.0) <= 1e-9
    assert abs(best - 929.8) <= 0.05


# 2 -------------------------------------------------------------------------------------


def test_budget_table(criterion, tmp_path):
    detail = criterion(2, "default-config budget table")
    cfg = load_config()
    stats = tmp_path / "ctrl" / "stats.csv"
    stats.parent.mkdir()
    stats.write_text("generation,min,mean,max,best_so_far\n0,-30,-30,-30,-30\n")
    (tmp_path / "eval").mkdir()
    (tmp_path / "eval" / "summary.txt").write_text("Episodes: 100\n")
    Pipeline(cfg, tmp_path).run_stage("report")
    lines = (tmp_path / "report" / "budget.txt").read_text().splitlines()
    want = ["Rollouts: 1000 (10%)", "Number of Generations: 600 (30%)", "Agents per Generation: 8 (12.5%)",
            "Total Agents Evaluated: 4800 (3.75%)"]
    detail("; ".join(line for line in lines if "(" in line))
    assert all(w in lines for w in want)
    assert budget_table(cfg.episodes, cfg.generations, cfg.population).splitlines()[-4:] == want


# 3 -------------------------------------------------------------------------------------


LAYERS = {
    "dense": (lambda r: Dense(4, 3, rng=r), (2, 4)),
    "conv": (lambda r: Conv2d(2, 3, kernel_size=3, stride=2, padding=1, rng=r), (2, 2, 6, 6)),
    "deconv": (lambda r: ConvTranspose2d(3, 2, kernel_size=3, stride=2, padding=1, output_padding=1, rng=r),
               (2, 3, 3, 3)),
    "lstm": (lambda r: LSTM(3, 4, rng=r), (2, 5, 3)),
    "relu": (lambda r: ReLU(), (3, 6)),
    "tanh": (lambda r: Tanh(), (3, 6)),
    "sigmoid": (lambda r: Sigmoid(), (3, 6)),
    "flatten": (lambda r: Flatten(), (2, 2, 3, 3)),
    "reshape": (lambda r: Reshape((2, 3)), (2, 6)),
}


def _loss_errors(seed):
    r = np.random.default_rng(seed)
    pred, target = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    e_mse = relative_error(mse(pred, target)[1], numeric_grad(lambda: mse(pred, target)[0], pred))
    mean, logvar = r.normal(size=(2, 3)), r.normal(scale=0.5, size=(2, 3))
    _, dm, dl = gaussian_kl(mean, logvar)
    e_kl = max(relative_error(dm, numeric_grad(lambda: gaussian_kl(mean, logvar)[0], mean)),
               relative_error(dl, numeric_grad(lambda: gaussian_kl(mean, logvar)[0], logvar)))
    return e_mse, e_kl


def test_gradient_suite(criterion):
    detail = criterion(3, "finite-difference gradients, all layers and losses, 10 seeds")
    start = time.perf_counter()
    worst = {}
    for seed in SEEDS10:
        for name, (make, shape) in LAYERS.items():
            err = grad_check(make(np.random.default_rng(seed)), shape, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
        e_mse, e_kl = _loss_errors(seed)
        worst["mse"] = max(worst.get("mse", 0.0), e_mse)
        worst["kl"] = max(worst.get("kl", 0.0), e_kl)
        for v in Variant:
            worst[f"vae:{v.value}"] = max(worst.get(f"vae:{v.value}", 0.0), vae_gradient_error(v, seed))
        worst["mdn_nll"] = max(worst.get("mdn_nll", 0.0), mdn_gradient_error(seed))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    detail(f"max relative error {worst[top]:.2e} ({top}) over {len(worst)} checks x 10 seeds in {elapsed:.0f}s")
    assert all(v < GRAD_TOL for v in worst.values()), worst


# 4 -------------------------------------------------------------------------------------


def _rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


def test_cma_convergence(criterion):
    detail = criterion(4, "CMA-ES sphere d=10 and Rosenbrock d=5 over 20 seeds")
    sphere_ok, sphere_evals, rosen_ok, rosen_evals = 0, [], 0, []
    for seed in range(20):
        best, _, state, _ = minimize(lambda x: float(x @ x), np.ones(10), 0.5, seed=seed,
                                     max_evals=12_000, target=1e-10)
        sphere_ok += best < 1e-10
        sphere_evals.append(state.evaluations)
        best, _, state, _ = minimize(_rosenbrock, np.zeros(5), 0.3, seed=seed, max_evals=50_000, target=1e-6)
        rosen_ok += best < 1e-6
        rosen_evals.append(state.evaluations)
    detail(f"sphere {sphere_ok}/20 (max {max(sphere_evals)} evals), "
           f"Rosenbrock {rosen_ok}/20 (max {max(rosen_evals)} evals)")
    assert sphere_ok == 20
    assert rosen_ok >= 18


# 5 -------------------------------------------------------------------------------------


def test_mdn_analytic_case(criterion):
    detail = criterion(5, "MDN single-Gaussian NLL and permutation invariance")
    mix = MixtureParams(np.zeros(1), np.array([[0.25]]), np.zeros((1, 1)))
    value = mdn_nll(mix, np.array([0.25]))
    err = abs(value - 0.5 * math.log(2 * math.pi))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        k, d = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        m = MixtureParams(rng.normal(size=k), rng.normal(size=(k, d)), rng.normal(scale=0.5, size=(k, d)))
        target = rng.normal(size=d)
        worst = max(worst, abs(mdn_nll(m.permuted(rng.permutation(k)), target) - mdn_nll(m, target)))
    detail(f"|NLL - ln(2pi)/2| = {err:.1e}; max permutation change {worst:.1e} over 100 mixtures")
    assert err <= 1e-12
    assert worst <= 1e-12


# 6 -------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def square_corpus():
    return moving_square_corpus(4000, seed=0), moving_square_corpus(500, seed=1)


def _train_until(variant, corpus, cap=5000, every=250):
    (train, held) = corpus
    model = DiffVAE(VaeConfig(variant, 32, 32), seed=0)
    diff_out = Variant(variant).diff_out
    seen = {}

    def stop(step, _losses):
        if step % every:
            return False
        ev = evaluate_vae(model, *held)
        seen.update(step=step, frame=ev["frame_recon"], diff=ev["diff_recon"])
        return ev["frame_recon"] < 0.01 and (not diff_out or ev["diff_recon"] < 0.02)

    train_vae(model, PairSource.from_arrays(*train), epochs=1000, seed=0, batch_size=32, max_steps=cap,
              stop_when=stop)
    return model, seen


def test_diff_vae_training(criterion, square_corpus):
    detail = criterion(6, "difference-VAE reconstruction on moving squares within 5000 steps")
    start = time.perf_counter()
    held_frames, held_diffs = square_corpus[1]
    parts, ok = [], True
    for variant in ("DiffInputOutput", "DiffOutput"):
        model, seen = _train_until(variant, square_corpus)
        decoded = evaluate_vae(model, held_frames, held_diffs)["decoded_diff"]
        true_corr = diff_correlation(decoded, held_diffs)
        shuffled = diff_correlation(decoded, np.roll(held_diffs, 1, axis=0))
        parts.append(f"{variant}: step {seen['step']} frame {seen['frame']:.4f} diff {seen['diff']:.4f} "
                     f"corr {true_corr:.3f} vs shuffled {shuffled:.3f}")
        ok &= seen["frame"] < 0.01 and seen["diff"] < 0.02 and true_corr > shuffled
    detail("; ".join(parts) + f" ({time.perf_counter() - start:.0f}s)")
    assert ok


# 7 -------------------------------------------------------------------------------------


def test_mdn_rnn_two_mode(criterion):
    detail = criterion(7, "MDN-RNN held-out NLL within 5% of the true two-mode model")
    noise = 0.3
    z, a = two_mode_sequences(3000, 20, 2, noise, seed=0)
    hz, ha = two_mode_sequences(100, 20, 2, noise, seed=1)
    model = MDNRNN(z_dim=2, action_dim=3, hidden=32, mixtures=5, seed=0)
    res = train_rnn(model, z, a, epochs=25, seed=0, batch_size=16, lr=3e-3, heldout=(hz, ha))
    held = res.curve[-1][2]
    true = two_mode_true_nll(hz, noise)
    gap = abs(held - true) / abs(true)
    detail(f"held-out NLL {held:.4f}, true {true:.4f}, gap {100 * gap:.2f}%")
    assert gap < 0.05


# 8 -------------------------------------------------------------------------------------


def _best_medians(run_dir):
    header, rows = read_csv(run_dir / "ctrl" / "stats.csv")
    best = [float(r[header.index("max")]) for r in rows]
    return float(np.median(best[:5])), float(np.median(best[-5:]))


def test_toy_pipeline(criterion, tmp_path):
    detail = criterion(8, "toy pipeline improves in >= 4/5 master seeds and is deterministic")
    start = time.perf_counter()
    improved, parts = 0, []
    for seed in range(5):
        run = tmp_path / f"seed{seed}"
        Pipeline(load_config(overrides={**TOY, "seed": seed}), run).run_all()
        first, last = _best_medians(run)
        improved += last > first
        parts.append(f"s{seed} {first:.1f}->{last:.1f}")
    again = tmp_path / "seed0-again"
    Pipeline(load_config(overrides={**TOY, "seed": 0}), again).run_all()
    same = all((tmp_path / "seed0" / rel).read_bytes() == (again / rel).read_bytes()
               for rel in ("collect/dataset.stad", "vae/vae.ckpt.bin", "rnn/rnn.ckpt.bin", "ctrl/stats.csv",
                           "ctrl/best_controller.ckpt.bin", "eval/summary.txt", "eval/episodes.csv"))
    detail(f"{improved}/5 improved ({', '.join(parts)}); rerun identical: {same}; "
           f"{time.perf_counter() - start:.0f}s on this machine")
    assert improved >= 4
    assert same


# 9 -------------------------------------------------------------------------------------


def test_determinism_audit(criterion, tmp_path):
    detail = criterion(9, "two identical `stad all` runs give byte-identical dataset and stats")
    flags = ["--obs-height", "16", "--obs-width", "16", "--z-dim", "4", "--h-dim", "8", "--channels", "8,16",
             "--episodes", "4", "--frames", "20", "--vae-epochs", "2", "--rnn-epochs", "2",
             "--generations", "3", "--population", "4", "--frame-limit", "80", "--eval-rollouts", "3"]
    for name in ("a", "b"):
        assert main(["all", "--run-dir", str(tmp_path / name), *flags]) == 0
    files = ("collect/dataset.stad", "ctrl/stats.csv", "ctrl/cma_trace.csv", "eval/episodes.csv")
    same = {rel: (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes() for rel in files}
    detail(", ".join(f"{rel}: {'identical' if v else 'DIFFERENT'}" for rel, v in same.items()))
    assert all(same.values())

"""Linear policy over [z, h] and its CMA-ES training loop."""

from __future__ import annotations

import logging
import math
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cma
from .mdn import MDNRNN
from .nn import load_checkpoint, save_checkpoint, sigmoid
from .sim import SimConfig, TrackEnv, clamp_action, generate_track, quantize
from .util import derive_seed, write_csv
from .vae import DiffVAE

log = logging.getLogger(__name__)

SOLVED_THRESHOLD = 900.0


class ControllerConfigError(ValueError):
    pass


@dataclass
class ControllerParams:
    weight: np.ndarray  # (3, z_dim + h_dim)
    bias: np.ndarray  # (3,)

    @classmethod
    def zeros(cls, input_dim: int) -> "ControllerParams":
        return cls(np.zeros((3, input_dim)), np.zeros(3))

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @staticmethod
    def genome_length(input_dim: int) -> int:
        return 3 * input_dim + 3

    @classmethod
    def from_genome(cls, genome, input_dim: int) -> "ControllerParams":
        g = np.asarray(genome, dtype=np.float64).reshape(-1)
        if g.size != cls.genome_length(input_dim):
            raise ControllerConfigError(
                f"genome length {g.size} does not match input dim {input_dim} "
                f"(expected {cls.genome_length(input_dim)})"
            )
        return cls(g[:3 * input_dim].reshape(3, input_dim).copy(), g[3 * input_dim:].copy())

    def to_genome(self) -> np.ndarray:
        return np.concatenate([self.weight.reshape(-1), self.bias])


def act(params: ControllerParams, z: np.ndarray, h: np.ndarray | None = None) -> np.ndarray:
    """(steer, accel, brake) = (tanh, sigmoid, sigmoid) of ``W [z; h] + b``; ``h=None`` for z-only."""
    x = np.asarray(z, dtype=np.float64).reshape(-1)
    if h is not None:
        x = np.concatenate([x, np.asarray(h, dtype=np.float64).reshape(-1)])
    if x.size != params.input_dim:
        raise ControllerConfigError(f"controller expects {params.input_dim} inputs, got {x.size}")
    raw = params.weight @ x + params.bias
    return np.array([math.tanh(raw[0]), float(sigmoid(raw[1])), float(sigmoid(raw[2]))])


# rollouts ----------------------------------------------------------------


def controller_input_dim(vae: DiffVAE, rnn: MDNRNN, z_only: bool = False) -> int:
    return vae.config.z_dim + (0 if z_only else rnn.hidden)


def check_models(vae: DiffVAE, rnn: MDNRNN, sim: SimConfig) -> None:
    vc = vae.config
    if (vc.height, vc.width) != (sim.obs_height, sim.obs_width):
        raise ControllerConfigError(
            f"VAE expects {vc.height}x{vc.width} frames but the simulator renders {sim.obs_height}x{sim.obs_width}"
        )
    if rnn.z_dim != vc.z_dim:
        raise ControllerConfigError(f"RNN z_dim {rnn.z_dim} != VAE z_dim {vc.z_dim}")
    if rnn.action_dim != 3:
        raise ControllerConfigError(f"RNN action_dim must be 3, got {rnn.action_dim}")


def rollout(params: ControllerParams, vae: DiffVAE, rnn: MDNRNN, track_seed: int, sim: SimConfig,
            stride: int = 4, z_only: bool = False) -> float:
    """Total reward of one episode driven through encoder, RNN and controller.

    Observations pass through the same 8-bit quantization as the dataset.
    The difference image is zero until ``stride`` earlier frames exist.
    """
    env = TrackEnv(generate_track(track_seed, sim.track), sim)
    obs = env.observe()
    state = rnn.initial_state()
    ring: deque[np.ndarray] = deque(maxlen=stride + 1)
    needs_diff = vae.config.variant.diff_in
    rewards = []
    while not env.done:
        frame = quantize(obs) / 255.0
        ring.append(frame)
        diff = None
        if needs_diff:
            diff = frame - ring[0] if len(ring) == stride + 1 else np.zeros_like(frame)
        z = vae.encode_mean(frame, diff)
        a = act(params, z, None if z_only else state[0])
        applied, _ = clamp_action(a)
        res = env.step(applied)
        rewards.append(res.reward)
        _, state = rnn.step(z, applied.as_array(), state)
        obs = res.observation
    return math.fsum(rewards)


def evaluate_fitness(genome, vae: DiffVAE, rnn: MDNRNN, track_seeds, sim: SimConfig | None = None,
                     stride: int = 4, z_only: bool = False) -> float:
    """Mean episodic reward over one rollout per track seed."""
    seeds = list(track_seeds)
    if not seeds:
        raise ValueError("need at least one track seed")
    sim = sim or SimConfig(obs_height=vae.config.height, obs_width=vae.config.width)
    check_models(vae, rnn, sim)
    params = ControllerParams.from_genome(genome, controller_input_dim(vae, rnn, z_only))
    return math.fsum(rollout(params, vae, rnn, s, sim, stride, z_only) for s in seeds) / len(seeds)


_WORKER: dict = {}


def _worker_init(vae, rnn, sim, stride, z_only):
    _WORKER.update(vae=vae, rnn=rnn, sim=sim, stride=stride, z_only=z_only)


def _worker_eval(args):
    genome, seeds = args
    w = _WORKER
    return evaluate_fitness(genome, w["vae"], w["rnn"], seeds, w["sim"], w["stride"], w["z_only"])


# training ----------------------------------------------------------------


@dataclass
class ControllerConfig:
    generations: int = 600
    population: int = 8
    sigma0: float = 0.1
    n_rollouts: int = 1
    seed: int = 0
    stride: int = 4
    z_only: bool = False
    snapshot_every: int = 10

    def __post_init__(self):
        if self.generations < 1:
            raise ControllerConfigError("generations must be >= 1")
        if self.population < 2:
            raise ControllerConfigError("population must be >= 2")
        if self.n_rollouts < 1:
            raise ControllerConfigError("n_rollouts must be >= 1")
        if not self.sigma0 > 0:
            raise ControllerConfigError("sigma0 must be positive")


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    min: float
    mean: float
    max: float
    best_so_far: float

    def as_row(self):
        return (self.generation, self.min, self.mean, self.max, self.best_so_far)


STATS_HEADER = ["generation", "min", "mean", "max", "best_so_far"]
TRACE_HEADER = ["generation", "sigma", "best_fitness", "median_fitness", "worst_fitness", "condition_number"]


@dataclass
class ControllerTrainResult:
    best_genome: np.ndarray
    best_reward: float
    stats: list[GenerationStats] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)


def generation_track_seeds(seed: int, generation: int, n_rollouts: int) -> list[int]:
    """Fresh tracks each generation, shared by every agent in it."""
    return [derive_seed(seed, "ctrl-track", generation * n_rollouts + r) for r in range(n_rollouts)]


def save_genome(path, genome: np.ndarray, input_dim: int, z_only: bool, reward: float) -> None:
    save_checkpoint(path, {"genome": np.asarray(genome, dtype=np.float64)},
                    {"kind": "controller", "input_dim": input_dim, "z_only": int(z_only), "reward": repr(reward)})


def load_genome(path) -> tuple[ControllerParams, bool]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "controller":
        raise ControllerConfigError(f"{path} is not a controller checkpoint")
    return ControllerParams.from_genome(tensors["genome"], int(meta["input_dim"])), bool(int(meta["z_only"]))


def _save_snapshot(path, state: cma.CmaState, result: ControllerTrainResult) -> None:
    tensors = {f"cma.{k}": v for k, v in cma.to_tensors(state).items()}
    tensors["best_genome"] = result.best_genome
    tensors["best_reward"] = np.array(result.best_reward)
    tensors["stats"] = np.array([s.as_row() for s in result.stats], dtype=np.float64).reshape(-1, 5)
    tensors["trace"] = np.array(result.trace, dtype=np.float64).reshape(-1, 6)
    save_checkpoint(path, tensors, {"kind": "cma-snapshot"})


def _load_snapshot(path) -> tuple[cma.CmaState, ControllerTrainResult]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "cma-snapshot":
        raise ControllerConfigError(f"{path} is not an optimizer snapshot")
    state = cma.from_tensors({k[4:]: v for k, v in tensors.items() if k.startswith("cma.")})
    stats = [GenerationStats(int(r[0]), *map(float, r[1:])) for r in tensors["stats"]]
    trace = [(int(r[0]), *map(float, r[1:])) for r in tensors["trace"]]
    return state, ControllerTrainResult(tensors["best_genome"].copy(), float(tensors["best_reward"]), stats, trace)


def train_controller(vae: DiffVAE, rnn: MDNRNN, config: ControllerConfig, sim: SimConfig | None = None,
                     out_dir: str | os.PathLike | None = None, workers: int = 1,
                     resume: bool = False) -> ControllerTrainResult:
    """CMA-ES over controller genomes, maximizing mean episodic reward.

    With ``out_dir`` set, writes ``stats.csv``, ``cma_trace.csv``, the best
    genome (``best_controller.ckpt``) and an optimizer snapshot
    (``cma_snapshot.ckpt``) every ``snapshot_every`` generations and at the end.
    ``resume`` continues from an existing snapshot in ``out_dir``.
    """
    sim = sim or SimConfig(obs_height=vae.config.height, obs_width=vae.config.width)
    check_models(vae, rnn, sim)
    cfg = config
    dim = ControllerParams.genome_length(controller_input_dim(vae, rnn, cfg.z_only))
    out = Path(out_dir) if out_dir is not None else None
    snapshot = out / "cma_snapshot.ckpt" if out is not None else None

    if resume and snapshot is not None and snapshot.exists():
        state, result = _load_snapshot(snapshot)
        if state.dim != dim or state.popsize != cfg.population:
            raise ControllerConfigError("snapshot does not match the configured controller shape or population")
        log.info("resuming controller training at generation %d", state.generation)
    else:
        state = cma.cma_init(np.zeros(dim), cfg.sigma0, cfg.population)
        result = ControllerTrainResult(np.zeros(dim), -math.inf)

    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                   initargs=(vae, rnn, sim, cfg.stride, cfg.z_only))
    try:
        while state.generation < cfg.generations:
            g = state.generation
            rng = np.random.default_rng(derive_seed(cfg.seed, "ctrl-ask", g))
            genomes = cma.ask(state, rng)
            seeds = generation_track_seeds(cfg.seed, g, cfg.n_rollouts)
            jobs = [(genome, seeds) for genome in genomes]
            if pool is not None:
                rewards = np.array(list(pool.map(_worker_eval, jobs)))
            else:
                rewards = np.array([evaluate_fitness(j[0], vae, rnn, seeds, sim, cfg.stride, cfg.z_only)
                                    for j in jobs])
            fitness = -rewards
            cma.tell(state, genomes, fitness)

            i = int(np.argmax(rewards))
            if rewards[i] > result.best_reward:
                result.best_reward = float(rewards[i])
                result.best_genome = genomes[i].copy()
            result.stats.append(GenerationStats(g, float(rewards.min()), float(rewards.mean()),
                                                float(rewards.max()), result.best_reward))
            result.trace.append((g, state.sigma, float(fitness.min()), float(np.median(fitness)),
                                 float(fitness.max()), state.condition_number()))
            log.info("generation %d: min %.2f mean %.2f max %.2f best %.2f", g, rewards.min(),
                     rewards.mean(), rewards.max(), result.best_reward)
            if out is not None and (state.generation % cfg.snapshot_every == 0
                                    or state.generation == cfg.generations):
                _persist(out, state, result, dim, cfg)
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        _persist(out, state, result, dim, cfg)
    return result


def _persist(out: Path, state, result: ControllerTrainResult, dim: int, cfg: ControllerConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    input_dim = (dim - 3) // 3
    save_genome(out / "best_controller.ckpt", result.best_genome, input_dim, cfg.z_only, result.best_reward)
    _save_snapshot(out / "cma_snapshot.ckpt", state, result)
    write_csv(out / "stats.csv", STATS_HEADER, [s.as_row() for s in result.stats])
    write_csv(out / "cma_trace.csv", TRACE_HEADER, result.trace)


# final evaluation ----------------------------------------------------------


@dataclass
class FinalReport:
    rewards: np.ndarray
    track_seeds: list[int]
    top_k: int

    @property
    def mean(self) -> float:
        return math.fsum(self.rewards) / len(self.rewards)

    @property
    def top_mean(self) -> float:
        best = np.sort(self.rewards)[::-1][:self.top_k]
        return math.fsum(best) / len(best)

    @property
    def solved(self) -> bool:
        return self.mean >= SOLVED_THRESHOLD

    def summary_lines(self) -> list[str]:
        n = len(self.rewards)
        return [
            f"Episodes: {n}",
            f"Mean episodic reward: {self.mean:.2f}",
            f"Mean of top {self.top_k} episodes: {self.top_mean:.2f}",
            f"Min / max episodic reward: {self.rewards.min():.2f} / {self.rewards.max():.2f}",
            f"Solved (mean >= {SOLVED_THRESHOLD:g}): {'yes' if self.solved else 'no'}",
        ]

    def write(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "summary.txt").write_text("\n".join(self.summary_lines()) + "\n")
        write_csv(d / "episodes.csv", ["episode", "track_seed", "reward"],
                  [(i, s, float(r)) for i, (s, r) in enumerate(zip(self.track_seeds, self.rewards))])


def top_count(n: int) -> int:
    """Episodes kept by the trimmed mean: 90 of 100, scaled for other counts."""
    return max(1, int(round(0.9 * n)))


def evaluate_final(params: ControllerParams, vae: DiffVAE, rnn: MDNRNN, track_seeds,
                   sim: SimConfig | None = None, stride: int = 4, z_only: bool = False,
                   workers: int = 1) -> FinalReport:
    seeds = [int(s) for s in track_seeds]
    if not seeds:
        raise ValueError("need at least one evaluation seed")
    sim = sim or SimConfig(obs_height=vae.config.height, obs_width=vae.config.width)
    check_models(vae, rnn, sim)
    genome = params.to_genome()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(vae, rnn, sim, stride, z_only)) as pool:
            rewards = list(pool.map(_worker_eval, [(genome, [s]) for s in seeds]))
    else:
        rewards = [evaluate_fitness(genome, vae, rnn, [s], sim, stride, z_only) for s in seeds]
    return FinalReport(np.array(rewards), seeds, top_count(len(seeds)))


def final_eval_seeds(master_seed: int, n: int) -> list[int]:
    return [derive_seed(master_seed, "eval-track", i) for i in range(n)]


def with_frame_limit(sim: SimConfig, frame_limit: int | None) -> SimConfig:
    return sim if frame_limit is None else replace(sim, frame_limit=frame_limit)

"""Stage orchestration: collect, train-vae, train-rnn, train-ctrl, eval, report.

Each stage owns a subdirectory of the run directory holding its outputs, an
echo of the effective config (``config.txt``) and a ``manifest.json``. A
stage is skipped when its manifest shows the same config hash, the same
input hashes and untouched outputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .controller import (
    ControllerConfig,
    evaluate_final,
    final_eval_seeds,
    load_genome,
    train_controller,
)
from .data import collect_rollouts, read_dataset, write_dataset
from .mdn import MDNRNN, train_rnn
from .report import emit_report
from .sim import SimConfig
from .util import derive_seed
from .vae import DiffVAE, PairSource, VaeConfig, train_vae

log = logging.getLogger(__name__)

RUNS_ENV = "STAD_RUNS_DIR"
STAGES = ("collect", "train-vae", "train-rnn", "train-ctrl", "eval", "report")
STAGE_DIRS = {"collect": "collect", "train-vae": "vae", "train-rnn": "rnn", "train-ctrl": "ctrl",
              "eval": "eval", "report": "report"}

DATASET = "collect/dataset.stad"
VAE_CKPT = "vae/vae.ckpt"
RNN_CKPT = "rnn/rnn.ckpt"
CTRL_CKPT = "ctrl/best_controller.ckpt"
STATS_CSV = "ctrl/stats.csv"
EVAL_SUMMARY = "eval/summary.txt"

STAGE_INPUTS = {
    "collect": (),
    "train-vae": (DATASET,),
    "train-rnn": (DATASET, VAE_CKPT),
    "train-ctrl": (VAE_CKPT, RNN_CKPT),
    "eval": (VAE_CKPT, RNN_CKPT, CTRL_CKPT),
    "report": (STATS_CSV, EVAL_SUMMARY),
}
# config keys each stage's outputs depend on (beyond its input files)
STAGE_KEYS = {
    "collect": ("episodes", "frames", "stride", "obs_height", "obs_width", "seed"),
    "train-vae": ("variant", "z_dim", "beta", "diff_weight", "channels", "dual_branch", "vae_epochs",
                  "vae_batch", "vae_lr", "seed"),
    "train-rnn": ("h_dim", "mixtures", "rnn_epochs", "rnn_batch", "rnn_lr", "rnn_window", "rnn_sampled_targets",
                  "seed"),
    "train-ctrl": ("generations", "population", "sigma0", "rollouts_per_agent", "frame_limit", "z_only",
                   "stride", "seed"),
    "eval": ("eval_rollouts", "frame_limit", "z_only", "stride", "seed"),
    "report": ("episodes", "generations", "population"),
}
REMEDY = {DATASET: "collect", VAE_CKPT: "train-vae", RNN_CKPT: "train-rnn", CTRL_CKPT: "train-ctrl",
          STATS_CSV: "train-ctrl", EVAL_SUMMARY: "eval"}


class DependencyError(RuntimeError):
    pass


def default_run_dir(name: str = "run") -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs")) / name


def file_hash(path: Path) -> str:
    """SHA-256 over the file, plus its ``.bin`` blob for checkpoints."""
    h = hashlib.sha256()
    for p in (path, Path(str(path) + ".bin")):
        if p.exists():
            with open(p, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
    return h.hexdigest()


def commit_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def sim_config(cfg: PipelineConfig) -> SimConfig:
    return SimConfig(obs_height=cfg.obs_height, obs_width=cfg.obs_width, frame_limit=cfg.frame_limit)


@dataclass
class StageResult:
    stage: str
    skipped: bool
    manifest: dict


class Pipeline:
    def __init__(self, config: PipelineConfig, run_dir: str | os.PathLike, workers: int = 1, force: bool = False):
        self.config = config.resolved()
        self.run_dir = Path(run_dir)
        self.workers = max(1, int(workers))
        self.force = force

    # bookkeeping -------------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.run_dir / STAGE_DIRS[stage]

    def path(self, rel: str) -> Path:
        return self.run_dir / rel

    def check_inputs(self, stage: str) -> dict[str, str]:
        missing = [rel for rel in STAGE_INPUTS[stage] if not self.path(rel).is_file()]
        if missing:
            hints = "; ".join(f"{rel} (produced by `stad {REMEDY[rel]}`)" for rel in missing)
            raise DependencyError(f"{stage} is missing required artifact(s): {hints} under {self.run_dir}")
        return {rel: file_hash(self.path(rel)) for rel in STAGE_INPUTS[stage]}

    def _up_to_date(self, stage: str, config_hash: str, inputs: dict[str, str]) -> dict | None:
        mpath = self.stage_dir(stage) / "manifest.json"
        if self.force or not mpath.is_file():
            return None
        try:
            old = json.loads(mpath.read_text())
        except (OSError, json.JSONDecodeError):
            return None
        if old.get("config_hash") != config_hash or old.get("inputs") != inputs:
            return None
        for rel, digest in old.get("outputs", {}).items():
            p = self.path(rel)
            if not p.is_file() or file_hash(p) != digest:
                return None
        return old

    def run_stage(self, stage: str) -> StageResult:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        inputs = self.check_inputs(stage)
        config_hash = self.config.subset_hash(STAGE_KEYS[stage])
        old = self._up_to_date(stage, config_hash, inputs)
        if old is not None:
            log.info("%s: up to date, skipping", stage)
            self._record(old)
            return StageResult(stage, True, old)

        log.info("%s: running", stage)
        sdir = self.stage_dir(stage)
        if stage != "report":
            if sdir.exists():
                shutil.rmtree(sdir)
            sdir.mkdir(parents=True)
        start = time.perf_counter()
        outputs = getattr(self, "_" + stage.replace("-", "_"))()
        elapsed = time.perf_counter() - start
        sdir.mkdir(parents=True, exist_ok=True)
        self.config.write(sdir / "config.txt")
        outputs = [*outputs, sdir / "config.txt"]
        manifest = {
            "stage": stage,
            "config_hash": config_hash,
            "inputs": inputs,
            "outputs": {str(p.relative_to(self.run_dir)): file_hash(p) for p in outputs},
            "wall_clock_seconds": round(elapsed, 3),
            "commit": commit_id(),
        }
        (sdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self._record(manifest)
        return StageResult(stage, False, manifest)

    def _record(self, manifest: dict) -> None:
        """Merge one stage manifest into the run-level manifest."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        mpath = self.run_dir / "manifest.json"
        run = {"stages": []}
        if mpath.is_file():
            try:
                run = json.loads(mpath.read_text())
            except json.JSONDecodeError:
                pass
        stages = {s["stage"]: s for s in run.get("stages", [])}
        stages[manifest["stage"]] = manifest
        run["stages"] = [stages[s] for s in STAGES if s in stages]
        run["config_hash"] = self.config.subset_hash([f for f in PipelineConfig.__dataclass_fields__])
        run["commit"] = commit_id()
        mpath.write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
        self.config.write(self.run_dir / "config.txt")

    def run_all(self) -> list[StageResult]:
        return [self.run_stage(s) for s in STAGES]

    # stages --------------------------------------------------------------

    def _collect(self) -> list[Path]:
        cfg = self.config
        ds = collect_rollouts(cfg.episodes, cfg.frames, derive_seed(cfg.seed, "collect"),
                              sim_config(cfg), stride=cfg.stride, workers=self.workers)
        out = self.path(DATASET)
        write_dataset(ds, out)
        return [out]

    def vae_config(self) -> VaeConfig:
        cfg = self.config
        return VaeConfig(variant=cfg.variant, height=cfg.obs_height, width=cfg.obs_width, z_dim=cfg.z_dim,
                         channels=cfg.channel_tuple, beta=cfg.effective_beta, diff_weight=cfg.diff_weight,
                         dual_branch=cfg.dual_branch)

    def _train_vae(self) -> list[Path]:
        cfg = self.config
        ds = read_dataset(self.path(DATASET))
        model = DiffVAE(self.vae_config(), seed=derive_seed(cfg.seed, "vae-init"))
        result = train_vae(model, PairSource.from_dataset(ds), epochs=cfg.vae_epochs,
                           seed=derive_seed(cfg.seed, "train-vae"), batch_size=cfg.vae_batch, lr=cfg.vae_lr)
        ckpt, curve = self.path(VAE_CKPT), self.stage_dir("train-vae") / "vae_curve.csv"
        model.save(ckpt)
        result.write_curve(curve)
        return [ckpt, Path(str(ckpt) + ".bin"), curve]

    def _train_rnn(self) -> list[Path]:
        cfg = self.config
        ds = read_dataset(self.path(DATASET))
        vae = DiffVAE.load(self.path(VAE_CKPT))
        latents, logvars = encode_dataset(vae, ds)
        targets = None
        if cfg.rnn_sampled_targets:
            eps = np.random.default_rng(derive_seed(cfg.seed, "rnn-targets")).standard_normal(latents.shape)
            targets = latents + np.exp(0.5 * logvars) * eps
        rnn = MDNRNN(z_dim=vae.config.z_dim, action_dim=3, hidden=cfg.h_dim, mixtures=cfg.mixtures,
                     seed=derive_seed(cfg.seed, "rnn-init"))
        n_held = len(latents) // 10
        cut = len(latents) - n_held
        heldout = (latents[cut:], ds.actions[cut:]) if n_held else None
        result = train_rnn(rnn, latents[:cut], ds.actions[:cut], epochs=cfg.rnn_epochs,
                           seed=derive_seed(cfg.seed, "train-rnn"), batch_size=cfg.rnn_batch, lr=cfg.rnn_lr,
                           heldout=heldout, window=cfg.rnn_window or None,
                           targets=None if targets is None else targets[:cut])
        ckpt, curve = self.path(RNN_CKPT), self.stage_dir("train-rnn") / "rnn_curve.csv"
        rnn.save(ckpt)
        result.write_curve(curve)
        return [ckpt, Path(str(ckpt) + ".bin"), curve]

    def _train_ctrl(self) -> list[Path]:
        cfg = self.config
        vae = DiffVAE.load(self.path(VAE_CKPT))
        rnn = MDNRNN.load(self.path(RNN_CKPT))
        ccfg = ControllerConfig(generations=cfg.generations, population=cfg.population, sigma0=cfg.sigma0,
                                n_rollouts=cfg.rollouts_per_agent, seed=derive_seed(cfg.seed, "train-ctrl"),
                                stride=cfg.stride, z_only=cfg.z_only)
        out = self.stage_dir("train-ctrl")
        train_controller(vae, rnn, ccfg, sim=sim_config(cfg), out_dir=out, workers=self.workers)
        names = ["best_controller.ckpt", "best_controller.ckpt.bin", "cma_snapshot.ckpt",
                 "cma_snapshot.ckpt.bin", "stats.csv", "cma_trace.csv"]
        return [out / n for n in names]

    def _eval(self) -> list[Path]:
        cfg = self.config
        vae = DiffVAE.load(self.path(VAE_CKPT))
        rnn = MDNRNN.load(self.path(RNN_CKPT))
        params, z_only = load_genome(self.path(CTRL_CKPT))
        seeds = final_eval_seeds(derive_seed(cfg.seed, "eval"), cfg.eval_rollouts)
        report = evaluate_final(params, vae, rnn, seeds, sim=sim_config(cfg), stride=cfg.stride,
                                z_only=z_only, workers=self.workers)
        out = self.stage_dir("eval")
        report.write(out)
        return [out / "summary.txt", out / "episodes.csv"]

    def _report(self) -> list[Path]:
        cfg = self.config
        return emit_report(self.path(STATS_CSV), self.path(EVAL_SUMMARY), self.stage_dir("report"),
                           rollouts=cfg.episodes, generations=cfg.generations, population=cfg.population)


def encode_dataset(vae: DiffVAE, ds, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and log-variances for every frame, each (E, T, z_dim)."""
    out = np.empty((ds.n_episodes, ds.n_frames, vae.config.z_dim))
    logvar = np.empty_like(out)
    diff_in = vae.config.variant.diff_in
    for e in range(ds.n_episodes):
        frames = ds.frame_floats(e)
        diffs = ds.episode_differences(e) if diff_in else None
        for i in range(0, len(frames), batch):
            lat = vae.encode(frames[i:i + batch], None if diffs is None else diffs[i:i + batch])
            out[e, i:i + batch] = lat.mean
            logvar[e, i:i + batch] = lat.logvar
    return out, logvar

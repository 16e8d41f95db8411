"""Random-policy rollouts, difference images, and the STAD dataset file.

File layout (little-endian)::

    "STAD" | version u16 | H, W, E, T, k u32
    per episode: T frames of H*W bytes | T x 3 float64 actions | T float64 rewards

Frames are stored as 8-bit intensities and read back as ``v / 255``.
Difference images are not stored; they are computed from frame pairs
``k`` apart.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .sim import SimConfig, generate_track, quantize, TrackEnv

MAGIC = b"STAD"
VERSION = 1
HEADER = struct.Struct("<4sH5I")


class DatasetError(ValueError):
    pass


class DatasetWriteError(OSError):
    pass


def compute_difference(earlier: np.ndarray, later: np.ndarray) -> np.ndarray:
    """Signed pixel difference ``later - earlier``; values land in [-1, 1]."""
    earlier = np.asarray(earlier, dtype=np.float64)
    later = np.asarray(later, dtype=np.float64)
    if earlier.shape != later.shape:
        raise ValueError(f"frame shapes differ: {earlier.shape} vs {later.shape}")
    return later - earlier


@dataclass
class RolloutDataset:
    frames: np.ndarray  # (E, T, H, W) uint8
    actions: np.ndarray  # (E, T, 3) float64
    rewards: np.ndarray  # (E, T) float64
    stride: int = 4

    def __post_init__(self):
        e, t = self.frames.shape[:2]
        if self.actions.shape != (e, t, 3) or self.rewards.shape != (e, t):
            raise DatasetError("frames, actions and rewards disagree on (E, T)")
        if t <= self.stride:
            raise DatasetError(f"T={t} must exceed stride k={self.stride}")

    @property
    def n_episodes(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    @property
    def pairs_per_episode(self) -> int:
        return self.n_frames - self.stride

    def frame_floats(self, episode: int) -> np.ndarray:
        return self.frames[episode].astype(np.float64) / 255.0

    def pair_index(self) -> np.ndarray:
        """(episode, t) for every difference pair; the pair is (frame t-k, frame t)."""
        e = np.repeat(np.arange(self.n_episodes), self.pairs_per_episode)
        t = np.tile(np.arange(self.stride, self.n_frames), self.n_episodes)
        return np.stack([e, t], axis=1)

    def pair_batch(self, index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Current frames and their difference against k frames earlier."""
        e, t = index[:, 0], index[:, 1]
        now = self.frames[e, t].astype(np.float64) / 255.0
        before = self.frames[e, t - self.stride].astype(np.float64) / 255.0
        return now, compute_difference(before, now)

    def episode_differences(self, episode: int) -> np.ndarray:
        """Per-frame difference images, all-zero for the first k frames."""
        f = self.frame_floats(episode)
        d = np.zeros_like(f)
        d[self.stride:] = f[self.stride:] - f[:-self.stride]
        return d


class ExplorationPolicy:
    """Steer uniform in [-1, 1] held for ``hold`` frames, accel uniform in [0.5, 1], no brake."""

    def __init__(self, seed: int, hold: int = 8, accel_low: float = 0.5):
        self.seed = seed
        self.hold = hold
        self.accel_low = accel_low
        self.reset()

    def reset(self):
        self.rng = np.random.default_rng(self.seed)
        self.t = 0
        self.steer = 0.0

    def __call__(self, observation, env):
        if self.t % self.hold == 0:
            self.steer = self.rng.uniform(-1.0, 1.0)
        self.t += 1
        return np.array([self.steer, self.rng.uniform(self.accel_low, 1.0), 0.0])


def collect_episode(seed: int, frames: int, config: SimConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One fixed-length exploration episode on the track for ``seed``."""
    cfg = replace(config, frame_limit=frames, end_off_playfield=False)
    env = TrackEnv(generate_track(seed, cfg.track), cfg)
    policy = ExplorationPolicy(seed)
    obs = env.observe()
    out_frames = np.empty((frames, cfg.obs_height, cfg.obs_width), dtype=np.uint8)
    actions = np.empty((frames, 3))
    rewards = np.empty(frames)
    for t in range(frames):
        out_frames[t] = quantize(obs)
        a = policy(obs, env)
        res = env.step(a)
        actions[t] = a
        rewards[t] = res.reward
        obs = res.observation
    return out_frames, actions, rewards


def _collect_one(args):
    return collect_episode(*args)


def collect_rollouts(episodes: int, frames: int, seed: int, config: SimConfig | None = None,
                     stride: int = 4, workers: int = 1) -> RolloutDataset:
    """Exploration rollouts; episode ``e`` uses seed ``seed + e`` for its track and policy."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if frames <= stride:
        raise ValueError(f"frames ({frames}) must exceed stride ({stride})")
    cfg = config or SimConfig()
    jobs = [(seed + e, frames, cfg) for e in range(episodes)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_collect_one, jobs))
    else:
        results = [_collect_one(j) for j in jobs]
    return RolloutDataset(
        frames=np.stack([r[0] for r in results]),
        actions=np.stack([r[1] for r in results]),
        rewards=np.stack([r[2] for r in results]),
        stride=stride,
    )


def expected_file_size(height: int, width: int, episodes: int, frames: int) -> int:
    return HEADER.size + episodes * frames * (height * width + 3 * 8 + 8)


def write_dataset(dataset: RolloutDataset, path: str | os.PathLike) -> None:
    path = Path(path)
    e, t, h, w = dataset.frames.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, h, w, e, t, dataset.stride))
        for i in range(e):
            try:
                fh.write(np.ascontiguousarray(dataset.frames[i], dtype=np.uint8).tobytes())
                fh.write(np.ascontiguousarray(dataset.actions[i], dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(dataset.rewards[i], dtype="<f8").tobytes())
            except OSError as err:
                raise DatasetWriteError(f"failed writing episode {i} to {path}: {err}") from err


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise DatasetError(f"{path}: not a STAD dataset")
    if len(raw) < HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    _, version, h, w, e, t, k = HEADER.unpack(raw)
    if version != VERSION:
        raise DatasetError(f"{path}: format version {version}, expected {VERSION}")
    return {"height": h, "width": w, "episodes": e, "frames": t, "stride": k}


def read_dataset(path: str | os.PathLike) -> RolloutDataset:
    hdr = read_header(path)
    h, w, e, t = hdr["height"], hdr["width"], hdr["episodes"], hdr["frames"]
    size = os.path.getsize(path)
    want = expected_file_size(h, w, e, t)
    if size != want:
        raise DatasetError(f"{path}: size {size} bytes, header implies {want} (truncated or corrupt)")
    raw = np.fromfile(path, dtype=np.uint8, offset=HEADER.size)
    block = t * (h * w + 32)
    raw = raw.reshape(e, block)
    fb = t * h * w
    frames = raw[:, :fb].reshape(e, t, h, w).copy()
    actions = raw[:, fb:fb + 24 * t].copy().view("<f8").reshape(e, t, 3).astype(np.float64)
    rewards = raw[:, fb + 24 * t:].copy().view("<f8").reshape(e, t).astype(np.float64)
    return RolloutDataset(frames=frames, actions=actions, rewards=rewards, stride=hdr["stride"])

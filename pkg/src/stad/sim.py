"""Top-down 2D track driving environment.

Tracks are closed loops of ``N`` quad tiles. Each frame costs 0.1 and each
newly visited tile pays ``1000 / N``, so a lap completed in ``F`` frames
scores ``1000 - 0.1 * F``. A tile is credited when the car's center enters
it; the start tile therefore pays out when the lap closes, and a car that
never moves earns nothing.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .util import derive_seed, write_pgm

log = logging.getLogger(__name__)

FRAME_PENALTY = 0.1
TRACK_REWARD = 1000.0

# intensities are exact multiples of 1/255 so 8-bit storage is lossless
BACKGROUND = 51 / 255
TILE_SHADES = (204 / 255, 230 / 255)
CAR_SHADE = 128 / 255


class TrackGenerationError(RuntimeError):
    pass


class PolicyError(RuntimeError):
    """The policy produced an action that cannot be executed."""


@dataclass(frozen=True)
class TrackConfig:
    radius_min: float = 60.0
    radius_max: float = 100.0
    harmonics: int = 4
    max_amplitude: float = 0.22
    tile_length: float = 5.0
    half_width: float = 6.0
    min_tiles: int = 50
    max_tiles: int = 400


@dataclass
class Track:
    quads: np.ndarray  # (N, 4, 2), counter-clockwise
    centerline: np.ndarray  # (N, 2), tile start points
    seed: int

    @property
    def n_tiles(self) -> int:
        return len(self.quads)

    def start_pose(self) -> tuple[float, float, float]:
        """Center of tile 0 and the direction of travel."""
        p0, p1 = self.centerline[0], self.centerline[1]
        mid = 0.5 * (p0 + p1)
        return float(mid[0]), float(mid[1]), math.atan2(p1[1] - p0[1], p1[0] - p0[0])

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.quads.reshape(-1, 2)
        return pts.min(axis=0), pts.max(axis=0)

    def translated(self, offset) -> "Track":
        offset = np.asarray(offset, dtype=float)
        return Track(self.quads + offset, self.centerline + offset, self.seed)

    def tiles_containing(self, point) -> np.ndarray:
        """Indices of tiles whose quad contains ``point`` (boundary inclusive)."""
        inside = points_in_quads(np.asarray(point, dtype=float)[None, :], self.quads)[:, 0]
        return np.flatnonzero(inside)


def points_in_quads(points: np.ndarray, quads: np.ndarray) -> np.ndarray:
    """Boolean (n_quads, n_points) containment for convex CCW quads."""
    a = quads[:, :, None, :]  # (Q, 4, 1, 2)
    b = np.roll(quads, -1, axis=1)[:, :, None, :]
    p = points[None, None, :, :]
    cross = (b[..., 0] - a[..., 0]) * (p[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (p[..., 0] - a[..., 0])
    return np.all(cross >= -1e-12, axis=1)


def quad_is_degenerate(quad: np.ndarray, min_area: float = 1e-6) -> bool:
    """True unless the quad is strictly convex, CCW, and of positive area."""
    edges = np.roll(quad, -1, axis=0) - quad
    nxt = np.roll(edges, -1, axis=0)
    turns = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    x, y = quad[:, 0], quad[:, 1]
    area = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    return bool(area <= min_area or np.any(turns <= 0))


def _candidate_track(seed: int, cfg: TrackConfig) -> Track:
    rng = np.random.default_rng(seed)
    radius = rng.uniform(cfg.radius_min, cfg.radius_max)
    orders = np.arange(2, 2 + cfg.harmonics)
    amps = rng.uniform(0.0, cfg.max_amplitude, size=cfg.harmonics) / orders
    phases = rng.uniform(0.0, 2 * math.pi, size=cfg.harmonics)

    theta = np.linspace(0.0, 2 * math.pi, 4096, endpoint=False)
    r = radius * (1.0 + np.sum(amps[:, None] * np.cos(orders[:, None] * theta + phases[:, None]), axis=0))
    if np.any(r <= cfg.half_width * 2):
        raise TrackGenerationError("radius profile collapses")
    dense = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)

    # curvature radius check so the inner border never folds over
    d1 = (np.roll(dense, -1, axis=0) - np.roll(dense, 1, axis=0)) / 2
    d2 = np.roll(dense, -1, axis=0) - 2 * dense + np.roll(dense, 1, axis=0)
    curv = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / np.linalg.norm(d1, axis=1) ** 3
    if np.max(curv) * cfg.half_width * 1.5 >= 1.0:
        raise TrackGenerationError("turn too tight for track width")

    seg = np.linalg.norm(np.roll(dense, -1, axis=0) - dense, axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    n = int(round(total / cfg.tile_length))
    if not cfg.min_tiles <= n <= cfg.max_tiles:
        raise TrackGenerationError(f"tile count {n} outside [{cfg.min_tiles}, {cfg.max_tiles}]")
    closed = np.vstack([dense, dense[:1]])
    s = np.linspace(0.0, total, n, endpoint=False)
    center = np.stack([np.interp(s, arc, closed[:, 0]), np.interp(s, arc, closed[:, 1])], axis=1)

    tangent = np.roll(center, -1, axis=0) - np.roll(center, 1, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)  # points left
    left = center + cfg.half_width * normal
    right = center - cfg.half_width * normal
    quads = np.stack([right, np.roll(right, -1, axis=0), np.roll(left, -1, axis=0), left], axis=1)
    for q in quads:
        if quad_is_degenerate(q):
            raise TrackGenerationError("degenerate tile")
    return Track(quads=quads, centerline=center, seed=seed)


def generate_track(seed: int, config: TrackConfig | None = None, max_attempts: int = 100) -> Track:
    """Deterministic closed track for ``seed``; retries with perturbed seeds."""
    cfg = config or TrackConfig()
    last_err: Exception | None = None
    for attempt in range(max_attempts):
        s = seed if attempt == 0 else derive_seed(seed, "track-retry", attempt)
        try:
            track = _candidate_track(s, cfg)
        except TrackGenerationError as err:
            last_err = err
            continue
        track.seed = seed
        return track
    raise TrackGenerationError(f"no valid track for seed {seed} after {max_attempts} attempts: {last_err}")


@dataclass(frozen=True)
class CarState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    yaw_rate: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    accel: float = 0.0
    brake: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.accel, self.brake])


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 50.0
    wheelbase: float = 2.6
    max_steer_angle: float = 0.5
    engine_accel: float = 16.0
    brake_decel: float = 24.0
    drag: float = 0.05
    max_speed: float = 40.0
    lateral_grip: float = 10.0  # max lateral acceleration, m/s^2
    obs_height: int = 64
    obs_width: int = 64
    view_meters: float = 48.0
    car_length: float = 4.4
    car_width: float = 2.0
    frame_limit: int = 1000
    end_off_playfield: bool = True
    off_playfield_penalty: float = 100.0
    playfield_scale: float = 1.5
    track: TrackConfig = field(default_factory=TrackConfig)


def clamp_action(action) -> tuple[Action, bool]:
    """Clamp to the valid box. Returns the clamped action and whether anything changed."""
    a = np.asarray(action.as_array() if isinstance(action, Action) else action, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise PolicyError(f"action must have 3 components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise PolicyError(f"non-finite action {a.tolist()}")
    lo, hi = np.array([-1.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0])
    c = np.clip(a, lo, hi)
    return Action(float(c[0]), float(c[1]), float(c[2])), bool(np.any(c != a))


def physics_step(state: CarState, action: Action, cfg: SimConfig) -> CarState:
    """Kinematic bicycle update with a lateral-grip cap on yaw rate."""
    dt = cfg.dt
    v = state.speed + cfg.engine_accel * action.accel * dt
    v -= cfg.drag * v * dt
    slow = cfg.brake_decel * action.brake * dt
    v = math.copysign(max(abs(v) - slow, 0.0), v)
    v = max(-cfg.max_speed, min(cfg.max_speed, v))

    delta = action.steer * cfg.max_steer_angle
    yaw = v * math.tan(delta) / cfg.wheelbase
    if abs(v) > 1e-9:
        cap = cfg.lateral_grip / abs(v)
        yaw = max(-cap, min(cap, yaw))
    heading = state.heading + yaw * dt
    return CarState(
        x=state.x + v * math.cos(heading) * dt,
        y=state.y + v * math.sin(heading) * dt,
        heading=heading,
        speed=v,
        yaw_rate=yaw,
    )


def _car_sprite_mask(cfg: SimConfig) -> np.ndarray:
    h, w = cfg.obs_height, cfg.obs_width
    mpp = cfg.view_meters / max(h, w)
    forward = -(np.arange(h) + 0.5 - h / 2)[:, None] * mpp
    right = (np.arange(w) + 0.5 - w / 2)[None, :] * mpp
    return (np.abs(forward) <= cfg.car_length / 2) & (np.abs(right) <= cfg.car_width / 2)


def render(state: CarState, track: Track, cfg: SimConfig) -> np.ndarray:
    """Bird's-eye view centered on the car, heading pointing screen-up."""
    h, w = cfg.obs_height, cfg.obs_width
    mpp = cfg.view_meters / max(h, w)
    img = np.full((h, w), BACKGROUND)

    centroids = track.quads.mean(axis=1)
    half_diag = 0.5 * mpp * math.hypot(h, w)
    reach = half_diag + math.hypot(cfg.track.tile_length, 2 * cfg.track.half_width)
    near = np.flatnonzero(np.hypot(centroids[:, 0] - state.x, centroids[:, 1] - state.y) < reach)
    if near.size:
        c, s = math.cos(state.heading), math.sin(state.heading)
        d = track.quads[near] - np.array([state.x, state.y])
        fwd = d[..., 0] * c + d[..., 1] * s
        rgt = d[..., 0] * s - d[..., 1] * c
        # pixel-index coordinates of the corners; pixel (i, j) has its center at (j, i)
        cols = rgt / mpp + w / 2 - 0.5
        rows = -fwd / mpp + h / 2 - 0.5
        if h * w <= 1024:
            # small frames: one dense test over all nearby tiles
            jj, ii = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
            ac, ar = cols[:, :, None, None], rows[:, :, None, None]
            bc, br = np.roll(cols, -1, axis=1)[:, :, None, None], np.roll(rows, -1, axis=1)[:, :, None, None]
            cross = (bc - ac) * (ii - ar) - (br - ar) * (jj - ac)
            inside = np.all(cross >= -1e-9, axis=1) | np.all(cross <= 1e-9, axis=1)
            hit = inside.any(axis=0)
            first = np.argmax(inside, axis=0)
            img[hit] = np.where(near[first[hit]] % 2 == 0, TILE_SHADES[0], TILE_SHADES[1])
            img[_car_sprite_mask(cfg)] = CAR_SHADE
            return img
        # highest index first so the lowest-index tile wins on shared edges
        for k in range(len(near) - 1, -1, -1):
            qc, qr = cols[k], rows[k]
            j0, j1 = max(int(math.ceil(qc.min())), 0), min(int(math.floor(qc.max())), w - 1)
            i0, i1 = max(int(math.ceil(qr.min())), 0), min(int(math.floor(qr.max())), h - 1)
            if j0 > j1 or i0 > i1:
                continue
            jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
            ac, ar = qc[:, None, None], qr[:, None, None]
            bc, br = np.roll(qc, -1)[:, None, None], np.roll(qr, -1)[:, None, None]
            cross = (bc - ac) * (ii - ar) - (br - ar) * (jj - ac)
            inside = np.all(cross >= -1e-9, axis=0) | np.all(cross <= 1e-9, axis=0)
            img[i0:i1 + 1, j0:j1 + 1][inside] = TILE_SHADES[near[k] % 2]

    img[_car_sprite_mask(cfg)] = CAR_SHADE
    return img


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


class TrackEnv:
    """One track, one car. Not safe to step from two threads at once."""

    def __init__(self, track: Track, config: SimConfig | None = None):
        self.track = track
        self.config = config or SimConfig()
        lo, hi = track.extent()
        mid, half = (lo + hi) / 2, (hi - lo) / 2
        self._play_lo = mid - self.config.playfield_scale * half
        self._play_hi = mid + self.config.playfield_scale * half
        self.clamp_count = 0
        self.reset()

    @property
    def tile_reward(self) -> float:
        return TRACK_REWARD / self.track.n_tiles

    def reset(self, state: CarState | None = None) -> np.ndarray:
        if state is None:
            x, y, heading = self.track.start_pose()
            state = CarState(x=x, y=y, heading=heading)
        self.car = state
        self.frame = 0
        self.visited = np.zeros(self.track.n_tiles, dtype=bool)
        self._inside = set(self.track.tiles_containing(self.car.position).tolist())
        self.done = False
        return self.observe()

    def observe(self) -> np.ndarray:
        return render(self.car, self.track, self.config)

    @property
    def tiles_visited(self) -> int:
        return int(self.visited.sum())

    def step(self, action) -> StepResult:
        act, clamped = clamp_action(action)
        if clamped:
            self.clamp_count += 1
        return self._advance(physics_step(self.car, act, self.config))

    def step_pose(self, state: CarState) -> StepResult:
        """Advance one frame with the car placed at ``state`` (scripted trajectories)."""
        return self._advance(state)

    def _advance(self, state: CarState) -> StepResult:
        if self.done:
            raise RuntimeError("step called on a finished episode; call reset()")
        self.car = state
        self.frame += 1
        inside = set(self.track.tiles_containing(state.position).tolist())
        new = [i for i in inside - self._inside if not self.visited[i]]
        self._inside = inside
        self.visited[new] = True
        reward = -FRAME_PENALTY + self.tile_reward * len(new)

        off = bool(np.any(state.position < self._play_lo) or np.any(state.position > self._play_hi))
        if off and self.config.end_off_playfield:
            reward -= self.config.off_playfield_penalty
        else:
            off = False
        complete = self.tiles_visited == self.track.n_tiles
        self.done = complete or off or self.frame >= self.config.frame_limit
        info = {"tiles_visited": self.tiles_visited, "frame": self.frame,
                "off_playfield": off, "lap_complete": complete}
        return StepResult(self.observe(), reward, self.done, info)


class Policy(Protocol):
    def __call__(self, observation: np.ndarray, env: TrackEnv): ...


@dataclass
class EpisodeRecord:
    frames: np.ndarray  # (F, H, W) uint8, observation each action was chosen from
    actions: np.ndarray  # (F, 3)
    rewards: np.ndarray  # (F,)
    tiles_visited: np.ndarray  # (F,) cumulative count after each frame
    total: float
    track_seed: int

    @property
    def n_frames(self) -> int:
        return len(self.rewards)

    def write_trace(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "steer", "accel", "brake", "reward", "tiles_visited"])
            for i in range(self.n_frames):
                a = self.actions[i]
                w.writerow([i + 1, repr(float(a[0])), repr(float(a[1])), repr(float(a[2])),
                            repr(float(self.rewards[i])), int(self.tiles_visited[i])])

    def dump_frames(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        for i, frame in enumerate(self.frames):
            write_pgm(os.path.join(directory, f"frame_{i:05d}.pgm"), frame / 255.0)


def quantize(obs: np.ndarray) -> np.ndarray:
    return np.rint(obs * 255.0).astype(np.uint8)


def run_episode(policy: Callable, seed: int, frame_limit: int = 1000, config: SimConfig | None = None,
                keep_frames: bool = True, track: Track | None = None) -> EpisodeRecord:
    """Roll ``policy(observation, env)`` on the track generated from ``seed``.

    ``policy.reset()`` is called first when the policy defines it.
    """
    if frame_limit < 1:
        raise ValueError("frame_limit must be >= 1")
    cfg = replace(config or SimConfig(), frame_limit=frame_limit)
    track = track if track is not None else generate_track(seed, cfg.track)
    env = TrackEnv(track, cfg)
    obs = env.observe()
    if hasattr(policy, "reset"):
        policy.reset()
    frames, actions, rewards, visited = [], [], [], []
    while not env.done:
        raw = policy(obs, env)
        try:
            act, _ = clamp_action(raw)
        except PolicyError as err:
            raise PolicyError(f"episode on seed {seed} aborted at frame {env.frame}: {err}") from err
        if keep_frames:
            frames.append(quantize(obs))
        res = env.step(raw)
        actions.append(act.as_array())
        rewards.append(res.reward)
        visited.append(res.info["tiles_visited"])
        obs = res.observation
    h, w = cfg.obs_height, cfg.obs_width
    return EpisodeRecord(
        frames=np.array(frames, dtype=np.uint8).reshape(-1, h, w) if keep_frames else np.zeros((0, h, w), np.uint8),
        actions=np.array(actions),
        rewards=np.array(rewards),
        tiles_visited=np.array(visited, dtype=int),
        total=math.fsum(rewards),
        track_seed=seed,
    )


def scripted_lap(track: Track, finish_frame: int, config: SimConfig | None = None) -> EpisodeRecord:
    """Teleport the car through every tile so the lap closes exactly at ``finish_frame``.

    The j-th tile after the start is entered at frame ``round(j * F / N)``;
    between entries the car rests at the center of the last tile entered.
    """
    n = track.n_tiles
    if finish_frame < n:
        raise ValueError(f"cannot enter {n} tiles in {finish_frame} frames")
    cfg = replace(config or SimConfig(), frame_limit=max(finish_frame, (config or SimConfig()).frame_limit))
    env = TrackEnv(track, cfg)
    centers = track.quads.mean(axis=1)
    entry = {int(round(j * finish_frame / n)): j % n for j in range(1, n + 1)}
    current = 0
    rewards, visited = [], []
    for frame in range(1, finish_frame + 1):
        current = entry.get(frame, current)
        x, y = centers[current]
        res = env.step_pose(CarState(x=float(x), y=float(y), heading=env.car.heading))
        rewards.append(res.reward)
        visited.append(res.info["tiles_visited"])
        if res.done:
            break
    h, w = cfg.obs_height, cfg.obs_width
    return EpisodeRecord(frames=np.zeros((0, h, w), np.uint8), actions=np.zeros((len(rewards), 3)),
                         rewards=np.array(rewards), tiles_visited=np.array(visited, dtype=int),
                         total=math.fsum(rewards), track_seed=track.seed)


class ConstantPolicy:
    def __init__(self, steer: float = 0.0, accel: float = 0.0, brake: float = 0.0):
        self.action = np.array([steer, accel, brake])

    def __call__(self, observation, env):
        return self.action


class RandomPolicy:
    """Uniform random actions from a seeded generator."""

    def __init__(self, seed: int):
        self.seed = seed
        self.reset()

    def reset(self):
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, observation, env):
        return np.array([self.rng.uniform(-1, 1), self.rng.uniform(0, 1), self.rng.uniform(0, 1)])


class CenterlineFollower:
    """Pure-pursuit driver with privileged access to the track geometry."""

    def __init__(self, target_speed: float = 25.0, lookahead: int = 3, gain: float = 2.0):
        self.target_speed = target_speed
        self.lookahead = lookahead
        self.gain = gain

    def __call__(self, observation, env: TrackEnv):
        car, center = env.car, env.track.centerline
        nearest = int(np.argmin(np.hypot(center[:, 0] - car.x, center[:, 1] - car.y)))
        target = center[(nearest + self.lookahead) % len(center)]
        want = math.atan2(target[1] - car.y, target[0] - car.x)
        err = (want - car.heading + math.pi) % (2 * math.pi) - math.pi
        steer = float(np.clip(self.gain * err, -1.0, 1.0))
        accel = 1.0 if car.speed < self.target_speed else 0.0
        brake = 0.5 if car.speed > self.target_speed + 3.0 else 0.0
        return np.array([steer, accel, brake])

"""Variational autoencoder with difference images on the input, output, or both.

Four variants share one conv encoder and one transposed-conv decoder:

* ``FrameOnly``: frame in, frame out (baseline)
* ``DiffInput``: frame and difference in, frame out
* ``DiffOutput``: frame in, frame and difference out
* ``DiffInputOutput``: frame and difference in, both out

Difference inputs are stacked with the frame as a second channel unless
``dual_branch`` is set, in which case each gets its own conv stack and the
flattened features are concatenated before the latent head.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .nn import (
    Adam,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    ReLU,
    Reshape,
    Sequential,
    gaussian_kl,
    load_checkpoint,
    load_into,
    mse,
    params_to_tensors,
    save_checkpoint,
    sigmoid,
)
from .util import write_csv, write_pgm


class Variant(str, enum.Enum):
    FRAME_ONLY = "FrameOnly"
    DIFF_INPUT = "DiffInput"
    DIFF_OUTPUT = "DiffOutput"
    DIFF_INPUT_OUTPUT = "DiffInputOutput"

    @property
    def diff_in(self) -> bool:
        return self in (Variant.DIFF_INPUT, Variant.DIFF_INPUT_OUTPUT)

    @property
    def diff_out(self) -> bool:
        return self in (Variant.DIFF_OUTPUT, Variant.DIFF_INPUT_OUTPUT)


class VaeConfigError(ValueError):
    pass


@dataclass
class VaeConfig:
    variant: Variant = Variant.DIFF_INPUT_OUTPUT
    height: int = 64
    width: int = 64
    z_dim: int = 32
    channels: tuple[int, ...] = (16, 32, 64, 128)
    beta: float | None = None  # None -> 1 / (height * width)
    diff_weight: float = 1.0
    dual_branch: bool = False

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.channels = tuple(int(c) for c in self.channels)
        scale = 2 ** len(self.channels)
        if self.height % scale or self.width % scale:
            raise VaeConfigError(
                f"{self.height}x{self.width} is not divisible by 2^{len(self.channels)} for the conv stack"
            )
        if self.z_dim < 1:
            raise VaeConfigError("z_dim must be >= 1")

    @property
    def effective_beta(self) -> float:
        return 1.0 / (self.height * self.width) if self.beta is None else float(self.beta)


@dataclass
class LatentSample:
    mean: np.ndarray
    logvar: np.ndarray
    z: np.ndarray


@dataclass
class VaeLosses:
    frame_recon: float
    diff_recon: float
    kl: float
    total: float


def _conv_stack(in_ch: int, channels, rng, prefix: str) -> Sequential:
    layers = []
    c = in_ch
    for i, out in enumerate(channels):
        layers += [Conv2d(c, out, 3, 2, 1, rng=rng, init="he", name=f"{prefix}.conv{i}"), ReLU()]
        c = out
    layers.append(Flatten())
    return Sequential(layers, name=prefix)


class DiffVAE:
    def __init__(self, config: VaeConfig, seed: int = 0):
        self.config = cfg = config
        rng = np.random.default_rng(seed)
        n = len(cfg.channels)
        hs, ws = cfg.height // 2 ** n, cfg.width // 2 ** n
        last = cfg.channels[-1]
        flat = last * hs * ws
        if cfg.variant.diff_in and cfg.dual_branch:
            self.branches = [_conv_stack(1, cfg.channels, rng, "enc.frame"), _conv_stack(1, cfg.channels, rng, "enc.diff")]
        else:
            in_ch = 2 if cfg.variant.diff_in else 1
            self.branches = [_conv_stack(in_ch, cfg.channels, rng, "enc")]
        self.latent_head = Dense(flat * len(self.branches), 2 * cfg.z_dim, rng=rng, name="enc.fc")

        out_ch = 2 if cfg.variant.diff_out else 1
        layers = [Dense(cfg.z_dim, flat, rng=rng, init="he", name="dec.fc"), ReLU(), Reshape((last, hs, ws))]
        rev = list(reversed(cfg.channels))
        for i in range(n):
            cin = rev[i]
            cout = rev[i + 1] if i + 1 < n else out_ch
            init = "he" if i + 1 < n else "glorot"
            layers.append(ConvTranspose2d(cin, cout, 3, 2, 1, 1, rng=rng, init=init, name=f"dec.deconv{i}"))
            if i + 1 < n:
                layers.append(ReLU())
        self.decoder = Sequential(layers, name="dec")

    # parameters --------------------------------------------------------

    def parameters(self):
        ps = [p for b in self.branches for p in b.parameters()]
        return ps + self.latent_head.parameters() + self.decoder.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # shape handling ----------------------------------------------------

    def _check_inputs(self, frame, diff):
        cfg = self.config
        if cfg.variant.diff_in and diff is None:
            raise VaeConfigError(f"variant {cfg.variant.value} requires a difference image")
        if not cfg.variant.diff_in and diff is not None:
            raise VaeConfigError(f"variant {cfg.variant.value} does not accept a difference image")
        frame = np.asarray(frame, dtype=np.float64)
        single = frame.ndim == 2
        if single:
            frame = frame[None]
        if frame.shape[1:] != (cfg.height, cfg.width):
            raise VaeConfigError(f"frame shape {frame.shape[1:]} != configured {(cfg.height, cfg.width)}")
        if diff is not None:
            diff = np.asarray(diff, dtype=np.float64)
            if diff.ndim == 2:
                diff = diff[None]
            if diff.shape != frame.shape:
                raise VaeConfigError(f"diff shape {diff.shape} != frame shape {frame.shape}")
        return frame, diff, single

    # forward passes ----------------------------------------------------

    def _encode_stats(self, frame, diff):
        if len(self.branches) == 2:
            feats = [self.branches[0].forward(frame[:, None]), self.branches[1].forward(diff[:, None])]
            h = np.concatenate(feats, axis=1)
        else:
            x = frame[:, None] if diff is None else np.stack([frame, diff], axis=1)
            h = self.branches[0].forward(x)
        stats = self.latent_head.forward(h)
        z = self.config.z_dim
        return stats[:, :z], stats[:, z:]

    def encode(self, frame, diff=None, rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None) -> LatentSample:
        """Posterior statistics and a reparameterized sample.

        ``z`` equals the mean when neither ``rng`` nor ``eps`` is given.
        """
        frame, diff, single = self._check_inputs(frame, diff)
        mean, logvar = self._encode_stats(frame, diff)
        if eps is None and rng is not None:
            eps = rng.standard_normal(mean.shape)
        z = mean if eps is None else mean + np.exp(0.5 * logvar) * eps
        if single:
            return LatentSample(mean[0], logvar[0], z[0])
        return LatentSample(mean, logvar, z)

    def encode_mean(self, frame, diff=None) -> np.ndarray:
        return self.encode(frame, diff).mean

    def _decode_logits(self, z):
        return self.decoder.forward(z)

    def decode(self, z) -> tuple[np.ndarray, np.ndarray | None]:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None]
        if z.shape[1] != self.config.z_dim:
            raise VaeConfigError(f"latent length {z.shape[1]} != z_dim {self.config.z_dim}")
        logits = self._decode_logits(z)
        frame = sigmoid(logits[:, 0])
        diff = np.tanh(logits[:, 1]) if self.config.variant.diff_out else None
        if single:
            return frame[0], None if diff is None else diff[0]
        return frame, diff

    # loss --------------------------------------------------------------

    def loss(self, frames, diffs, eps: np.ndarray, backward: bool = True) -> VaeLosses:
        """Loss on a batch; populates parameter gradients when ``backward``.

        ``diffs`` are the difference images paired with ``frames``; they feed
        the encoder and/or serve as the decoder target depending on variant.
        """
        cfg = self.config
        frames = np.asarray(frames, dtype=np.float64)
        diffs = np.asarray(diffs, dtype=np.float64)
        enc_diff = diffs if cfg.variant.diff_in else None
        mean, logvar = self._encode_stats(frames, enc_diff)
        std = np.exp(0.5 * logvar)
        z = mean + std * eps
        logits = self._decode_logits(z)
        frame_rec = sigmoid(logits[:, 0])
        fr, d_frame = mse(frame_rec, frames)
        dr, d_diff = 0.0, None
        if cfg.variant.diff_out:
            diff_rec = np.tanh(logits[:, 1])
            dr, d_diff = mse(diff_rec, diffs)
        beta = cfg.effective_beta
        kl, d_kl_mean, d_kl_logvar = gaussian_kl(mean, logvar)
        total = fr + cfg.diff_weight * dr + beta * kl
        out = VaeLosses(fr, dr, kl, total)
        if not backward:
            for layer in [*self.branches, self.latent_head, self.decoder]:
                layer._cache = None
            return out

        d_logits = np.zeros_like(logits)
        d_logits[:, 0] = d_frame * frame_rec * (1.0 - frame_rec)
        if d_diff is not None:
            d_logits[:, 1] = cfg.diff_weight * d_diff * (1.0 - diff_rec * diff_rec)
        dz = self.decoder.backward(d_logits)
        d_mean = dz + beta * d_kl_mean
        d_logvar = dz * eps * 0.5 * std + beta * d_kl_logvar
        dh = self.latent_head.backward(np.concatenate([d_mean, d_logvar], axis=1))
        if len(self.branches) == 2:
            half = dh.shape[1] // 2
            self.branches[0].backward(dh[:, :half])
            self.branches[1].backward(dh[:, half:])
        else:
            self.branches[0].backward(dh)
        return out

    # persistence -------------------------------------------------------

    def meta(self) -> dict:
        cfg = self.config
        return {
            "kind": "diff-vae",
            "variant": cfg.variant.value,
            "z_dim": cfg.z_dim,
            "height": cfg.height,
            "width": cfg.width,
            "channels": ",".join(map(str, cfg.channels)),
            "beta": repr(cfg.effective_beta),
            "diff_weight": repr(cfg.diff_weight),
            "dual_branch": int(cfg.dual_branch),
        }

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, params_to_tensors(self.parameters()), self.meta())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DiffVAE":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "diff-vae":
            raise VaeConfigError(f"{path} is not a diff-vae checkpoint")
        cfg = VaeConfig(
            variant=Variant(meta["variant"]),
            height=int(meta["height"]),
            width=int(meta["width"]),
            z_dim=int(meta["z_dim"]),
            channels=tuple(int(c) for c in meta["channels"].split(",")),
            beta=float(meta["beta"]),
            diff_weight=float(meta["diff_weight"]),
            dual_branch=bool(int(meta["dual_branch"])),
        )
        model = cls(cfg)
        load_into(model.parameters(), tensors)
        return model


# training ------------------------------------------------------------------


@dataclass
class PairSource:
    """Random-access (frame, difference) pairs."""

    count: int
    fetch: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

    @classmethod
    def from_arrays(cls, frames: np.ndarray, diffs: np.ndarray) -> "PairSource":
        return cls(len(frames), lambda idx: (frames[idx], diffs[idx]))

    @classmethod
    def from_dataset(cls, dataset) -> "PairSource":
        index = dataset.pair_index()
        return cls(len(index), lambda idx: dataset.pair_batch(index[idx]))


@dataclass
class VaeTrainResult:
    curve: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    steps: int = 0

    def write_curve(self, path) -> None:
        write_csv(path, ["step", "frame_recon", "diff_recon", "kl", "total"], self.curve)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_vae(model: DiffVAE, source: PairSource, epochs: int = 10, seed: int = 0, batch_size: int = 64,
              lr: float = 1e-3, max_steps: int | None = None,
              stop_when: Callable[[int, VaeLosses], bool] | None = None) -> VaeTrainResult:
    """Adam on the VAE loss. One curve row per optimizer step.

    ``stop_when(step, losses)`` is polled after every step; returning True ends training.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    result = VaeTrainResult()
    step = 0
    for _ in range(epochs):
        for idx in _batches(source.count, batch_size, rng):
            frames, diffs = source.fetch(idx)
            eps = rng.standard_normal((len(idx), model.config.z_dim))
            opt.zero_grad()
            losses = model.loss(frames, diffs, eps)
            if not np.isfinite(losses.total):
                raise FloatingPointError(
                    f"non-finite VAE loss at step {step}: {losses} (batch of {len(idx)}, first index {idx[0]})"
                )
            opt.step()
            step += 1
            result.curve.append((step, losses.frame_recon, losses.diff_recon, losses.kl, losses.total))
            if (max_steps is not None and step >= max_steps) or (stop_when is not None and stop_when(step, losses)):
                result.steps = step
                return result
    result.steps = step
    return result


def evaluate_vae(model: DiffVAE, frames: np.ndarray, diffs: np.ndarray, batch_size: int = 256) -> dict:
    """Deterministic (posterior-mean) reconstruction errors and the decoded differences."""
    cfg = model.config
    fr_err, dr_err, decoded = [], [], []
    for i in range(0, len(frames), batch_size):
        f, d = frames[i:i + batch_size], diffs[i:i + batch_size]
        lat = model.encode(f, d if cfg.variant.diff_in else None)
        rec, drec = model.decode(lat.mean)
        fr_err.append(np.sum((rec - f) ** 2))
        if drec is not None:
            dr_err.append(np.sum((drec - d) ** 2))
            decoded.append(drec)
    n = frames.size
    return {
        "frame_recon": float(np.sum(fr_err) / n),
        "diff_recon": float(np.sum(dr_err) / n) if dr_err else 0.0,
        "decoded_diff": np.concatenate(decoded) if decoded else None,
    }


def diff_correlation(decoded: np.ndarray, targets: np.ndarray) -> float:
    """Mean per-sample Pearson correlation between decoded and target differences."""
    a = decoded.reshape(len(decoded), -1)
    b = targets.reshape(len(targets), -1)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    ok = denom > 0
    return float(np.mean(np.sum(a * b, axis=1)[ok] / denom[ok])) if ok.any() else 0.0


def contact_sheet(model: DiffVAE, frames: np.ndarray, diffs: np.ndarray, path) -> None:
    """PGM grid, one row per sample: input | recon | diff target | diff recon."""
    cfg = model.config
    lat = model.encode(frames, diffs if cfg.variant.diff_in else None)
    rec, drec = model.decode(lat.mean)
    if drec is None:
        drec = np.zeros_like(diffs)
    rows = [np.concatenate([f, r, (d + 1) / 2, (q + 1) / 2], axis=1) for f, r, d, q in zip(frames, rec, diffs, drec)]
    write_pgm(path, np.concatenate(rows, axis=0))


def moving_square_corpus(n: int, size: int = 32, square: int = 6, stride: int = 4, seed: int = 0,
                         omega: float = 0.12) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic squares orbiting the image center on a dark background.

    Returns frames at time t and differences ``frame_t - frame_{t-stride}``.
    Motion is a deterministic function of position, so the earlier frame is
    recoverable from the current one.
    """
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2
    radius = rng.uniform(3.0, size / 2 - square / 2 - 2.0, size=n)
    angle = rng.uniform(0, 2 * np.pi, size=n)

    def draw(r, a):
        img = np.full((n, size, size), 0.1)
        xs = np.rint(c + r * np.cos(a) - square / 2).astype(int)
        ys = np.rint(c + r * np.sin(a) - square / 2).astype(int)
        for k in range(n):
            img[k, ys[k]:ys[k] + square, xs[k]:xs[k] + square] = 0.9
        return img

    now = draw(radius, angle)
    before = draw(radius, angle - omega * stride)
    return now, now - before

"""Mixture-density recurrent model over latent codes.

An LSTM consumes ``[z_t, a_t]`` and its hidden state parameterizes a mixture
of diagonal Gaussians over ``z_{t+1}``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .nn import LSTM, Adam, Dense, load_checkpoint, load_into, params_to_tensors, save_checkpoint
from .util import write_csv

LOG_STD_MIN = -8.0
LOG_STD_MAX = 3.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class MixtureParams:
    logits: np.ndarray  # (..., K)
    means: np.ndarray  # (..., K, d)
    log_std: np.ndarray  # (..., K, d)

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def n_components(self) -> int:
        return self.logits.shape[-1]

    def permuted(self, order) -> "MixtureParams":
        order = np.asarray(order)
        return MixtureParams(self.logits[..., order], self.means[..., order, :], self.log_std[..., order, :])

    def mean(self) -> np.ndarray:
        return np.sum(self.weights[..., None] * self.means, axis=-2)


def _component_log_density(mix: MixtureParams, target: np.ndarray) -> np.ndarray:
    x = np.asarray(target, dtype=np.float64)[..., None, :]
    u = (x - mix.means) * np.exp(-mix.log_std)
    return np.sum(-0.5 * u * u - mix.log_std - HALF_LOG_2PI, axis=-1)


def mdn_nll_terms(mix: MixtureParams, target: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood, shape = leading dims of ``target``."""
    log_pi = mix.logits - logsumexp(mix.logits)[..., None]
    return -logsumexp(log_pi + _component_log_density(mix, target))


def mdn_nll(mix: MixtureParams, target: np.ndarray) -> float:
    """Mean over leading dimensions of ``-log sum_k pi_k N(target; mu_k, sigma_k)``."""
    return float(np.mean(mdn_nll_terms(mix, target)))


def mdn_nll_grad(mix: MixtureParams, target: np.ndarray) -> tuple[float, MixtureParams]:
    """Mean NLL and its gradient with respect to logits, means and log-stds."""
    x = np.asarray(target, dtype=np.float64)[..., None, :]
    log_pi = mix.logits - logsumexp(mix.logits)[..., None]
    log_comp = _component_log_density(mix, target)
    joint = log_pi + log_comp
    total = logsumexp(joint)
    n = total.size
    resp = np.exp(joint - total[..., None])
    pi = np.exp(log_pi)
    inv_var = np.exp(-2.0 * mix.log_std)
    diff = x - mix.means
    r = resp[..., None]
    grad = MixtureParams(
        logits=(pi - resp) / n,
        means=-r * diff * inv_var / n,
        log_std=-r * (diff * diff * inv_var - 1.0) / n,
    )
    return float(-np.mean(total)), grad


def mdn_sample(mix: MixtureParams, seed: int | np.random.Generator) -> np.ndarray:
    """One draw from a single (unbatched) mixture."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = rng.choice(mix.n_components, p=mix.weights)
    return mix.means[k] + np.exp(mix.log_std[k]) * rng.standard_normal(mix.means.shape[-1])


def mdn_sample_many(mix: MixtureParams, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ks = rng.choice(mix.n_components, p=mix.weights, size=n)
    noise = rng.standard_normal((n, mix.means.shape[-1]))
    return mix.means[ks] + np.exp(mix.log_std[ks]) * noise


class MDNRNN:
    def __init__(self, z_dim: int = 32, action_dim: int = 3, hidden: int = 128, mixtures: int = 5,
                 seed: int = 0):
        if mixtures < 1:
            raise ValueError("mixtures must be >= 1")
        rng = np.random.default_rng(seed)
        self.z_dim = z_dim
        self.action_dim = action_dim
        self.hidden = hidden
        self.mixtures = mixtures
        self.lstm = LSTM(z_dim + action_dim, hidden, rng=rng, name="rnn.lstm")
        self.head = Dense(hidden, mixtures * (1 + 2 * z_dim), rng=rng, name="rnn.head")
        self._clip_mask = None

    def parameters(self):
        return self.lstm.parameters() + self.head.parameters()

    def initial_state(self, batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        h, c = self.lstm.zero_state(1 if batch is None else batch)
        return (h[0], c[0]) if batch is None else (h, c)

    def _split(self, raw: np.ndarray) -> MixtureParams:
        k, d = self.mixtures, self.z_dim
        lead = raw.shape[:-1]
        logits = raw[..., :k]
        means = raw[..., k:k + k * d].reshape(lead + (k, d))
        log_std = np.clip(raw[..., k + k * d:].reshape(lead + (k, d)), LOG_STD_MIN, LOG_STD_MAX)
        return MixtureParams(logits, means, log_std)

    def step(self, z: np.ndarray, action: np.ndarray, state: tuple[np.ndarray, np.ndarray]):
        """Single unbatched step: returns the mixture over the next latent and the new state."""
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        h, c = state
        if z.shape != (self.z_dim,) or action.shape != (self.action_dim,):
            raise ValueError(
                f"rnn_step expects z of length {self.z_dim} and action of length {self.action_dim}, "
                f"got {z.shape} and {action.shape}"
            )
        if np.shape(h) != (self.hidden,) or np.shape(c) != (self.hidden,):
            raise ValueError(f"hidden state must have length {self.hidden}, got {np.shape(h)}")
        x = np.concatenate([z, action])[None]
        h2, c2 = self.lstm.step(x, (h[None], c[None]))
        raw = h2[0] @ self.head.weight.value + self.head.bias.value
        return self._split(raw), (h2[0], c2[0])

    def forward_sequence(self, z: np.ndarray, actions: np.ndarray, state=None) -> MixtureParams:
        """Teacher-forced pass over (B, T, .) inputs; caches for :meth:`backward`.

        ``state`` is an optional batched (h, c) to start from; the final state
        is left in ``self.lstm.last_state``.
        """
        x = np.concatenate([z, actions], axis=-1)
        hs = self.lstm.forward(x, state)
        raw = self.head.forward(hs)
        k, d = self.mixtures, self.z_dim
        ls_raw = raw[..., k + k * d:]
        self._clip_mask = (ls_raw >= LOG_STD_MIN) & (ls_raw <= LOG_STD_MAX)
        return self._split(raw)

    def backward(self, grad: MixtureParams) -> None:
        lead = grad.logits.shape[:-1]
        g_ls = grad.log_std.reshape(lead + (-1,)) * self._clip_mask
        g_raw = np.concatenate([grad.logits, grad.means.reshape(lead + (-1,)), g_ls], axis=-1)
        self.lstm.backward(self.head.backward(g_raw))

    def sequence_loss(self, z_in, a_in, z_target, backward: bool = True, state=None) -> float:
        mix = self.forward_sequence(z_in, a_in, state)
        nll, grad = mdn_nll_grad(mix, z_target)
        if backward:
            self.backward(grad)
        else:
            self.lstm._cache = None
            self.head._cache = None
        return nll

    def meta(self) -> dict:
        return {"kind": "mdn-rnn", "mixtures": self.mixtures, "z_dim": self.z_dim,
                "h_dim": self.hidden, "action_dim": self.action_dim}

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, params_to_tensors(self.parameters()), self.meta())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MDNRNN":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "mdn-rnn":
            raise ValueError(f"{path} is not an mdn-rnn checkpoint")
        model = cls(z_dim=int(meta["z_dim"]), action_dim=int(meta["action_dim"]),
                    hidden=int(meta["h_dim"]), mixtures=int(meta["mixtures"]))
        load_into(model.parameters(), tensors)
        return model


@dataclass
class RnnTrainResult:
    curve: list[tuple[int, float, float]] = field(default_factory=list)

    def write_curve(self, path) -> None:
        write_csv(path, ["epoch", "train_nll", "heldout_nll"], self.curve)


def split_sequences(latents: np.ndarray, actions: np.ndarray):
    """Teacher-forcing triples: inputs at t, targets at t + 1."""
    return latents[:, :-1], actions[:, :-1], latents[:, 1:]


def heldout_nll(model: MDNRNN, latents: np.ndarray, actions: np.ndarray) -> float:
    z_in, a_in, z_out = split_sequences(latents, actions)
    return model.sequence_loss(z_in, a_in, z_out, backward=False)


def train_rnn(model: MDNRNN, latents: np.ndarray, actions: np.ndarray, epochs: int = 20, seed: int = 0,
              batch_size: int = 16, lr: float = 1e-3, heldout: tuple[np.ndarray, np.ndarray] | None = None,
              window: int | None = None, targets: np.ndarray | None = None) -> RnnTrainResult:
    """Teacher-forced NLL minimization with backpropagation through time.

    ``latents`` is (N, T, z_dim) and ``actions`` (N, T, action_dim). With
    ``window`` set below the sequence length, each sequence is cut into
    consecutive windows, one optimizer step per window, and the hidden state
    is carried across windows without gradient (truncated BPTT). ``targets``
    optionally replaces ``latents`` as the prediction target (for example
    sampled rather than mean latents). The curve has one row per epoch with
    the mean training NLL and the held-out NLL (NaN without a held-out set).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if window is not None and window < 1:
        raise ValueError("window must be >= 1")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    z_in, a_in, z_out = split_sequences(latents, actions)
    if targets is not None:
        if targets.shape != latents.shape:
            raise ValueError(f"targets shape {targets.shape} != latents shape {latents.shape}")
        z_out = targets[:, 1:]
    result = RnnTrainResult()
    n, steps = z_in.shape[:2]
    win = steps if window is None else min(window, steps)
    for epoch in range(1, epochs + 1):
        losses, weights = [], []
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            state = None
            for t0 in range(0, steps, win):
                sl = slice(t0, t0 + win)
                opt.zero_grad()
                nll = model.sequence_loss(z_in[idx, sl], a_in[idx, sl], z_out[idx, sl], state=state)
                if not np.isfinite(nll):
                    raise FloatingPointError(
                        f"non-finite MDN loss in epoch {epoch}, sequences {idx.tolist()}, from step {t0}")
                opt.step()
                state = model.lstm.last_state
                losses.append(nll)
                weights.append(len(idx) * (min(t0 + win, steps) - t0))
        train = float(np.average(losses, weights=weights))
        held = heldout_nll(model, *heldout) if heldout is not None else float("nan")
        result.curve.append((epoch, train, held))
    return result


def gaussian_baseline_nll(train_targets: np.ndarray, eval_targets: np.ndarray) -> float:
    """NLL of a single diagonal Gaussian fitted to the marginal of ``train_targets``."""
    flat = train_targets.reshape(-1, train_targets.shape[-1])
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0) + 1e-12
    mix = MixtureParams(np.zeros(1), mu[None], np.log(sd)[None])
    return mdn_nll(mix, eval_targets.reshape(-1, eval_targets.shape[-1]))


def two_mode_sequences(n: int, length: int, z_dim: int, noise: float, seed: int,
                       action_dim: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """z_{t+1} = s_t * z_t + noise * eps with s_t = +-1 equiprobable; zero actions."""
    rng = np.random.default_rng(seed)
    z = np.empty((n, length, z_dim))
    z[:, 0] = rng.standard_normal((n, z_dim))
    for t in range(1, length):
        s = rng.choice([-1.0, 1.0], size=(n, 1))
        z[:, t] = s * z[:, t - 1] + noise * rng.standard_normal((n, z_dim))
    return z, np.zeros((n, length, action_dim))


def two_mode_true_nll(latents: np.ndarray, noise: float) -> float:
    """NLL of the generating mixture 0.5 N(z_t, noise^2) + 0.5 N(-z_t, noise^2) on the data."""
    prev, nxt = latents[:, :-1], latents[:, 1:]
    means = np.stack([prev, -prev], axis=-2)
    mix = MixtureParams(np.zeros(prev.shape[:-1] + (2,)), means, np.full(means.shape, math.log(noise)))
    return mdn_nll(mix, nxt)

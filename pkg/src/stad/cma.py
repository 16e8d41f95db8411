"""Covariance Matrix Adaptation Evolution Strategy (minimization), ask/tell style.

Strategy constants follow Hansen's standard defaults: log-rank positive
recombination weights over the best ``mu = lambda // 2`` candidates,
cumulative step-size adaptation, and rank-one plus rank-mu covariance
updates. Ties in fitness are broken by candidate index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def default_population(dim: int) -> int:
    return 4 + int(math.floor(3 * math.log(dim)))


@dataclass
class CmaState:
    dim: int
    popsize: int
    mu: int
    weights: np.ndarray
    mueff: float
    cs: float
    damps: float
    cc: float
    c1: float
    cmu: float
    chi_n: float
    eigen_gap: int
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    ps: np.ndarray
    pc: np.ndarray
    B: np.ndarray
    D: np.ndarray
    generation: int = 0
    evaluations: int = 0
    eigen_generation: int = 0
    repairs: int = 0

    @property
    def invsqrtC(self) -> np.ndarray:
        return self.B @ np.diag(1.0 / self.D) @ self.B.T

    def condition_number(self) -> float:
        return float((self.D.max() / self.D.min()) ** 2)


def cma_init(x0, sigma0: float, popsize: int | None = None) -> CmaState:
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    d = x0.size
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if not (sigma0 > 0 and math.isfinite(sigma0)):
        raise ValueError(f"sigma0 must be positive and finite, got {sigma0}")
    lam = default_population(d) if popsize is None else int(popsize)
    if lam < 2:
        raise ValueError(f"population size must be >= 2, got {lam}")
    mu = lam // 2
    w = math.log((lam + 1) / 2) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w * w)
    cs = (mueff + 2) / (d + mueff + 5)
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (d + 1)) - 1) + cs
    cc = (4 + mueff / d) / (d + 4 + 2 * mueff / d)
    c1 = 2 / ((d + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((d + 2) ** 2 + mueff))
    chi_n = math.sqrt(d) * (1 - 1 / (4 * d) + 1 / (21 * d * d))
    eigen_gap = max(1, int(math.ceil(1.0 / (10 * d * (c1 + cmu)))))
    return CmaState(
        dim=d, popsize=lam, mu=mu, weights=w, mueff=float(mueff), cs=cs, damps=damps, cc=cc, c1=c1,
        cmu=cmu, chi_n=chi_n, eigen_gap=eigen_gap, mean=x0.copy(), sigma=float(sigma0),
        C=np.eye(d), ps=np.zeros(d), pc=np.zeros(d), B=np.eye(d), D=np.ones(d),
    )


def _symmetrize(C: np.ndarray) -> np.ndarray:
    upper = np.triu(C)
    return upper + np.triu(C, 1).T


def update_eigensystem(state: CmaState, force: bool = False) -> None:
    """Refresh B, D from C when stale; floor tiny or negative eigenvalues."""
    if not force and state.generation - state.eigen_generation < state.eigen_gap:
        return
    state.C = _symmetrize(state.C)
    vals, vecs = np.linalg.eigh(state.C)
    floor = 1e-14 * max(vals.max(), 1e-300)
    if vals.min() <= floor:
        log.warning("covariance lost positive definiteness (min eigenvalue %.3e); repairing", vals.min())
        vals = np.maximum(vals, floor)
        state.C = _symmetrize((vecs * vals) @ vecs.T)
        state.repairs += 1
    state.B = vecs
    state.D = np.sqrt(vals)
    state.eigen_generation = state.generation


def ask(state: CmaState, rng: np.random.Generator) -> np.ndarray:
    """``popsize`` candidate genomes, one per row."""
    update_eigensystem(state)
    n = rng.standard_normal((state.popsize, state.dim))
    return state.mean + state.sigma * (n * state.D) @ state.B.T


def _ranking(fitness: np.ndarray) -> np.ndarray:
    fit = np.asarray(fitness, dtype=np.float64).copy()
    bad = ~np.isfinite(fit)
    if bad.any():
        log.warning("%d non-finite fitness value(s) ranked worst", int(bad.sum()))
        fit[bad] = np.inf
    # stable sort: equal fitness keeps candidate index order; non-finite go last in index order
    return np.lexsort((np.arange(len(fit)), bad, fit))


def tell(state: CmaState, candidates: np.ndarray, fitness) -> CmaState:
    """Update the search distribution from evaluated candidates (lower is better)."""
    X = np.asarray(candidates, dtype=np.float64)
    fitness = np.asarray(fitness, dtype=np.float64).reshape(-1)
    if X.shape != (state.popsize, state.dim) or fitness.shape != (state.popsize,):
        raise ValueError(
            f"tell expects {state.popsize} candidates of dimension {state.dim} and as many fitness values"
        )
    order = _ranking(fitness)
    d = state.dim
    old_mean = state.mean
    Y = (X[order[: state.mu]] - old_mean) / state.sigma
    yw = state.weights @ Y
    state.mean = old_mean + state.sigma * yw

    state.ps = (1 - state.cs) * state.ps + math.sqrt(state.cs * (2 - state.cs) * state.mueff) * (state.invsqrtC @ yw)
    gen = state.generation + 1
    ps_norm = float(np.linalg.norm(state.ps))
    hsig = ps_norm / math.sqrt(1 - (1 - state.cs) ** (2 * gen)) / state.chi_n < 1.4 + 2 / (d + 1)
    state.pc = (1 - state.cc) * state.pc + hsig * math.sqrt(state.cc * (2 - state.cc) * state.mueff) * yw

    delta_h = (1 - hsig) * state.cc * (2 - state.cc)
    rank_one = np.outer(state.pc, state.pc) + delta_h * state.C
    rank_mu = (Y.T * state.weights) @ Y
    state.C = (1 - state.c1 - state.cmu) * state.C + state.c1 * rank_one + state.cmu * rank_mu
    state.C = _symmetrize(state.C)

    state.sigma *= math.exp((state.cs / state.damps) * (ps_norm / state.chi_n - 1))
    state.generation = gen
    state.evaluations += state.popsize
    update_eigensystem(state)
    return state


def to_tensors(state: CmaState) -> dict[str, np.ndarray]:
    """Resumable snapshot; strategy constants are recomputed from (x0 dim, popsize)."""
    return {
        "mean": state.mean,
        "sigma": np.array(state.sigma),
        "C": state.C,
        "ps": state.ps,
        "pc": state.pc,
        "B": state.B,
        "D": state.D,
        "counters": np.array([state.popsize, state.generation, state.evaluations, state.eigen_generation,
                              state.repairs], dtype=np.float64),
    }


def from_tensors(t: dict[str, np.ndarray]) -> CmaState:
    popsize, generation, evaluations, eigen_generation, repairs = (int(v) for v in t["counters"])
    state = cma_init(t["mean"], float(t["sigma"]), popsize)
    state.C = t["C"].copy()
    state.ps = t["ps"].copy()
    state.pc = t["pc"].copy()
    state.B = t["B"].copy()
    state.D = t["D"].copy()
    state.generation = generation
    state.evaluations = evaluations
    state.eigen_generation = eigen_generation
    state.repairs = repairs
    return state


def minimize(f, x0, sigma0: float, seed: int, max_evals: int, target: float | None = None,
             popsize: int | None = None) -> tuple[float, np.ndarray, CmaState, list[float]]:
    """Plain optimization loop. Returns best f, best x, final state, best-so-far trace per generation."""
    state = cma_init(x0, sigma0, popsize)
    rng = np.random.default_rng(seed)
    best_f, best_x = math.inf, np.asarray(x0, dtype=np.float64).copy()
    trace = []
    while state.evaluations + state.popsize <= max_evals:
        X = ask(state, rng)
        fit = np.array([f(x) for x in X])
        i = int(np.argmin(fit))
        if fit[i] < best_f:
            best_f, best_x = float(fit[i]), X[i].copy()
        tell(state, X, fit)
        trace.append(best_f)
        if target is not None and best_f < target:
            break
    return best_f, best_x, state, trace

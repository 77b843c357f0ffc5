"""UCB acquisition and its maximisation over design, joint, and batch domains."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .gp import ContractError, GPModel, joint_sample, posterior_mean_var


@dataclass(frozen=True)
class AcquisitionConfig:
    beta: float = 4.0
    batch_size: int = 10
    mc_samples: int = 128
    raw_candidates: int = 1024
    refine_steps: int = 50
    refine_restarts: int = 4
    batch_candidates: int = 512
    batch_mode: str = "greedy"
    beta_schedule: str = "constant"
    schedule_delta: float = 0.1

    def __post_init__(self):
        if self.beta <= 0:
            raise ContractError("beta must be positive")
        if self.batch_size < 0:
            raise ContractError("batch_size must be >= 0")
        if self.batch_size > 0 and self.mc_samples < 64:
            raise ContractError("mc_samples must be >= 64 when batch_size > 0")
        if self.batch_mode != "greedy":
            raise ContractError("only greedy batch construction is implemented")
        if self.beta_schedule not in ("constant", "log"):
            raise ContractError("beta_schedule must be 'constant' or 'log'")

    def beta_at(self, t: int) -> float:
        """Exploration weight at iteration ``t`` (1-based)."""
        if self.beta_schedule == "constant":
            return self.beta
        t = max(t, 1)
        return 2.0 * math.log(t * t * math.pi**2 / (6.0 * self.schedule_delta))


def ucb_value(model: GPModel, V: np.ndarray, beta: float) -> np.ndarray:
    """``mu + sqrt(beta) * sigma`` with the latent standard deviation."""
    mean, var = posterior_mean_var(model, V)
    return mean + math.sqrt(beta) * np.sqrt(var)


def sobol_points(dim: int, n: int, seed=None) -> np.ndarray:
    """First ``n`` points of a scrambled Sobol' sequence (drawn in a power-of-two block)."""
    m = max(0, math.ceil(math.log2(max(n, 1))))
    return qmc.Sobol(dim, scramble=True, seed=seed).random_base2(m)[:n]


def _fill(template: np.ndarray, free: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.repeat(template[None, :], values.shape[0], axis=0)
    out[:, free] = values
    return out


def _pattern_search(model, template, free, starts, start_vals, beta, steps):
    """Coordinate-wise compass search run on all starts at once."""
    pts = starts.copy()
    vals = start_vals.copy()
    k, F = pts.shape
    step = np.full(k, 0.1)
    eye = np.eye(F)
    for _ in range(steps):
        active = step > 1e-6
        if not active.any():
            break
        moves = np.concatenate([eye, -eye])  # (2F, F)
        cand = np.clip(pts[:, None, :] + step[:, None, None] * moves[None], 0.0, 1.0)
        cv = ucb_value(model, _fill(template, free, cand.reshape(-1, F)), beta).reshape(k, 2 * F)
        best = cv.argmax(1)
        gain = cv[np.arange(k), best] > vals + 1e-15
        upd = gain & active
        pts[upd] = cand[upd, best[upd]]
        vals[upd] = cv[upd, best[upd]]
        step[~gain] *= 0.5
    return pts, vals


def maximize_ucb(
    model: GPModel,
    d: int,
    fixed_context: Optional[np.ndarray],
    free_context_indices: Sequence[int] = (),
    config: AcquisitionConfig = AcquisitionConfig(),
    seed=None,
    beta: Optional[float] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Maximise UCB over the design box and the free context coordinates.

    Non-free context coordinates stay at ``fixed_context``. Returns the design
    vector and the full context vector (free coordinates replaced).
    """
    v, _ = _maximize(model, d, fixed_context, free_context_indices, config, seed, beta)
    return v[:d], v[d:]


def _maximize(model, d, fixed_context, free_context_indices, config, seed, beta=None):
    if d < 1:
        raise ContractError("design space must have at least one dimension")
    beta = config.beta if beta is None else beta
    z = np.zeros(0) if fixed_context is None else np.asarray(fixed_context, dtype=float).ravel()
    free_ctx = sorted(int(j) for j in free_context_indices)
    if any(j < 0 or j >= z.size for j in free_ctx):
        raise ContractError("free context index out of range")
    template = np.concatenate([np.full(d, 0.5), z])
    free = np.array(list(range(d)) + [d + j for j in free_ctx], dtype=int)
    F = free.size

    raw = sobol_points(F, max(1, config.raw_candidates), seed)
    vals = ucb_value(model, _fill(template, free, raw), beta)
    order = np.argsort(-vals, kind="stable")[: max(1, config.refine_restarts)]
    pts, pvals = _pattern_search(model, template, free, raw[order], vals[order], beta, config.refine_steps)
    i = int(np.argmax(pvals))
    best = _fill(template, free, pts[i : i + 1])[0]
    return best, float(pvals[i])


def qucb_values(samples: np.ndarray, mean: np.ndarray, beta: float) -> np.ndarray:
    """Per-sample reparameterised UCB utilities ``mu + sqrt(beta*pi/2)|f - mu|``."""
    return mean[None, :] + math.sqrt(beta * math.pi / 2.0) * np.abs(samples - mean[None, :])


def select_batch(
    model: GPModel,
    d: int,
    fixed_context: np.ndarray,
    Q: int,
    config: AcquisitionConfig = AcquisitionConfig(),
    seed=None,
    return_trace: bool = False,
):
    """Greedy Monte-Carlo batch UCB over designs at a fixed context.

    A candidate pool (scrambled Sobol' designs plus the analytic UCB maximiser)
    gets one joint posterior draw with fixed base samples. Points are added one
    at a time, each maximising the sample average of the running batch maximum
    of the reparameterised UCB utility.
    """
    if Q < 1:
        raise ContractError("Q must be >= 1")
    rng = np.random.default_rng(seed)
    z = np.asarray(fixed_context, dtype=float).ravel()
    best, _ = _maximize(model, d, z, (), config, rng.integers(2**31))
    pool_x = sobol_points(d, max(config.batch_candidates, Q), rng.integers(2**31))
    pool_x = np.vstack([best[None, :d], pool_x])
    pool = np.hstack([pool_x, np.repeat(z[None, :], pool_x.shape[0], axis=0)])
    base = rng.standard_normal((config.mc_samples, pool.shape[0]))
    samples = joint_sample(model, pool, config.mc_samples, base_samples=base)
    mean, _ = posterior_mean_var(model, pool)
    util = qucb_values(samples, mean, config.beta)

    running = np.full(config.mc_samples, -np.inf)
    chosen: list[int] = []
    trace = []
    for _ in range(Q):
        scores = np.maximum(running[:, None], util).mean(0)
        scores[chosen] = -np.inf
        j = int(np.argmax(scores))
        chosen.append(j)
        running = np.maximum(running, util[:, j])
        trace.append(float(running.mean()))
    batch = pool_x[chosen].copy()
    batch = _separate(batch, rng)
    return (batch, trace) if return_trace else batch


def _separate(batch: np.ndarray, rng: np.random.Generator, min_dist: float = 1e-6) -> np.ndarray:
    for i in range(1, batch.shape[0]):
        while np.min(np.linalg.norm(batch[:i] - batch[i], axis=1)) < min_dist:
            batch[i] = np.clip(batch[i] + rng.uniform(-1e-5, 1e-5, batch.shape[1]), 0.0, 1.0)
    return batch

"""Observational-to-interventional switch driven by a regret-difference bound."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .gp import ContractError, GPModel, kl_multivariate, posterior, posterior_mean_var

OBSERVATIONAL = "observational"
INTERVENTIONAL = "interventional"


@dataclass(frozen=True)
class StoppingConfig:
    """Switch-rule settings.

    ``kappa_rule``: ``"sqrt_log"`` gives the constant ``sqrt(2 ln(1/delta))``;
    ``"constant"`` uses ``kappa_value``. ``noise_reading``: ``"variance"`` plugs
    the noise variance in for ``sigma_noise`` in the threshold, ``"std"`` the
    standard deviation. ``previous_posterior``: ``"refit"`` rebuilds the
    ``t-1`` posterior from ``D_{t-1}`` with the time-``t`` hyperparameters,
    ``"stored"`` uses the model that was actually fitted at ``t-1``.
    """

    delta: float = 0.1
    kappa_rule: str = "sqrt_log"
    kappa_value: float = 1.0
    kl_reference: str = "training_inputs"
    v_eps: float = 1e-9
    noise_reading: str = "variance"
    previous_posterior: str = "refit"

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ContractError("delta must lie in (0, 1)")
        if self.kappa_rule not in ("sqrt_log", "constant"):
            raise ContractError("kappa_rule must be 'sqrt_log' or 'constant'")
        if self.kappa_rule == "constant" and self.kappa_value < 0:
            raise ContractError("kappa must be >= 0")
        if self.kl_reference not in ("training_inputs", "last_query"):
            raise ContractError("kl_reference must be 'training_inputs' or 'last_query'")
        if self.noise_reading not in ("variance", "std"):
            raise ContractError("noise_reading must be 'variance' or 'std'")
        if self.previous_posterior not in ("refit", "stored"):
            raise ContractError("previous_posterior must be 'refit' or 'stored'")

    def kappa(self, t: int) -> float:
        if self.kappa_rule == "constant":
            return self.kappa_value
        return math.sqrt(2.0 * math.log(1.0 / self.delta))


@dataclass(frozen=True)
class StoppingState:
    """Posterior quantities at ``t-1`` and ``t`` needed by the switch rule."""

    incumbent_prev: np.ndarray
    incumbent_curr: np.ndarray
    mu_prev_at_prev: float
    mu_curr_at_curr: float
    var_curr_at_prev: float
    var_curr_at_curr: float
    cov_curr_pair: float
    last_query: np.ndarray
    var_prevmodel_at_incumbent: float
    var_prevmodel_at_query: float
    kl_successive: float
    phase: str = OBSERVATIONAL


def gaussian_positive_part_mean(mean: float, std: float) -> float:
    """``E[max(X, 0)]`` for ``X ~ N(mean, std^2)``: ``std (phi(g) + g Phi(g))``, ``g = mean/std``."""
    if std <= 0:
        return max(mean, 0.0)
    g = mean / std
    return std * (norm.pdf(g) + g * norm.cdf(g))


def incumbent_std(state: StoppingState) -> float:
    """Posterior std of ``f(v*_t) - f(v*_{t-1})`` at time ``t``."""
    rad = state.var_curr_at_curr - 2.0 * state.cov_curr_pair + state.var_curr_at_prev
    if rad < -1e-10:
        raise ContractError(f"negative incumbent-difference variance {rad:.3e}")
    return math.sqrt(max(rad, 0.0))


def regret_diff_bound(state: StoppingState, kappa: float, v_eps: float = 1e-9) -> float:
    """Upper bound on the change in expected minimum simple regret.

    Sum of the Gaussian positive-part term ``v (phi(g) + g Phi(g))`` with
    ``g = -dmu / v``, the absolute incumbent mean shift ``|dmu|`` and
    ``kappa * sqrt(KL / 2)`` between successive posteriors.
    """
    dmu = state.mu_prev_at_prev - state.mu_curr_at_curr
    v = incumbent_std(state)
    first = max(-dmu, 0.0) if v < v_eps else gaussian_positive_part_mean(-dmu, v)
    return first + abs(dmu) + kappa * math.sqrt(0.5 * max(state.kl_successive, 0.0))


def switch_threshold(state: StoppingState, config: StoppingConfig, kappa: float, sigma2_noise: float) -> float:
    if sigma2_noise <= 0:
        raise ContractError("noise variance must be positive")
    s_noise = sigma2_noise if config.noise_reading == "variance" else math.sqrt(sigma2_noise)
    var_q = state.var_prevmodel_at_query
    num = (state.var_prevmodel_at_incumbent + kappa / 2.0) * var_q * math.sqrt(-2.0 * math.log(config.delta))
    den = math.sqrt(s_noise) * (var_q + 1.0 / s_noise)
    return num / den


def should_switch(bound: float, threshold: float) -> bool:
    return bound <= threshold


def one_step_kl(var_prev: float, mean_prev: float, y: float, noise: float) -> float:
    """KL(p(f|D_t) || p(f|D_{t-1})) after one observation, same hyperparameters."""
    s2 = var_prev
    return 0.5 * (
        math.log1p(s2 / noise) - s2 / (s2 + noise) + s2 * (y - mean_prev) ** 2 / (s2 + noise) ** 2
    )


def build_state(
    model_curr: GPModel,
    model_prev: GPModel,
    V_curr: np.ndarray,
    y_curr: np.ndarray,
    config: StoppingConfig,
) -> StoppingState:
    """Assemble the switch-rule inputs from successive posteriors.

    ``V_curr``/``y_curr`` hold ``D_t``; its last row is the newest query and
    ``D_{t-1}`` is everything before it. Incumbents are the observed-best rows.
    """
    V_curr = np.atleast_2d(V_curr)
    n = V_curr.shape[0]
    if n < 2:
        raise ContractError("need at least two observations")
    i_prev = int(np.argmax(y_curr[: n - 1]))
    i_curr = int(np.argmax(y_curr))
    inc_prev, inc_curr, query = V_curr[i_prev], V_curr[i_curr], V_curr[n - 1]

    pts = np.vstack([inc_curr, inc_prev])
    mom_t = posterior(model_curr, pts)
    m_prev, v_prev = posterior_mean_var(model_prev, np.vstack([inc_prev, inc_curr, query]))

    if config.kl_reference == "training_inputs":
        ref = V_curr
    else:
        ref = query[None, :]
    p = posterior(model_curr, ref)
    q = posterior(model_prev, ref)
    kl = kl_multivariate(p, q)

    return StoppingState(
        incumbent_prev=inc_prev,
        incumbent_curr=inc_curr,
        mu_prev_at_prev=float(m_prev[0]),
        mu_curr_at_curr=float(mom_t.mean[0]),
        var_curr_at_prev=float(mom_t.covariance[1, 1]),
        var_curr_at_curr=float(mom_t.covariance[0, 0]),
        cov_curr_pair=float(mom_t.covariance[0, 1]),
        last_query=query,
        var_prevmodel_at_incumbent=float(v_prev[1]),
        var_prevmodel_at_query=float(v_prev[2]),
        kl_successive=kl,
    )


@dataclass
class SwitchMonitor:
    """One-way latch for the phase; evaluates the rule only while observational."""

    config: StoppingConfig
    phase: str = OBSERVATIONAL
    switch_step: Optional[int] = None
    evaluations: int = 0

    def update(self, model_curr: GPModel, model_prev: GPModel, V: np.ndarray, y: np.ndarray,
               step: int) -> tuple[float, float]:
        if self.phase != OBSERVATIONAL:
            raise RuntimeError("switch rule evaluated after the phase latched")
        state = build_state(model_curr, model_prev, V, y, self.config)
        kappa = self.config.kappa(step)
        bound = regret_diff_bound(state, kappa, self.config.v_eps)
        thr = switch_threshold(state, self.config, kappa, model_curr.noise_variance)
        self.evaluations += 1
        if should_switch(bound, thr):
            self.phase = INTERVENTIONAL
            self.switch_step = step
        return bound, thr

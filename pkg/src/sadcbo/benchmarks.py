"""Synthetic test problems with irrelevant contexts, and a Sobol analyser."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .gp import ContractError

logger = logging.getLogger(__name__)

HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN_A = np.array(
    [
        [10, 3, 17, 3.5, 1.7, 8],
        [0.05, 10, 17, 0.1, 8, 14],
        [3, 3.5, 1.7, 10, 17, 8],
        [17, 8, 0.05, 10, 0.1, 14],
    ]
)
HARTMANN_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)
# global minimiser of hartmann6 (value -3.32237)
HARTMANN_ARGMIN = np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573])

ACKLEY_BOUNDS = (-5.0, 5.0)

CONTEXT_DISTRIBUTIONS = ("uniform", "beta22", "beta0505")


def _check_box(v: np.ndarray, lo: float, hi: float, name: str) -> np.ndarray:
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if np.any(v < lo - 1e-12) or np.any(v > hi + 1e-12):
        raise ContractError(f"{name} input outside [{lo}, {hi}]")
    return v


def hartmann6(v: np.ndarray) -> np.ndarray:
    """Six-dimensional Hartmann function on ``[0, 1]^6`` (to be minimised).

    The exponent uses squared deviations ``A_ij (v_j - P_ij)^2``; the linear
    form is not bounded by ``sum(alpha)`` and does not reproduce the known
    Sobol indices of this function.
    """
    v = _check_box(v, 0.0, 1.0, "hartmann6")
    if v.shape[1] != 6:
        raise ContractError("hartmann6 expects 6 columns")
    inner = (HARTMANN_A[None] * (v[:, None, :] - HARTMANN_P[None]) ** 2).sum(-1)
    return -(np.exp(-inner) @ HARTMANN_ALPHA)


def ackley5(v: np.ndarray) -> np.ndarray:
    """Five-dimensional Ackley function on ``[-5, 5]^5`` (to be minimised)."""
    v = _check_box(v, *ACKLEY_BOUNDS, "ackley5")
    if v.shape[1] != 5:
        raise ContractError("ackley5 expects 5 columns")
    d = v.shape[1]
    term1 = -20.0 * np.exp(-0.2 * np.sqrt((v**2).sum(1) / d))
    term2 = -np.exp(np.cos(2.0 * np.pi * v).sum(1) / d)
    # pair each term with its constant so the origin evaluates to exactly 0
    return (term1 + 20.0) + (term2 + math.e)


@dataclass(frozen=True)
class BaseFunction:
    name: str
    dim: int
    lower: float
    upper: float
    func: Callable[[np.ndarray], np.ndarray]
    argmin: np.ndarray

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * np.asarray(u, dtype=float)


BASE_FUNCTIONS = {
    "ackley5": BaseFunction("ackley5", 5, *ACKLEY_BOUNDS, ackley5, np.zeros(5)),
    "hartmann6": BaseFunction("hartmann6", 6, 0.0, 1.0, hartmann6, HARTMANN_ARGMIN),
}

# default roles: which base coordinates are designs and which are contexts
DEFAULT_ROLES = {
    "ackley5": dict(design_indices=(0, 1), relevant_context_indices=(2, 3, 4), num_irrelevant_contexts=8),
    "hartmann6": dict(design_indices=(1, 4, 5), relevant_context_indices=(0, 2, 3), num_irrelevant_contexts=6),
}


def _canonical_name(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "")
    aliases = {"ackley5": "ackley5", "ackley5d": "ackley5", "ackley": "ackley5",
               "hartmann6": "hartmann6", "hartmann6d": "hartmann6", "hartmann": "hartmann6"}
    if key not in aliases:
        raise ContractError(f"unknown base function {name!r}")
    return aliases[key]


@functools.lru_cache(maxsize=None)
def output_range(name: str, probe_log2: int = 20) -> tuple[float, float]:
    """Min/max of the negated base function over a Sobol probe plus the optimum.

    The lower end gets a 1% margin so unseen points still map inside [0, 1].
    """
    base = BASE_FUNCTIONS[_canonical_name(name)]
    probe = qmc.Sobol(base.dim, scramble=True, seed=12345).random_base2(probe_log2)
    vals = -base.func(base.from_unit(probe))
    top = float(-base.func(base.argmin[None, :])[0])
    low = float(vals.min())
    high = max(top, float(vals.max()))
    return low - 0.01 * (high - low), high


@dataclass(frozen=True)
class ProblemSpec:
    """Role assignment and noise for one benchmark problem (0-based base dims)."""

    base_function: str = "ackley5"
    design_indices: tuple[int, ...] = (0, 1)
    relevant_context_indices: tuple[int, ...] = (2, 3, 4)
    num_irrelevant_contexts: int = 8
    context_distribution: str = "uniform"
    noise_variance: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        name = _canonical_name(self.base_function)
        object.__setattr__(self, "base_function", name)
        object.__setattr__(self, "design_indices", tuple(int(i) for i in self.design_indices))
        object.__setattr__(self, "relevant_context_indices", tuple(int(i) for i in self.relevant_context_indices))
        dims = sorted(self.design_indices + self.relevant_context_indices)
        if dims != list(range(BASE_FUNCTIONS[name].dim)):
            raise ContractError(
                f"design and relevant context indices must partition 0..{BASE_FUNCTIONS[name].dim - 1}"
            )
        if not self.design_indices:
            raise ContractError("at least one design variable is required")
        if self.num_irrelevant_contexts < 0:
            raise ContractError("num_irrelevant_contexts must be >= 0")
        if self.context_distribution not in CONTEXT_DISTRIBUTIONS:
            raise ContractError(f"context_distribution must be one of {CONTEXT_DISTRIBUTIONS}")
        if self.noise_variance < 0:
            raise ContractError("noise_variance must be >= 0")

    @classmethod
    def default(cls, base_function: str, **overrides) -> "ProblemSpec":
        name = _canonical_name(base_function)
        return cls(base_function=name, **{**DEFAULT_ROLES[name], **overrides})


@dataclass(frozen=True)
class Problem:
    """A maximisation problem on the unit cube ``[x, z]`` with outputs in [0, 1].

    Contexts are ordered relevant first, then irrelevant; ``relevant_contexts``
    lists their 0-based context indices.
    """

    spec: ProblemSpec
    out_low: float
    out_high: float
    true_max: float = 1.0
    base: BaseFunction = field(repr=False, default=None)

    @property
    def d(self) -> int:
        return len(self.spec.design_indices)

    @property
    def c(self) -> int:
        return len(self.spec.relevant_context_indices) + self.spec.num_irrelevant_contexts

    @property
    def dim(self) -> int:
        return self.d + self.c

    @property
    def relevant_contexts(self) -> tuple[int, ...]:
        return tuple(range(len(self.spec.relevant_context_indices)))

    @property
    def noise_variance(self) -> float:
        return self.spec.noise_variance

    def _base_input(self, V: np.ndarray) -> np.ndarray:
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if V.shape[1] != self.dim:
            raise ContractError(f"expected {self.dim} columns, got {V.shape[1]}")
        if np.any(V < -1e-12) or np.any(V > 1 + 1e-12):
            raise ContractError("inputs must lie in the unit cube")
        V = np.clip(V, 0.0, 1.0)
        u = np.empty((V.shape[0], self.base.dim))
        u[:, list(self.spec.design_indices)] = V[:, : self.d]
        k = len(self.spec.relevant_context_indices)
        u[:, list(self.spec.relevant_context_indices)] = V[:, self.d : self.d + k]
        return self.base.from_unit(u)

    def evaluate_true(self, V: np.ndarray) -> np.ndarray:
        raw = -self.base.func(self._base_input(V))
        return (raw - self.out_low) / (self.out_high - self.out_low)

    def evaluate(self, V: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        f = self.evaluate_true(V)
        return f + math.sqrt(self.noise_variance) * rng.standard_normal(f.shape)

    def split(self, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        V = np.atleast_2d(V)
        return V[:, : self.d], V[:, self.d :]


def make_problem(spec: ProblemSpec) -> Problem:
    base = BASE_FUNCTIONS[spec.base_function]
    low, high = output_range(spec.base_function)
    return Problem(spec=spec, out_low=low, out_high=high, true_max=1.0, base=base)


def sample_context(distribution: str, count: int, c: int, rng: np.random.Generator) -> np.ndarray:
    """IID per-coordinate context draws, shape ``(count, c)``."""
    if distribution == "uniform":
        return rng.random((count, c))
    if distribution == "beta22":
        return rng.beta(2.0, 2.0, (count, c))
    if distribution == "beta0505":
        return rng.beta(0.5, 0.5, (count, c))
    raise ContractError(f"unknown context distribution {distribution!r}")


def context_mean(distribution: str) -> float:
    if distribution not in CONTEXT_DISTRIBUTIONS:
        raise ContractError(f"unknown context distribution {distribution!r}")
    return 0.5


def sobol_indices(function: Callable[[np.ndarray], np.ndarray], dim: int, n_samples: int,
                  seed=None) -> tuple[np.ndarray, np.ndarray]:
    """First- and total-order Sobol indices over ``[0, 1]^dim``.

    Saltelli sampling with ``n_samples`` base rows (a power of two) from a
    scrambled Sobol' sequence, giving ``n_samples * (dim + 2)`` evaluations.
    First order uses the Saltelli (2010) estimator, total order Jansen's.
    """
    if n_samples < 1024:
        logger.warning("n_samples=%d is small; Sobol estimates will be noisy", n_samples)
    if n_samples & (n_samples - 1):
        raise ContractError("n_samples must be a power of two")
    base = qmc.Sobol(2 * dim, scramble=True, seed=seed).random_base2(int(math.log2(n_samples)))
    A, B = base[:, :dim], base[:, dim:]
    fA = np.asarray(function(A), dtype=float)
    fB = np.asarray(function(B), dtype=float)
    var = np.var(np.concatenate([fA, fB]))
    first = np.empty(dim)
    total = np.empty(dim)
    for i in range(dim):
        ABi = A.copy()
        ABi[:, i] = B[:, i]
        fABi = np.asarray(function(ABi), dtype=float)
        first[i] = np.mean(fB * (fABi - fA)) / var
        total[i] = 0.5 * np.mean((fA - fABi) ** 2) / var
    return first, total


def unit_base_function(name: str) -> tuple[Callable[[np.ndarray], np.ndarray], int]:
    """Native base function composed with the unit-cube input map."""
    base = BASE_FUNCTIONS[_canonical_name(name)]
    return (lambda u: base.func(base.from_unit(u))), base.dim

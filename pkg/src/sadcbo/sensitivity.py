"""Relevance scores for context variables and the selection rules built on them.

Context indices here are 0-based positions within ``z``; the full-coordinate
column of context ``j`` is ``d + j``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gp import (
    ContractError,
    FactorizationError,
    FitConfig,
    GPModel,
    fit_hyperparameters,
    kl_univariate,
    kl_univariate_array,
    log_marginal_likelihood,
    posterior_mean_var,
    predictive_distribution,
)

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Ordered observations ``(x_i, z_i, y_i)`` with per-point query costs.

    ``f`` keeps the noiseless objective value of each query when it is known
    (benchmarks), used only for reporting.
    """

    d: int
    c: int
    X: np.ndarray = None
    Z: np.ndarray = None
    y: np.ndarray = None
    costs: np.ndarray = None
    f: np.ndarray = None

    def __post_init__(self):
        self.y = np.zeros(0) if self.y is None else np.asarray(self.y, dtype=float).ravel()
        n = self.y.size
        # reshape by row count: a zero-width block cannot infer its rows
        try:
            self.X = np.zeros((0, self.d)) if self.X is None else np.asarray(self.X, dtype=float).reshape(n, self.d)
            self.Z = np.zeros((0, self.c)) if self.Z is None else np.asarray(self.Z, dtype=float).reshape(n, self.c)
        except ValueError:
            raise ContractError("dataset columns have inconsistent lengths") from None
        self.costs = np.zeros(n) if self.costs is None else np.asarray(self.costs, dtype=float).ravel()
        self.f = np.full(n, np.nan) if self.f is None else np.asarray(self.f, dtype=float).ravel()
        if not (self.X.shape[0] == self.Z.shape[0] == n == self.costs.size == self.f.size):
            raise ContractError("dataset columns have inconsistent lengths")

    def __len__(self) -> int:
        return self.y.size

    @property
    def V(self) -> np.ndarray:
        return np.hstack([self.X, self.Z])

    def append(self, x, z, y, cost=0.0, f=np.nan) -> None:
        self.X = np.vstack([self.X, np.asarray(x, dtype=float).reshape(1, self.d)])
        self.Z = np.vstack([self.Z, np.asarray(z, dtype=float).reshape(1, self.c)])
        self.y = np.append(self.y, float(y))
        self.costs = np.append(self.costs, float(cost))
        self.f = np.append(self.f, float(f))

    def head(self, n: int) -> "Dataset":
        return Dataset(self.d, self.c, self.X[:n], self.Z[:n], self.y[:n], self.costs[:n], self.f[:n])


@dataclass(frozen=True)
class FCDataset:
    points: np.ndarray  # full-coordinate rows
    gamma_members: int
    batch_members: int

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SensitivityReport:
    raw_scores: np.ndarray
    cost_weighted: np.ndarray
    ranking: tuple[int, ...]
    selected: tuple[int, ...]
    method: str = "FC"


def high_value_indices(y: np.ndarray, gamma: float) -> np.ndarray:
    """Rows whose output is at least ``gamma`` times the running best."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError("gamma must lie in [0, 1]")
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        return np.zeros(0, dtype=int)
    y_best = y.max()
    if y_best <= 0:
        # ratio test is meaningless without a positive best; keep the top share
        k = max(1, math.ceil((1.0 - gamma) * y.size))
        return np.sort(np.argsort(-y, kind="stable")[:k])
    return np.flatnonzero(y / y_best >= gamma)


def assemble_fc_dataset(dataset: Dataset, gamma: float, batch: Optional[np.ndarray],
                        current_context: np.ndarray) -> FCDataset:
    """High-value observed points plus the acquisition batch at the current context."""
    keep = high_value_indices(dataset.y, gamma)
    parts = [dataset.V[keep]]
    n_batch = 0
    if batch is not None and len(batch):
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        z = np.asarray(current_context, dtype=float).reshape(1, -1)
        parts.append(np.hstack([batch, np.repeat(z, batch.shape[0], axis=0)]))
        n_batch = batch.shape[0]
    return FCDataset(np.vstack(parts) if parts else np.zeros((0, dataset.d + dataset.c)), keep.size, n_batch)


def _collapse(V: np.ndarray, col: int, value: float) -> np.ndarray:
    W = V.copy()
    W[:, col] = value
    return W


def fc_relevance(model: GPModel, v: np.ndarray, j: int, d: int, collapse_value: float = 0.0) -> float:
    """KL between the predictive at ``v`` and at ``v`` with context ``j`` zeroed."""
    v = np.asarray(v, dtype=float).ravel()
    if not 0 <= j < v.size - d:
        raise ContractError("context index out of range")
    p = predictive_distribution(model, v)
    q = predictive_distribution(model, _collapse(v[None, :], d + j, collapse_value)[0])
    return max(kl_univariate(p, q), 0.0)


def fc_relevance_matrix(model: GPModel, V: np.ndarray, d: int, collapse_value: float = 0.0) -> np.ndarray:
    """``r[i, j]`` for every row of ``V`` and every context ``j`` (vectorised)."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n, c = V.shape[0], V.shape[1] - d
    if c == 0:
        return np.zeros((n, 0))
    m0, s0 = posterior_mean_var(model, V)
    stacked = np.vstack([_collapse(V, d + j, collapse_value) for j in range(c)])
    m1, s1 = posterior_mean_var(model, stacked)
    noise = model.noise_variance
    r = kl_univariate_array(
        np.tile(m0, c), np.tile(s0, c) + noise, m1, s1 + noise
    ).reshape(c, n).T
    return np.maximum(r, 0.0)


def fc_scores(model: GPModel, fc_dataset: FCDataset, d: int, collapse_value: float = 0.0) -> np.ndarray:
    """Average over points of the per-point normalised relevances; sums to 1."""
    if len(fc_dataset) == 0:
        raise ContractError("FC dataset is empty")
    r = fc_relevance_matrix(model, fc_dataset.points, d, collapse_value)
    c = r.shape[1]
    if c == 0:
        return np.zeros(0)
    tot = r.sum(1, keepdims=True)
    shares = np.where(tot > 0, r / np.where(tot > 0, tot, 1.0), 1.0 / c)
    return shares.mean(0)


def cost_weighted_scores(scores: np.ndarray, costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    if np.any(costs <= 0):
        raise ContractError("context costs must be positive")
    return np.asarray(scores, dtype=float) / costs


def rank(scores: np.ndarray) -> tuple[int, ...]:
    """Indices by descending score, ties to the lower index."""
    return tuple(int(i) for i in np.argsort(-np.asarray(scores, dtype=float), kind="stable"))


def select_by_cumulative_threshold(scores: np.ndarray, ranking: Sequence[int], eta: float) -> tuple[int, ...]:
    """Shortest prefix of ``ranking`` whose raw-score mass strictly exceeds ``eta``.

    If the whole ranking never exceeds ``eta`` (all-zero scores), every index
    is returned.
    """
    if not 0.0 <= eta < 1.0:
        raise ContractError("eta must lie in [0, 1)")
    scores = np.asarray(scores, dtype=float)
    chosen = []
    mass = 0.0
    for j in ranking:
        chosen.append(int(j))
        mass += scores[j]
        if mass > eta:
            break
    return tuple(chosen)


def normalized_shares(scores: np.ndarray) -> np.ndarray:
    s = np.maximum(np.asarray(scores, dtype=float), 0.0)
    tot = s.sum()
    if tot <= 0:
        return np.full(s.size, 1.0 / s.size) if s.size else s
    return s / tot


def _median_bandwidth(col: np.ndarray) -> float:
    diffs = np.abs(col[:, None] - col[None, :])
    off = diffs[np.triu_indices(col.size, 1)]
    med = float(np.median(off)) if off.size else 0.0
    return med if med > 1e-12 else 1.0


def hsic_relevance(dataset: Dataset, gamma: float, j: int, lengthscale: Optional[float] = None) -> float:
    """Biased (V-statistic) HSIC between context ``j`` and the high-value indicator.

    RBF kernel on the context column (median-distance bandwidth unless given)
    and the linear kernel ``l(y, y') = y y'`` on the 0/1 indicator. The three
    expectation terms are replaced by empirical means.
    """
    if len(dataset) < 2:
        raise ContractError("HSIC needs at least two points")
    if not 0 <= j < dataset.c:
        raise ContractError("context index out of range")
    label = np.zeros(len(dataset))
    label[high_value_indices(dataset.y, gamma)] = 1.0
    if np.all(label == label[0]):
        logger.warning("high-value indicator is constant; HSIC is 0")
        return 0.0
    z = dataset.Z[:, j]
    ell = _median_bandwidth(z) if lengthscale is None else lengthscale
    K = np.exp(-0.5 * ((z[:, None] - z[None, :]) / ell) ** 2)
    Lm = np.outer(label, label)
    n = z.size
    term1 = (K * Lm).sum() / n**2
    term2 = K.sum() * Lm.sum() / n**4
    term3 = (K.sum(1) * Lm.sum(1)).sum() / n**3
    return max(float(term1 + term2 - 2.0 * term3), 0.0)


def hsic_scores(dataset: Dataset, gamma: float) -> np.ndarray:
    return np.array([hsic_relevance(dataset, gamma, j) for j in range(dataset.c)])


def forward_select(
    dataset: Dataset,
    sorted_context_indices: Sequence[int],
    beta_fs: float = 10.0,
    fit_config: FitConfig = FitConfig(),
    seed=None,
    return_losses: bool = False,
):
    """Forward selection over a relevance-sorted list of contexts.

    ``L[0]`` is the negative MLL of a GP on the designs only and ``L[j]`` that
    of a GP on the designs plus the first ``j`` sorted contexts. Reading of the
    listing: at ``j = 1`` an improvement ``L[1] < L[0]`` selects one context and
    stops, while no improvement stops with none selected. For ``j >= 2`` the
    search stops at ``j`` when ``L[j] < L[j-1]`` or when the deterioration
    ``L[j] - L[j-1]`` is below ``(L[j-1] - L[j-2]) / beta_fs``. With the
    ``j = 1`` rule always stopping, the ``j >= 2`` branch only runs if the first
    fit fails (its loss is then +inf and the search continues).
    """
    if beta_fs <= 0:
        raise ContractError("beta_fs must be positive")
    order = [int(j) for j in sorted_context_indices]
    c = len(order)
    if c == 0:
        return ((), [0.0]) if return_losses else ()
    if len(dataset) == 0:
        raise ContractError("forward selection needs data")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = dataset.d
    V, y = dataset.V, dataset.y

    def neg_mll(ctx: Sequence[int]) -> float:
        active = list(range(d)) + [d + j for j in ctx]
        try:
            return -log_marginal_likelihood(fit_hyperparameters(V, y, active, fit_config, seed=rng, n_design=d))
        except (FactorizationError, FloatingPointError, np.linalg.LinAlgError):
            return math.inf

    losses = [neg_mll(())]
    for j in range(1, c + 1):
        losses.append(neg_mll(order[:j]))
        L_j, L_prev = losses[j], losses[j - 1]
        if not math.isfinite(L_j):
            continue
        if j == 1:
            j_star = 1 if L_j < L_prev else 0
            break
        slack = (L_prev - losses[j - 2]) / beta_fs
        if L_j < L_prev or L_j - L_prev < slack:
            j_star = j
            break
    else:
        # no stopping rule fired: keep the longest prefix whose fits all succeeded
        finite = [math.isfinite(l) for l in losses[1:]]
        j_star = finite.index(False) if False in finite else c
    selected = tuple(order[:j_star])
    return (selected, losses) if return_losses else selected

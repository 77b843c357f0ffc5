"""Exact Gaussian-process regression over joint design/context inputs.

Points are always passed in the full ``v = [x, z]`` coordinate system; a
model only reads the columns listed in its ``active`` index tuple. This lets
reduced surrogates (design plus a subset of contexts) and the full surrogate
share one calling convention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_CAP = 1e-4
LOG_2PI = math.log(2.0 * math.pi)

# process-wide count of clamped negative variances (round-off near data)
_clamp_stats = {"variance": 0}


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky failed even at the largest permitted jitter."""


def variance_clamp_count() -> int:
    return _clamp_stats["variance"]


@dataclass(frozen=True)
class InputPoint:
    """A single design/context pair living in the unit cube."""

    x: np.ndarray
    z: np.ndarray
    active_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        z = np.atleast_1d(np.asarray(self.z, dtype=float)) if np.size(self.z) else np.zeros(0)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        if self.active_mask is None:
            mask = np.ones(x.size + z.size, dtype=bool)
        else:
            mask = np.asarray(self.active_mask, dtype=bool)
            if mask.size != x.size + z.size:
                raise ContractError("active_mask length must equal d + c")
            if not mask[: x.size].all():
                raise ContractError("all design dimensions must be active")
        object.__setattr__(self, "active_mask", mask)

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.x, self.z])

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.active_mask))


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel hyperparameters over the active dimensions.

    ``n_design`` is the number of leading active dimensions that belong to the
    design block; it only matters for the additive composition
    ``k_X(x, x') + k_Z(z, z')``. The product composition is a single joint RBF,
    identical to ``k_X * k_Z``.
    """

    lengthscales: np.ndarray
    signal_variance: float = 1.0
    noise_variance: float = 1e-3
    composition: str = "product"
    n_design: int = 0
    family: str = "RBF"

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if self.family != "RBF":
            raise ContractError(f"unsupported kernel family {self.family!r}")
        if self.composition not in ("product", "additive"):
            raise ContractError(f"unknown composition {self.composition!r}")
        if np.any(ls <= 0) or self.signal_variance <= 0 or self.noise_variance < 0:
            raise ContractError("lengthscales and variances must be positive")
        if not 0 <= self.n_design <= ls.size:
            raise ContractError("n_design out of range")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def blocks(self) -> list[np.ndarray]:
        idx = np.arange(self.dim)
        if self.composition == "product":
            return [idx]
        return [b for b in (idx[: self.n_design], idx[self.n_design :]) if b.size]


def _scaled_sqdist(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    a = A / lengthscales
    b = B / lengthscales
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def kernel_matrix(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Noise-free covariance between rows of ``A`` and ``B`` (active coordinates)."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[1] != spec.dim or B.shape[1] != spec.dim:
        raise ContractError(
            f"inputs have {A.shape[1]}/{B.shape[1]} columns, kernel expects {spec.dim}"
        )
    out = np.zeros((A.shape[0], B.shape[0]))
    for blk in spec.blocks():
        out += np.exp(-0.5 * _scaled_sqdist(A[:, blk], B[:, blk], spec.lengthscales[blk]))
    return spec.signal_variance * out


def kernel_diag(spec: KernelSpec, n: int) -> np.ndarray:
    return np.full(n, spec.signal_variance * len(spec.blocks()))


def kernel_eval(spec: KernelSpec, a: InputPoint, b: InputPoint) -> float:
    if a.active_mask.shape != b.active_mask.shape or not np.array_equal(a.active_mask, b.active_mask):
        raise ContractError("points must share the same active mask")
    cols = list(a.active)
    return float(kernel_matrix(spec, a.v[cols][None, :], b.v[cols][None, :])[0, 0])


def jittered_cholesky(M: np.ndarray, scale: float = 1.0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``M``, escalating diagonal jitter on failure.

    Jitter starts at ``JITTER_START * scale`` and grows tenfold up to
    ``JITTER_CAP * scale``. Returns the factor and the jitter actually used.
    """
    if M.shape[0] == 0:
        return np.zeros((0, 0)), 0.0
    try:
        return np.linalg.cholesky(M), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START * scale
    eye = np.eye(M.shape[0])
    while jitter <= JITTER_CAP * scale * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(M + jitter * eye)
            logger.debug("cholesky needed jitter %.1e", jitter)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    cond = np.linalg.cond(M)
    raise FactorizationError(f"matrix not positive definite after jitter {JITTER_CAP * scale:.1e} (cond={cond:.3e})")


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    covariance: np.ndarray
    clamped: int = 0

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()


@dataclass(frozen=True)
class GPModel:
    """A GP conditioned on data; immutable once built.

    Use :func:`condition` to build one. ``X`` holds the active columns of the
    training inputs, ``chol`` the lower factor of ``K + noise * I`` (plus any
    recorded jitter) and ``alpha`` the solve of that system against ``y``.
    """

    spec: KernelSpec
    active: tuple[int, ...]
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    mean_constant: float = 0.0

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def noise_variance(self) -> float:
        return self.spec.noise_variance

    def select(self, V: np.ndarray) -> np.ndarray:
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if V.shape[1] <= max(self.active, default=-1):
            raise ContractError("query points have fewer columns than the model's active dims")
        return V[:, list(self.active)]

    def with_data(self, V: np.ndarray, y: np.ndarray) -> "GPModel":
        """Same hyperparameters (and prior mean), conditioned on different data."""
        return condition(self.spec, V, y, self.active, self.mean_constant)


def condition(spec: KernelSpec, V: np.ndarray, y: np.ndarray, active: Sequence[int],
              mean_constant: float = 0.0) -> GPModel:
    """Condition a GP prior with ``spec`` and constant mean on full-coordinate data ``(V, y)``."""
    active = tuple(int(a) for a in active)
    if len(active) != spec.dim:
        raise ContractError(f"kernel has {spec.dim} lengthscales but {len(active)} active dims")
    y = np.asarray(y, dtype=float).ravel()
    V = np.asarray(V, dtype=float).reshape(y.size, -1) if y.size else np.zeros((0, max(active, default=-1) + 1))
    X = V[:, list(active)] if y.size else np.zeros((0, len(active)))
    if y.size == 0:
        return GPModel(spec, active, X, y, np.zeros((0, 0)), np.zeros(0), 0.0, mean_constant)
    K = kernel_matrix(spec, X, X)
    K[np.diag_indices_from(K)] += spec.noise_variance
    L, jitter = jittered_cholesky(K, spec.signal_variance)
    alpha = sla.cho_solve((L, True), y - mean_constant)
    return GPModel(spec, active, X, y, L, alpha, jitter, mean_constant)


def _clamp(var: np.ndarray) -> tuple[np.ndarray, int]:
    neg = var < 0
    count = int(neg.sum())
    if count:
        _clamp_stats["variance"] += count
        var = np.where(neg, 0.0, var)
    return var, count


def posterior(model: GPModel, V: np.ndarray) -> GaussianMoments:
    """Latent posterior mean and full covariance at the rows of ``V``."""
    Xq = model.select(V)
    Kqq = kernel_matrix(model.spec, Xq, Xq)
    if model.n == 0:
        return GaussianMoments(np.full(Xq.shape[0], model.mean_constant), Kqq)
    Kxq = kernel_matrix(model.spec, model.X, Xq)
    mean = model.mean_constant + Kxq.T @ model.alpha
    W = sla.solve_triangular(model.chol, Kxq, lower=True)
    cov = Kqq - W.T @ W
    cov = 0.5 * (cov + cov.T)
    d, count = _clamp(np.diag(cov).copy())
    if count:
        cov[np.diag_indices_from(cov)] = d
    return GaussianMoments(mean, cov, count)


def posterior_mean_var(model: GPModel, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Marginal latent mean and variance; cheaper than :func:`posterior`."""
    Xq = model.select(V)
    prior = kernel_diag(model.spec, Xq.shape[0])
    if model.n == 0:
        return np.full(Xq.shape[0], model.mean_constant), prior
    Kxq = kernel_matrix(model.spec, model.X, Xq)
    mean = model.mean_constant + Kxq.T @ model.alpha
    W = sla.solve_triangular(model.chol, Kxq, lower=True)
    var, _ = _clamp(prior - (W * W).sum(0))
    return mean, var


def posterior_cross_cov(model: GPModel, U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Posterior covariance block ``cov[f(U), f(V)]``."""
    Xu, Xv = model.select(U), model.select(V)
    Kuv = kernel_matrix(model.spec, Xu, Xv)
    if model.n == 0:
        return Kuv
    Wu = sla.solve_triangular(model.chol, kernel_matrix(model.spec, model.X, Xu), lower=True)
    Wv = sla.solve_triangular(model.chol, kernel_matrix(model.spec, model.X, Xv), lower=True)
    return Kuv - Wu.T @ Wv


def predictive_distribution(model: GPModel, v: np.ndarray) -> tuple[float, float]:
    """Predictive of a noisy observation ``y`` at a single point."""
    m, s2 = posterior_mean_var(model, np.atleast_2d(v))
    return float(m[0]), float(s2[0] + model.noise_variance)


def log_marginal_likelihood(model: GPModel) -> float:
    if model.n == 0:
        return 0.0
    val = (
        -0.5 * float((model.y - model.mean_constant) @ model.alpha)
        - float(np.log(np.diag(model.chol)).sum())
        - 0.5 * model.n * LOG_2PI
    )
    if not np.isfinite(val):
        K = kernel_matrix(model.spec, model.X, model.X)
        cond = np.linalg.cond(K + model.noise_variance * np.eye(model.n))
        raise FloatingPointError(f"non-finite log marginal likelihood (cond={cond:.3e})")
    return val


def joint_sample(model: GPModel, V: np.ndarray, sample_count: int, seed=None,
                 base_samples: Optional[np.ndarray] = None) -> np.ndarray:
    """Draws from the joint latent posterior at ``V``; shape ``(sample_count, len(V))``.

    ``base_samples`` (standard normals of matching shape) make the draw a
    deterministic function of the posterior, which is what the batch
    acquisition relies on.
    """
    if sample_count < 1:
        raise ContractError("sample_count must be >= 1")
    mom = posterior(model, V)
    L, _ = jittered_cholesky(mom.covariance, model.spec.signal_variance)
    if base_samples is None:
        base_samples = np.random.default_rng(seed).standard_normal((sample_count, mom.mean.size))
    elif base_samples.shape != (sample_count, mom.mean.size):
        raise ContractError("base_samples shape mismatch")
    return mom.mean[None, :] + base_samples @ L.T


def kl_univariate(p: tuple[float, float], q: tuple[float, float]) -> float:
    """KL(N(p) || N(q)) for ``(mean, variance)`` pairs."""
    (mp, vp), (mq, vq) = p, q
    if vp <= 0 or vq <= 0:
        raise ContractError("variances must be positive")
    return 0.5 * (math.log(vq / vp) + (vp + (mp - mq) ** 2) / vq - 1.0)


def kl_univariate_array(mp, vp, mq, vq) -> np.ndarray:
    """Elementwise version of :func:`kl_univariate` for arrays."""
    mp, vp, mq, vq = (np.asarray(a, dtype=float) for a in (mp, vp, mq, vq))
    if np.any(vp <= 0) or np.any(vq <= 0):
        raise ContractError("variances must be positive")
    return 0.5 * (np.log(vq / vp) + (vp + (mp - mq) ** 2) / vq - 1.0)


def kl_multivariate(p: GaussianMoments, q: GaussianMoments) -> float:
    """Closed-form KL(p || q) between multivariate Gaussians, clamped at 0."""
    k = p.mean.size
    if q.mean.size != k or p.covariance.shape != (k, k) or q.covariance.shape != (k, k):
        raise ContractError("dimension mismatch")
    if k == 0:
        return 0.0
    scale = max(float(np.max(np.diag(q.covariance))), float(np.max(np.diag(p.covariance))), 1e-300)
    Lq, _ = jittered_cholesky(q.covariance, scale)
    Lp, _ = jittered_cholesky(p.covariance, scale)
    A = sla.solve_triangular(Lq, Lp, lower=True)
    diff = sla.solve_triangular(Lq, q.mean - p.mean, lower=True)
    logdet_q = 2.0 * np.log(np.diag(Lq)).sum()
    logdet_p = 2.0 * np.log(np.diag(Lp)).sum()
    val = 0.5 * ((A * A).sum() + diff @ diff - k + logdet_q - logdet_p)
    if val < -1e-8:
        logger.warning("kl_multivariate returned %.3e, clamping", val)
    return max(float(val), 0.0)


# --------------------------------------------------------------------------
# hyperparameter fitting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Marginal-likelihood fitting settings.

    L-BFGS-B always runs from the unit start and from any warm start, and
    from the ``n_restarts`` best of ``n_random`` log-uniform random starts.
    ``standardize`` uses the empirical output mean as a constant prior mean
    and measures the signal-variance bounds in units of the empirical output
    variance, which is the same as fitting on standardised outputs. The
    noise variance stays fixed in the original output units.
    """

    n_restarts: int = 2
    n_random: int = 8
    max_iter: int = 100
    lengthscale_bounds: tuple[float, float] = (0.01, 10.0)
    signal_variance_bounds: tuple[float, float] = (0.01, 10.0)
    noise_variance: float = 1e-3
    composition: str = "product"
    standardize: bool = False


def _neg_mll_and_grad(theta, X, y, noise, blocks, sqd):
    D = X.shape[1]
    ls = np.exp(theta[:D])
    sf2 = math.exp(theta[D])
    n = y.size
    E_blocks = []
    Kf = np.zeros((n, n))
    for blk in blocks:
        E = np.exp(-0.5 * (sqd[:, :, blk] / ls[blk] ** 2).sum(-1))
        E_blocks.append(E)
        Kf += E
    Kf *= sf2
    K = Kf.copy()
    K[np.diag_indices_from(K)] += noise
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        try:
            L, _ = jittered_cholesky(K, sf2)
        except FactorizationError:
            return 1e25, np.zeros_like(theta)
    alpha = sla.cho_solve((L, True), y)
    nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * LOG_2PI
    Kinv = sla.cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty_like(theta)
    for blk, E in zip(blocks, E_blocks):
        WE = W * E
        # d K / d log(l_k) = sf2 * E * (dx_k / l_k)^2
        grad[blk] = -0.5 * sf2 * np.einsum("ij,ijk->k", WE, sqd[:, :, blk]) / ls[blk] ** 2
    grad[D] = -0.5 * (W * Kf).sum()
    return float(nll), grad


def _fit_spec(theta: np.ndarray, D: int, cfg: FitConfig, n_design: int) -> KernelSpec:
    return KernelSpec(
        lengthscales=np.exp(theta[:D]),
        signal_variance=float(math.exp(theta[D])),
        noise_variance=cfg.noise_variance,
        composition=cfg.composition,
        n_design=n_design,
    )


def fit_hyperparameters(
    V: np.ndarray,
    y: np.ndarray,
    active: Sequence[int],
    config: FitConfig = FitConfig(),
    seed=None,
    warm_start: Optional[KernelSpec] = None,
    n_design: Optional[int] = None,
) -> GPModel:
    """Maximise the log marginal likelihood over lengthscales and signal variance.

    Parameters
    ----------
    V, y : full-coordinate inputs and outputs.
    active : columns of ``V`` the surrogate uses.
    config : bounds, restart counts and the fixed noise variance.
    seed : seed or ``numpy.random.Generator`` for the random starts.
    warm_start : previous kernel over the same active dims, added as a start.
    n_design : number of leading active dims in the design block (additive
        composition only); defaults to all dims.

    Returns
    -------
    GPModel
        The model at the best hyperparameters found. Its marginal likelihood
        is never below that of any of the start points.
    """
    active = tuple(int(a) for a in active)
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ContractError("cannot fit hyperparameters on an empty dataset")
    X = np.asarray(V, dtype=float)[:, list(active)]
    D = len(active)
    if D == 0:
        raise ContractError("at least one active dimension is required")
    n_design = D if n_design is None else n_design
    offset, unit = 0.0, 1.0
    if config.standardize:
        offset = float(y.mean())
        unit = float(y.var()) if y.size > 1 and y.var() > 1e-12 else 1.0
    yc = y - offset
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    lo_l, hi_l = np.log(config.lengthscale_bounds)
    lo_s, hi_s = np.log(np.asarray(config.signal_variance_bounds) * unit)
    bounds = [(lo_l, hi_l)] * D + [(lo_s, hi_s)]
    lower = np.array([b[0] for b in bounds])
    upper = np.array([b[1] for b in bounds])

    starts = [np.clip(np.r_[np.zeros(D), math.log(unit)], lower, upper)]
    if warm_start is not None and warm_start.dim == D:
        starts.append(np.clip(np.r_[np.log(warm_start.lengthscales), math.log(warm_start.signal_variance)], lower, upper))
    for _ in range(config.n_random):
        starts.append(rng.uniform(lower, upper))

    blocks = KernelSpec(np.ones(D), composition=config.composition, n_design=n_design).blocks()
    sqd = (X[:, None, :] - X[None, :, :]) ** 2

    def objective(theta):
        return _neg_mll_and_grad(theta, X, yc, config.noise_variance, blocks, sqd)

    # the unit and warm starts are always refined; random starts compete on their initial value
    n_fixed = len(starts) - config.n_random
    scored = sorted(((objective(s)[0], i) for i, s in enumerate(starts)), key=lambda t: (t[0], t[1]))
    best_val, best_theta = scored[0][0], starts[scored[0][1]]
    randoms = [i for _, i in scored if i >= n_fixed]
    improved = False
    for i in list(range(n_fixed)) + randoms[: max(config.n_restarts, 0)]:
        start_val = objective(starts[i])[0]
        try:
            res = minimize(objective, starts[i], jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": config.max_iter})
        except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover - defensive
            logger.warning("hyperparameter restart failed: %s", exc)
            continue
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_theta = float(res.fun), np.clip(res.x, lower, upper)
        if np.isfinite(res.fun) and res.fun < start_val - 1e-12:
            improved = True
    if not improved:
        logger.warning("no restart improved on its initial point; returning best start")
    spec = _fit_spec(best_theta, D, config, n_design)
    return condition(spec, V, y, active, offset)


def default_spec(active: Sequence[int], noise_variance: float = 1e-3, composition: str = "product",
                 n_design: Optional[int] = None) -> KernelSpec:
    D = len(tuple(active))
    return KernelSpec(np.ones(D), 1.0, noise_variance, composition, D if n_design is None else n_design)


def restrict_spec(spec: KernelSpec, keep: Sequence[int], n_design: Optional[int] = None) -> KernelSpec:
    """Kernel over a subset (by position) of ``spec``'s dims."""
    keep = list(keep)
    return replace(spec, lengthscales=spec.lengthscales[keep], n_design=len(keep) if n_design is None else n_design)

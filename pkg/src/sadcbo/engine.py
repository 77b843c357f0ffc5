"""The optimisation loop, its baselines, cost accounting and trial aggregation."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .acquisition import AcquisitionConfig, maximize_ucb, select_batch, sobol_points
from .benchmarks import Problem, context_mean, sample_context
from .gp import ContractError, FitConfig, GPModel, KernelSpec, fit_hyperparameters
from .sensitivity import (
    Dataset,
    SensitivityReport,
    assemble_fc_dataset,
    cost_weighted_scores,
    fc_scores,
    forward_select,
    hsic_scores,
    normalized_shares,
    rank,
    select_by_cumulative_threshold,
)
from .stopping import INTERVENTIONAL, OBSERVATIONAL, StoppingConfig, SwitchMonitor

logger = logging.getLogger(__name__)

INIT = "init"


@dataclass(frozen=True)
class CostModel:
    """Per-query cost of the design and of intervening on each context."""

    design_cost: float = 1.0
    context_costs: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "context_costs", tuple(float(c) for c in self.context_costs))
        if self.design_cost <= 0 or any(c <= 0 for c in self.context_costs):
            raise ContractError("all costs must be positive")

    @property
    def c(self) -> int:
        return len(self.context_costs)

    @property
    def min_step(self) -> float:
        """Cheapest step allowed by the loop guard."""
        return self.design_cost + (min(self.context_costs) if self.context_costs else 0.0)

    def step_cost(self, intervened: Sequence[int]) -> float:
        return self.design_cost + sum(self.context_costs[j] for j in intervened)


@dataclass(frozen=True)
class CostLaw:
    """How context costs are produced for a trial.

    ``kind="fixed"`` gives every context ``context_cost``; ``kind="uniform"``
    draws each from ``U(low, high)`` once per trial.
    """

    kind: str = "fixed"
    design_cost: float = 1.0
    context_cost: float = 3.0
    low: float = 0.5
    high: float = 2.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ContractError("cost law must be 'fixed' or 'uniform'")
        if self.kind == "uniform" and not 0 < self.low <= self.high:
            raise ContractError("uniform cost law needs 0 < low <= high")

    def draw(self, c: int, rng: np.random.Generator) -> CostModel:
        if self.kind == "fixed":
            return CostModel(self.design_cost, (self.context_cost,) * c)
        return CostModel(self.design_cost, tuple(rng.uniform(self.low, self.high, c)))


@dataclass(frozen=True)
class RunConfig:
    """Loop settings shared by every method."""

    budget: float = 100.0
    n_init: int = 5
    eta: float = 0.8
    gamma: float = 0.8
    Q: int = 10
    beta_fs: float = 10.0
    dbo_subset: int = 5
    max_iterations: Optional[int] = None
    collapse_to_mean: bool = False
    fit: FitConfig = FitConfig(n_restarts=0, n_random=0, max_iter=60, standardize=True)
    acquisition: AcquisitionConfig = AcquisitionConfig(raw_candidates=512, refine_steps=30, refine_restarts=3,
                                                       batch_candidates=256)
    # calibrated switch rule: with kappa = sqrt(2 ln(1/delta)) the KL term dominates the
    # threshold by orders of magnitude at low noise and the rule never fires
    stopping: StoppingConfig = StoppingConfig(kappa_rule="constant", kappa_value=0.0)

    def __post_init__(self):
        if self.n_init < 1:
            raise ContractError("n_init must be >= 1")
        if not 0.0 <= self.eta < 1.0:
            raise ContractError("eta must lie in [0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError("gamma must lie in [0, 1]")
        if self.Q < 0:
            raise ContractError("Q must be >= 0")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ContractError("max_iterations must be >= 0")


@dataclass(frozen=True)
class Method:
    """Which contexts a method models and when it intervenes on them.

    ``selection``: ``threshold`` / ``forward`` act on relevance scores;
    ``all``, ``none``, ``oracle`` and ``dropout`` (random subset) are fixed
    rules. ``phase``: ``switch`` starts observational and latches on the
    stopping rule, the other two never change.
    """

    name: str
    relevance: Optional[str]
    selection: str
    phase: str
    pin_q: Optional[int] = None


METHODS = {
    "SADCBO": Method("SADCBO", "FC", "threshold", "switch"),
    "SADBO": Method("SADBO", "FC", "threshold", INTERVENTIONAL),
    "SADCBO_FS": Method("SADCBO_FS", "FC", "forward", "switch"),
    "MMDCBO": Method("MMDCBO", "HSIC", "threshold", "switch", pin_q=0),
    "MMDBO": Method("MMDBO", "HSIC", "threshold", INTERVENTIONAL, pin_q=0),
    "CUBO": Method("CUBO", None, "none", OBSERVATIONAL),
    "CBO": Method("CBO", None, "all", OBSERVATIONAL),
    "VBO": Method("VBO", None, "all", INTERVENTIONAL),
    "DBO": Method("DBO", None, "dropout", INTERVENTIONAL),
    "OVBO": Method("OVBO", None, "oracle", INTERVENTIONAL),
}

BASELINES = ("CUBO", "CBO", "VBO", "DBO", "MMDBO", "MMDCBO", "SADBO", "OVBO")


def get_method(name: str) -> Method:
    key = name.upper().replace("-", "_").replace("+", "_")
    if key in ("SADCBO_FORWARD", "SADCBOFS"):
        key = "SADCBO_FS"
    if key not in METHODS:
        raise ContractError(f"unknown method {name!r}; expected one of {sorted(METHODS)}")
    return METHODS[key]


@dataclass
class Streams:
    """Independent generators, so methods run on the same seed share contexts and noise."""

    context: np.random.Generator
    noise: np.random.Generator
    init: np.random.Generator
    acquisition: np.random.Generator
    fitting: np.random.Generator
    subset: np.random.Generator
    cost: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        children = np.random.SeedSequence(seed).spawn(7)
        return cls(*(np.random.default_rng(s) for s in children))


@dataclass
class TrialState:
    dataset: Dataset
    remaining_budget: float
    phase: str
    t: int = 0
    y_best: float = -math.inf
    full_model: Optional[GPModel] = None
    reduced_model: Optional[GPModel] = None


@dataclass
class TrialResult:
    """Per-row log of one trial plus the raw query record used by invariant checks.

    Rows cover the initial design (``t <= 0``) and every iteration ``t >= 1``.
    """

    method: str
    seed: int
    budget: float
    c: int
    t: np.ndarray
    cumulative_cost: np.ndarray
    y_best: np.ndarray
    f_best: np.ndarray
    phase: list
    selected: np.ndarray  # (rows, c) bool: contexts in the surrogate
    intervened: np.ndarray  # (rows, c) bool: contexts set by the optimiser
    delta_R_bound: np.ndarray
    s_t: np.ndarray
    scores: np.ndarray  # (rows, c) relevance shares, nan when not computed
    X: np.ndarray
    Z: np.ndarray
    drawn_Z: np.ndarray
    y: np.ndarray
    f: np.ndarray
    step_costs: np.ndarray
    context_costs: tuple[float, ...] = ()
    design_cost: float = 1.0
    switch_iteration: Optional[int] = None

    @property
    def n_iterations(self) -> int:
        return int((self.t >= 1).sum())

    @property
    def switch_fraction(self) -> float:
        """Switch iteration over total iterations; 1.0 if the rule never fired."""
        T = self.n_iterations
        if self.switch_iteration is None or T == 0:
            return 1.0
        return self.switch_iteration / T

    @property
    def switch_cost_fraction(self) -> float:
        if self.switch_iteration is None:
            return 1.0
        row = int(np.flatnonzero(self.t == self.switch_iteration)[0])
        return float(self.cumulative_cost[row] / self.budget)

    @property
    def final_best(self) -> float:
        return float(self.f_best[-1])

    def mask_strings(self) -> list[str]:
        return ["".join("1" if b else "0" for b in row) for row in self.selected]


def _warm_start(memory: dict, active: Sequence[int], n_design: int, cfg: FitConfig) -> Optional[KernelSpec]:
    if "signal" not in memory:
        return None
    ls = np.array([memory.get(a, 1.0) for a in active])
    return KernelSpec(ls, memory["signal"], cfg.noise_variance, cfg.composition, n_design)


def _fit(dataset: Dataset, active: Sequence[int], cfg: FitConfig, rng, memory: dict) -> GPModel:
    d = dataset.d
    model = fit_hyperparameters(dataset.V, dataset.y, active, cfg, seed=rng,
                                warm_start=_warm_start(memory, active, d, cfg), n_design=d)
    for a, ell in zip(model.active, model.spec.lengthscales):
        memory[a] = float(ell)
    memory["signal"] = float(model.spec.signal_variance)
    return model


def _trim(ordered: Sequence[int], costs: CostModel, remaining: float) -> list[int]:
    """Drop trailing contexts until the intervention fits the remaining budget."""
    keep = list(ordered)
    while keep and costs.step_cost(keep) > remaining + 1e-12:
        keep.pop()
    return keep


def relevance_report(method: Method, state: TrialState, problem_d: int, c: int, z_t: np.ndarray,
                     run: RunConfig, costs: CostModel, streams: Streams, collapse_value: float) -> SensitivityReport:
    """Scores, ranking and selected set for one iteration of a relevance-driven method."""
    ds = state.dataset
    Q = run.Q if method.pin_q is None else method.pin_q
    if method.relevance == "FC":
        batch = None
        if Q > 0:
            batch = select_batch(state.full_model, problem_d, z_t, Q, run.acquisition,
                                 seed=streams.acquisition.integers(2**31))
        fc_ds = assemble_fc_dataset(ds, run.gamma, batch, z_t)
        raw = fc_scores(state.full_model, fc_ds, problem_d, collapse_value)
        shares = raw
    else:
        raw = hsic_scores(ds, run.gamma)
        shares = normalized_shares(raw)
    weighted = cost_weighted_scores(shares, np.array(costs.context_costs))
    ranking = rank(weighted) if state.phase == INTERVENTIONAL else rank(shares)
    if method.selection == "forward":
        selected = forward_select(ds, ranking, run.beta_fs, run.fit, seed=streams.fitting)
    else:
        selected = select_by_cumulative_threshold(shares, ranking, run.eta)
    return SensitivityReport(raw, weighted, ranking, tuple(selected), method.relevance)


def run_trial(method, problem: Problem, cost_law: CostLaw = CostLaw(), run: RunConfig = RunConfig(),
              seed: int = 0) -> TrialResult:
    """Run one budgeted trial of ``method`` (a name or :class:`Method`)."""
    method = get_method(method) if isinstance(method, str) else method
    streams = Streams.from_seed(seed)
    d, c = problem.d, problem.c
    costs = cost_law.draw(c, streams.cost)
    dist = problem.spec.context_distribution
    collapse_value = context_mean(dist) if run.collapse_to_mean else 0.0
    oracle = tuple(problem.relevant_contexts)

    rows = dict(t=[], cost=[], y_best=[], f_best=[], phase=[], selected=[], intervened=[], bound=[], s_t=[],
                scores=[], drawn=[], step=[])
    spent = 0.0

    def log_row(t, phase, selected, intervened, step, drawn, bound=np.nan, thr=np.nan, scores=None):
        nonlocal spent
        spent += step
        rows["t"].append(t)
        rows["cost"].append(spent)
        rows["y_best"].append(float(ds.y.max()))
        rows["f_best"].append(float(np.nanmax(ds.f)))
        rows["phase"].append(phase)
        m = np.zeros(c, dtype=bool)
        m[list(selected)] = True
        rows["selected"].append(m)
        m = np.zeros(c, dtype=bool)
        m[list(intervened)] = True
        rows["intervened"].append(m)
        rows["bound"].append(bound)
        rows["s_t"].append(thr)
        rows["scores"].append(np.full(c, np.nan) if scores is None else np.asarray(scores, dtype=float))
        rows["drawn"].append(np.asarray(drawn, dtype=float))
        rows["step"].append(step)

    ds = Dataset(d, c)
    X0 = sobol_points(d, run.n_init, streams.init.integers(2**31))
    Z0 = sample_context(dist, run.n_init, c, streams.init)
    phase0 = OBSERVATIONAL if method.phase == "switch" else method.phase
    state = TrialState(ds, run.budget, phase0)
    for i in range(run.n_init):
        if state.remaining_budget < costs.design_cost:
            break
        v = np.concatenate([X0[i], Z0[i]])[None, :]
        ds.append(X0[i], Z0[i], problem.evaluate(v, streams.noise)[0], costs.design_cost,
                  problem.evaluate_true(v)[0])
        state.remaining_budget -= costs.design_cost
        log_row(i + 1 - run.n_init, INIT, (), (), costs.design_cost, Z0[i])
    if len(ds) == 0:
        raise ContractError("budget does not cover a single evaluation")

    memory_full: dict = {}
    memory_red: dict = {}
    all_ctx = tuple(range(c))
    full_active = tuple(range(d + c))
    needs_full = method.relevance is not None
    monitor = SwitchMonitor(run.stopping) if method.phase == "switch" else None
    if needs_full:
        state.full_model = _fit(ds, full_active, run.fit, streams.fitting, memory_full)

    while state.remaining_budget >= costs.min_step - 1e-12:
        if run.max_iterations is not None and state.t >= run.max_iterations:
            break
        state.t += 1
        z_t = sample_context(dist, 1, c, streams.context)[0]
        interventional = state.phase == INTERVENTIONAL
        scores = None

        if method.relevance is not None:
            report = relevance_report(method, state, d, c, z_t, run, costs, streams, collapse_value)
            scores = report.raw_scores if method.relevance == "FC" else normalized_shares(report.raw_scores)
            selected = list(report.selected)
        elif method.selection == "all":
            selected = list(all_ctx)
        elif method.selection == "oracle":
            selected = list(oracle)
        elif method.selection == "dropout":
            k = min(run.dbo_subset, c)
            selected = sorted(int(j) for j in streams.subset.choice(c, size=k, replace=False))
        else:
            selected = []

        free: list[int] = []
        if interventional:
            selected = _trim(selected, costs, state.remaining_budget)
            free = list(selected)
        active = tuple(range(d)) + tuple(d + j for j in sorted(selected))
        state.reduced_model = _fit(ds, active, run.fit, streams.fitting, memory_red)
        x, z = maximize_ucb(state.reduced_model, d, z_t, free, run.acquisition,
                            seed=streams.acquisition.integers(2**31),
                            beta=run.acquisition.beta_at(state.t))
        v = np.concatenate([x, z])[None, :]
        y = problem.evaluate(v, streams.noise)[0]
        step = costs.step_cost(free)
        ds.append(x, z, y, step, problem.evaluate_true(v)[0])
        state.remaining_budget -= step
        state.y_best = float(ds.y.max())

        bound = thr = np.nan
        phase_used = state.phase
        if needs_full or monitor is not None:
            prev_model = state.full_model
            state.full_model = _fit(ds, full_active, run.fit, streams.fitting, memory_full)
            if monitor is not None and monitor.phase == OBSERVATIONAL:
                if run.stopping.previous_posterior == "refit" or prev_model is None:
                    prev_model = state.full_model.with_data(ds.V[:-1], ds.y[:-1])
                bound, thr = monitor.update(state.full_model, prev_model, ds.V, ds.y, state.t)
                state.phase = monitor.phase
        log_row(state.t, phase_used, selected, free, step, z_t, bound, thr, scores)

    sel = np.array(rows["selected"]).reshape(len(rows["t"]), c)
    return TrialResult(
        method=method.name,
        seed=seed,
        budget=run.budget,
        c=c,
        t=np.array(rows["t"], dtype=int),
        cumulative_cost=np.array(rows["cost"]),
        y_best=np.array(rows["y_best"]),
        f_best=np.array(rows["f_best"]),
        phase=rows["phase"],
        selected=sel,
        intervened=np.array(rows["intervened"]).reshape(len(rows["t"]), c),
        delta_R_bound=np.array(rows["bound"]),
        s_t=np.array(rows["s_t"]),
        scores=np.array(rows["scores"]).reshape(len(rows["t"]), c),
        X=ds.X.copy(),
        Z=ds.Z.copy(),
        drawn_Z=np.array(rows["drawn"]).reshape(len(rows["t"]), c),
        y=ds.y.copy(),
        f=ds.f.copy(),
        step_costs=np.array(rows["step"]),
        context_costs=costs.context_costs,
        design_cost=costs.design_cost,
        switch_iteration=monitor.switch_step if monitor is not None else None,
    )


def run_sadcbo(problem: Problem, cost_law: CostLaw = CostLaw(), run: RunConfig = RunConfig(),
               seed: int = 0) -> TrialResult:
    return run_trial("SADCBO", problem, cost_law, run, seed)


def run_sadcbo_fs(problem: Problem, cost_law: CostLaw = CostLaw(), run: RunConfig = RunConfig(),
                  seed: int = 0) -> TrialResult:
    return run_trial("SADCBO_FS", problem, cost_law, run, seed)


def run_baseline(name: str, problem: Problem, cost_law: CostLaw = CostLaw(), run: RunConfig = RunConfig(),
                 seed: int = 0) -> TrialResult:
    method = get_method(name)
    if method.name not in BASELINES:
        raise ContractError(f"{name!r} is not a baseline; expected one of {BASELINES}")
    return run_trial(method, problem, cost_law, run, seed)


@dataclass(frozen=True)
class Summary:
    cost_grid: np.ndarray
    mean_best: np.ndarray
    std_best: np.ndarray
    inclusion: np.ndarray  # (iterations, c)
    switch_fractions: np.ndarray
    switch_cost_fractions: np.ndarray
    final_best: np.ndarray


def best_on_grid(result: TrialResult, cost_grid: np.ndarray) -> np.ndarray:
    """Step interpolation of the best true value onto a cost grid (nan before the first row)."""
    idx = np.searchsorted(result.cumulative_cost, cost_grid, side="right") - 1
    out = np.where(idx >= 0, result.f_best[np.clip(idx, 0, None)], np.nan)
    return out


def aggregate(results: Sequence[TrialResult], cost_grid: Optional[np.ndarray] = None) -> Summary:
    if not results:
        raise ContractError("nothing to aggregate")
    if cost_grid is None:
        cost_grid = np.linspace(0.0, max(r.budget for r in results), 51)
    cost_grid = np.asarray(cost_grid, dtype=float)
    curves = np.array([best_on_grid(r, cost_grid) for r in results])
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-nan grid columns
        mean = np.nanmean(curves, 0)
        # identical curves give exactly zero spread, free of rounding in the mean
        std = np.where(np.nanmax(curves, 0) == np.nanmin(curves, 0), 0.0, np.nanstd(curves, 0))
        std = np.where(np.isnan(mean), np.nan, std)
    T = max(r.n_iterations for r in results)
    c = results[0].c
    inc = np.full((T, c), np.nan)
    for t in range(1, T + 1):
        masks = [r.selected[r.t == t][0] for r in results if (r.t == t).any()]
        if masks:
            inc[t - 1] = np.mean(masks, axis=0)
    return Summary(
        cost_grid=cost_grid,
        mean_best=mean,
        std_best=std,
        inclusion=inc,
        switch_fractions=np.array([r.switch_fraction for r in results]),
        switch_cost_fractions=np.array([r.switch_cost_fraction for r in results]),
        final_best=np.array([r.final_best for r in results]),
    )

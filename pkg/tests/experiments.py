"""Acceptance experiments: definitions and a result store keyed by source hash.

Results are pickled under ``tests/.experiment_cache`` so repeated test runs
reuse trials. The key covers every source file of the package, the method,
the problem, the cost law, the run settings and the seed, so any code or
setting change forces a rerun. Set ``SADCBO_NO_CACHE=1`` to bypass the store.
"""

from __future__ import annotations

import hashlib
import logging
import os
import pickle
from dataclasses import replace
from pathlib import Path

import numpy as np

import sadcbo
from sadcbo.benchmarks import ProblemSpec, make_problem
from sadcbo.engine import CostLaw, RunConfig, TrialResult, run_trial

N_SEEDS = 20
SEEDS = tuple(range(N_SEEDS))
CACHE = Path(__file__).parent / ".experiment_cache"

ACKLEY = ProblemSpec.default("ackley5")
HARTMANN = ProblemSpec.default("hartmann6")
COSTS = CostLaw(kind="fixed", design_cost=1.0, context_cost=3.0)
UNIT_COSTS = CostLaw(kind="fixed", design_cost=1.0, context_cost=1.0)
RUN = RunConfig()
RUN_Q0 = replace(RUN, Q=0)
RUN_FC_TRACE = replace(RUN, budget=10_000.0, max_iterations=60)

# relevant-context/design ratios 2/3, 3/2, 4/1 on Ackley with 8 irrelevant contexts
ACKLEY_RATIOS = (
    ProblemSpec("ackley5", (0, 1, 2), (3, 4), 8),
    ACKLEY,
    ProblemSpec("ackley5", (0,), (1, 2, 3, 4), 8),
)
ACKLEY_DISTRIBUTIONS = {
    "beta22": ProblemSpec.default("ackley5", context_distribution="beta22"),
    "uniform": ACKLEY,
    "beta0505": ProblemSpec.default("ackley5", context_distribution="beta0505"),
}
ZERO_RELEVANT = (
    ProblemSpec("ackley5", (0, 1, 2, 3, 4), (), 8),
    ProblemSpec("hartmann6", (0, 1, 2, 3, 4, 5), (), 6),
)

_source_digest = None


def source_digest() -> str:
    global _source_digest
    if _source_digest is None:
        h = hashlib.sha256()
        for path in sorted(Path(sadcbo.__file__).parent.glob("*.py")):
            h.update(path.name.encode())
            h.update(path.read_bytes())
        _source_digest = h.hexdigest()
    return _source_digest


def _key(method: str, spec: ProblemSpec, cost: CostLaw, run: RunConfig, seed: int) -> str:
    text = repr((source_digest(), method, spec, cost, run, seed))
    return hashlib.sha256(text.encode()).hexdigest()[:32]


def trial(method: str, spec: ProblemSpec, cost: CostLaw = COSTS, run: RunConfig = RUN, seed: int = 0) -> TrialResult:
    use_cache = os.environ.get("SADCBO_NO_CACHE") != "1"
    path = CACHE / f"{_key(method, spec, cost, run, seed)}.pkl"
    if use_cache and path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    logging.disable(logging.WARNING)
    try:
        res = run_trial(method, make_problem(spec), cost, run, seed)
    finally:
        logging.disable(logging.NOTSET)
    if use_cache:
        CACHE.mkdir(exist_ok=True)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(res, fh)
        tmp.replace(path)
    return res


def trials(method: str, spec: ProblemSpec, cost: CostLaw = COSTS, run: RunConfig = RUN) -> list[TrialResult]:
    return [trial(method, spec, cost, run, s) for s in SEEDS]


def mean_final(results) -> float:
    return float(np.mean([r.final_best for r in results]))


def switch_time(res: TrialResult) -> int:
    """Switch iteration, censored at the run length when the rule never fired."""
    return res.n_iterations if res.switch_iteration is None else res.switch_iteration


# every experiment the suite logs, for the invariant sweep
def all_experiments():
    out = [("SADCBO", ACKLEY, COSTS, RUN_FC_TRACE)]
    for spec in (ACKLEY, HARTMANN):
        for m in ("SADCBO", "VBO", "CUBO", "OVBO"):
            out.append((m, spec, COSTS, RUN))
    out.append(("SADBO", HARTMANN, COSTS, RUN))
    out += [("SADCBO", HARTMANN, UNIT_COSTS, RUN), ("SADBO", HARTMANN, UNIT_COSTS, RUN)]
    out += [("SADCBO", HARTMANN, COSTS, RUN_Q0), ("MMDCBO", HARTMANN, COSTS, RUN)]
    out += [("SADCBO", s, COSTS, RUN) for s in ACKLEY_RATIOS]
    out += [("SADCBO", s, COSTS, RUN) for s in ACKLEY_DISTRIBUTIONS.values()]
    for spec in ZERO_RELEVANT:
        out += [("SADCBO", spec, COSTS, RUN), ("SADCBO_FS", spec, COSTS, RUN)]
    seen, unique = set(), []
    for e in out:
        if repr(e) not in seen:
            seen.add(repr(e))
            unique.append(e)
    return unique

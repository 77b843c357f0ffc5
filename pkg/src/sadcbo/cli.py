"""Experiment driver: configs, seeded trial scheduling, CSV/JSON outputs, summaries.

Usage::

    sadcbo run experiment.toml --out results --workers 4
    sadcbo run results/manifest.json          # exact rerun
    sadcbo sobol hartmann6 --n 65536 --seed 0
    sadcbo summarize results
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import re
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from . import __version__
from .acquisition import AcquisitionConfig
from .benchmarks import (
    BASE_FUNCTIONS,
    DEFAULT_ROLES,
    ProblemSpec,
    _canonical_name,
    make_problem,
    sobol_indices,
    unit_base_function,
)
from .engine import CostLaw, RunConfig, TrialResult, aggregate, get_method, run_trial
from .gp import ContractError, FitConfig
from .stopping import StoppingConfig

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("t", "cumulative_cost", "y_best", "phase", "selected_mask", "delta_R_bound", "s_t")
CSV_EXTRAS = ("method", "trial", "seed", "f_best", "step_cost", "intervened_mask")

MASK64 = (1 << 64) - 1

# accepted keys per section, with their defaults
SECTIONS = {
    "experiment": dict(name="experiment", trials=20, base_seed=0, methods=["SADCBO"], paired=True),
    "problem": dict(base_function="ackley5", design_indices=None, relevant_context_indices=None,
                    num_irrelevant_contexts=None, context_distribution="uniform", noise_variance=1e-3),
    "cost": dict(kind="fixed", design_cost=1.0, context_cost=3.0, low=0.5, high=2.0),
    "run": dict(budget=100.0, n_init=5, eta=0.8, gamma=0.8, Q=10, beta_fs=10.0, dbo_subset=5,
                max_iterations=None, collapse_to_mean=False),
    "gp": dict(n_restarts=0, n_random=0, max_iter=60, composition="product", noise_variance=1e-3,
               standardize=True),
    "acquisition": dict(beta=4.0, mc_samples=128, raw_candidates=512, refine_steps=30, refine_restarts=3,
                        batch_candidates=256, beta_schedule="constant"),
    "stopping": dict(delta=0.1, kappa_rule="constant", kappa_value=0.0, kl_reference="training_inputs",
                     noise_reading="variance", previous_posterior="refit"),
    "sweep": {},
}


class ConfigError(Exception):
    """Invalid experiment configuration, with an optional source line."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def trial_seed(base_seed: int, method_id: int, cell_hash: int, trial: int) -> int:
    """Chain of splitmix64 mixes over the four seed components."""
    h = splitmix64(base_seed & MASK64)
    for part in (method_id, cell_hash, trial):
        h = splitmix64(h ^ (part & MASK64))
    return h


def stable_hash(obj) -> int:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _locate(text: str, section: str, key: str) -> Optional[int]:
    """Line of ``key = ...`` inside ``[section]`` of a TOML source, if found."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            continue
        m = re.match(r'^"?([A-Za-z0-9_.]+)"?\s*=', s)
        if m and current == section and m.group(1) == key:
            return i
    return None


def _section_line(text: str, section: str) -> Optional[int]:
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"^\s*\[{re.escape(section)}\]", line):
            return i
    return None


@dataclass
class ExperimentConfig:
    """Fully resolved experiment: every section with defaults filled in."""

    sections: dict
    source: str = ""

    @property
    def experiment(self) -> dict:
        return self.sections["experiment"]

    @property
    def sweep(self) -> dict:
        return self.sections["sweep"]

    def resolved(self) -> dict:
        return copy.deepcopy(self.sections)

    def cells(self) -> list[dict]:
        """Cartesian product of the sweep axes; ``[{}]`` without a sweep."""
        axes = sorted(self.sweep)
        if not axes:
            return [{}]
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.sweep[a] for a in axes))]

    def cell_sections(self, cell: dict) -> dict:
        sec = self.resolved()
        for path, value in cell.items():
            s, k = path.split(".", 1)
            sec[s][k] = value
        return sec


def _err(text: str, message: str, section: str, key: Optional[str] = None) -> ConfigError:
    line = _locate(text, section, key) if key else _section_line(text, section)
    return ConfigError(f"[{section}]{'.' + key if key else ''}: {message}", line)


def parse_config(text: str, fmt: str = "toml") -> ExperimentConfig:
    """Parse and validate a TOML experiment file or a manifest's resolved config."""
    if fmt == "toml":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(str(exc), int(m.group(1)) if m else None) from None
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, exc.lineno) from None
        raw = raw.get("config", raw)
    sections = {}
    for name in raw:
        if name not in SECTIONS:
            raise _err(text, f"unknown section; expected one of {sorted(SECTIONS)}", name)
    for name, defaults in SECTIONS.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise _err(text, "must be a table", name)
        if name != "sweep":
            for key in given:
                if key not in defaults:
                    raise _err(text, f"unknown key; expected one of {sorted(defaults)}", name, key)
        if name == "sweep":
            given = _flatten(given)
        sections[name] = {**copy.deepcopy(defaults), **copy.deepcopy(given)}
    cfg = ExperimentConfig(sections, text)
    _validate(cfg, text)
    return cfg


def _flatten(table: dict, prefix: str = "") -> dict:
    # bare dotted keys (run.eta = [...]) parse as nested tables
    out = {}
    for k, v in table.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _validate(cfg: ExperimentConfig, text: str) -> None:
    exp = cfg.experiment
    if not isinstance(exp["trials"], int) or exp["trials"] < 1:
        raise _err(text, "must be an integer >= 1", "experiment", "trials")
    if not isinstance(exp["methods"], list) or not exp["methods"]:
        raise _err(text, "must be a non-empty list", "experiment", "methods")
    for m in exp["methods"]:
        try:
            get_method(m)
        except ContractError as exc:
            raise _err(text, str(exc), "experiment", "methods") from None
    for path, values in cfg.sweep.items():
        if "." not in path or path.split(".", 1)[0] not in SECTIONS or path.startswith(("sweep.", "experiment.")):
            raise _err(text, "sweep axes are written section.key (problem, cost, run, gp, acquisition, stopping)",
                       "sweep", path)
        s, k = path.split(".", 1)
        if k not in SECTIONS[s]:
            raise _err(text, f"unknown key {k!r} in [{s}]", "sweep", path)
        if not isinstance(values, list) or not values:
            raise _err(text, "must be a non-empty finite list", "sweep", path)
        if any(isinstance(v, float) and not math.isfinite(v) for v in values):
            raise _err(text, "values must be finite", "sweep", path)
    for cell in cfg.cells():
        sec = cfg.cell_sections(cell)
        for name, builder in (("problem", _problem_spec), ("cost", _cost_law), ("run", _run_config)):
            try:
                builder(sec)
            except (ContractError, TypeError, ValueError, KeyError) as exc:
                key = next((p.split(".", 1)[1] for p in cell if p.startswith(name + ".")), None)
                if key is None:
                    # point at the key the message names, across the sections feeding this builder
                    for s in SECTIONS:
                        hit = next((k for k in sec[s] if re.search(rf"\b{re.escape(k)}\b", str(exc))
                                    and _locate(text, s, k)), None)
                        if hit:
                            name, key = s, hit
                            break
                raise _err(text, f"{exc} (cell {cell})" if cell else str(exc), name, key) from None


def _problem_spec(sec: dict) -> ProblemSpec:
    p = dict(sec["problem"])
    name = _canonical_name(p.pop("base_function"))
    roles = dict(DEFAULT_ROLES[name])
    for k in ("design_indices", "relevant_context_indices", "num_irrelevant_contexts"):
        if p.get(k) is not None:
            roles[k] = p[k]
        p.pop(k, None)
    return ProblemSpec(base_function=name, **roles, **p)


def _cost_law(sec: dict) -> CostLaw:
    return CostLaw(**sec["cost"])


def _run_config(sec: dict) -> RunConfig:
    return RunConfig(
        **sec["run"],
        fit=FitConfig(**sec["gp"]),
        acquisition=AcquisitionConfig(**sec["acquisition"]),
        stopping=StoppingConfig(**sec["stopping"]),
    )


@dataclass(frozen=True)
class Job:
    cell_index: int
    cell: dict
    method: str
    trial: int
    seed: int
    sections: dict = field(repr=False, default=None)


def plan_jobs(cfg: ExperimentConfig) -> list[Job]:
    exp = cfg.experiment
    jobs = []
    for ci, cell in enumerate(cfg.cells()):
        sec = cfg.cell_sections(cell)
        cell_hash = stable_hash(cell)
        for method in exp["methods"]:
            name = get_method(method).name
            method_id = 0 if exp["paired"] else stable_hash(name)
            for trial in range(exp["trials"]):
                seed = trial_seed(int(exp["base_seed"]), method_id, cell_hash, trial)
                jobs.append(Job(ci, cell, name, trial, seed, sec))
    return jobs


def execute_job(job: Job):
    """Run one trial; returns ``(job key, result or error text)``."""
    key = (job.cell_index, job.method, job.trial)
    try:
        problem = make_problem(_problem_spec(job.sections))
        result = run_trial(job.method, problem, _cost_law(job.sections), _run_config(job.sections), job.seed)
        return key, result
    except Exception as exc:  # a failing trial must not take the others down
        return key, f"{type(exc).__name__}: {exc}"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else repr(float(x))
    return str(x)


def result_rows(result: TrialResult, trial: int):
    masks = result.mask_strings()
    inter = ["".join("1" if b else "0" for b in row) for row in result.intervened]
    for i in range(result.t.size):
        yield [
            str(int(result.t[i])),
            _fmt(result.cumulative_cost[i]),
            _fmt(result.y_best[i]),
            result.phase[i],
            masks[i],
            _fmt(result.delta_R_bound[i]),
            _fmt(result.s_t[i]),
            result.method,
            str(trial),
            str(result.seed),
            _fmt(result.f_best[i]),
            _fmt(result.step_costs[i]),
            inter[i],
        ]


def write_results_csv(path: Path, results: list[tuple[int, TrialResult]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + CSV_EXTRAS)
    for trial, res in results:
        w.writerows(result_rows(res, trial))
    path.write_text(buf.getvalue())


_INT_COLS = {"t", "trial", "seed"}
_FLOAT_COLS = {"cumulative_cost", "y_best", "delta_R_bound", "s_t", "f_best", "step_cost"}


def read_results_csv(path) -> list[dict]:
    """Rows of a results CSV with numeric columns parsed; masks stay strings."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames[: len(CSV_COLUMNS)]) != CSV_COLUMNS:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            for k in r:
                if k in _INT_COLS:
                    r[k] = int(r[k])
                elif k in _FLOAT_COLS:
                    r[k] = float(r[k])
            rows.append(r)
    return rows


def _trials_from_rows(rows: list[dict]) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault((r["method"], r["trial"]), []).append(r)
    return out


def _switch_stats(trial_rows: list[dict]) -> tuple[Optional[int], int, float]:
    iters = [r for r in trial_rows if r["t"] >= 1]
    T = len(iters)
    switch = None
    for a, b in zip(iters, iters[1:]):
        if a["phase"] == "observational" and b["phase"] == "interventional":
            switch = a["t"]
            break
    frac = 1.0 if switch is None or T == 0 else switch / T
    return switch, T, frac


def _git_stamp() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def run_experiment(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    """Run every (cell, method, trial) job and write the outputs under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    jobs = plan_jobs(cfg)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = dict(pool.map(execute_job, jobs))
    else:
        done = dict(execute_job(j) for j in jobs)

    cells = cfg.cells()
    failures = []
    summary_rows, inclusion_rows, switching_rows = [], [], []
    files = []
    for ci, cell in enumerate(cells):
        cell_results = []
        for job in (j for j in jobs if j.cell_index == ci):
            res = done[(ci, job.method, job.trial)]
            if isinstance(res, str):
                failures.append(dict(cell=ci, method=job.method, trial=job.trial, seed=job.seed, error=res))
                continue
            cell_results.append((job, res))
        name = f"results_cell{ci:03d}.csv"
        write_results_csv(out / name, [(j.trial, r) for j, r in cell_results])
        files.append(name)
        for method in cfg.experiment["methods"]:
            mname = get_method(method).name
            rs = [(j, r) for j, r in cell_results if j.method == mname]
            if not rs:
                continue
            summ = aggregate([r for _, r in rs])
            fb = summ.final_best
            summary_rows.append([ci, mname, len(rs), _fmt(fb.mean()), _fmt(fb.std()),
                                 _fmt(summ.switch_fractions.mean()), _fmt(summ.switch_cost_fractions.mean())])
            for t in range(summ.inclusion.shape[0]):
                for j in range(summ.inclusion.shape[1]):
                    inclusion_rows.append([ci, mname, t + 1, j, _fmt(summ.inclusion[t, j])])
            for job, r in rs:
                switching_rows.append([ci, mname, job.trial, "" if r.switch_iteration is None else r.switch_iteration,
                                       r.n_iterations, _fmt(r.switch_fraction), _fmt(r.switch_cost_fraction)])

    _write_table(out / "summary.csv", ["cell", "method", "trials", "final_best_mean", "final_best_std",
                                       "switch_fraction_mean", "switch_cost_fraction_mean"], summary_rows)
    _write_table(out / "inclusion.csv", ["cell", "method", "t", "context", "inclusion_probability"], inclusion_rows)
    _write_table(out / "switching.csv", ["cell", "method", "trial", "switch_iteration", "iterations",
                                         "switch_fraction", "switch_cost_fraction"], switching_rows)
    manifest = dict(
        version=__version__,
        git=_git_stamp(),
        config=cfg.resolved(),
        cells=[dict(index=i, values=c, file=files[i]) for i, c in enumerate(cells)],
        csv_columns=list(CSV_COLUMNS),
        csv_extras=list(CSV_EXTRAS),
        seeds=[dict(cell=j.cell_index, method=j.method, trial=j.trial, seed=j.seed) for j in jobs],
        failures=failures,
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for f in failures:
        logger.error("trial failed: cell %d %s trial %d: %s", f["cell"], f["method"], f["trial"], f["error"])
    return 1 if failures else 0


def _write_table(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def sobol_report(function_name: str, n: int, seed: int = 0) -> str:
    """First/total-order table of a base function, rows labelled by default role."""
    name = _canonical_name(function_name)
    fn, dim = unit_base_function(name)
    first, total = sobol_indices(fn, dim, n, seed)
    roles = DEFAULT_ROLES[name]
    labels = [("x" if i in roles["design_indices"] else "z") + f"({i + 1})" for i in range(dim)]
    lines = [f"{'variable':<10}{'first':>10}{'total':>10}"]
    for lab, s1, st in zip(labels, first, total):
        lines.append(f"{lab:<10}{s1:>10.3f}{st:>10.3f}")
    design = sum(first[i] for i in roles["design_indices"])
    context = sum(first[i] for i in roles["relevant_context_indices"])
    lines.append(f"{'sum x':<10}{design:>10.3f}")
    lines.append(f"{'sum z':<10}{context:>10.3f}")
    return "\n".join(lines)


def summarize(directory: Path) -> str:
    files = sorted(directory.glob("results_cell*.csv"))
    if not files:
        raise ContractError(f"no results files in {directory}")
    lines = [f"{'file':<22}{'method':<12}{'trials':>7}{'final_best':>12}{'std':>8}{'switch_frac':>13}"]
    for path in files:
        trials = _trials_from_rows(read_results_csv(path))
        methods = sorted({m for m, _ in trials})
        for m in methods:
            keys = sorted(k for k in trials if k[0] == m)
            best = np.array([trials[k][-1]["f_best"] for k in keys])
            frac = np.array([_switch_stats(trials[k])[2] for k in keys])
            lines.append(f"{path.name:<22}{m:<12}{len(keys):>7}{best.mean():>12.4f}{best.std():>8.4f}"
                         f"{frac.mean():>13.3f}")
    return "\n".join(lines)


def load_config(path: Path) -> ExperimentConfig:
    text = path.read_text()
    fmt = "json" if path.suffix == ".json" else "toml"
    return parse_config(text, fmt)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sadcbo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a TOML config or a manifest")
    r.add_argument("config", type=Path)
    r.add_argument("--out", type=Path, default=None, help="output directory (default: next to the config)")
    r.add_argument("--workers", type=int, default=int(os.environ.get("SADCBO_WORKERS", "1")))
    s = sub.add_parser("sobol", help="first/total-order Sobol indices of a base function")
    s.add_argument("function", choices=sorted(BASE_FUNCTIONS))
    s.add_argument("--n", type=int, default=2**16)
    s.add_argument("--seed", type=int, default=0)
    m = sub.add_parser("summarize", help="summary table of a results directory")
    m.add_argument("directory", type=Path)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            out = args.out or args.config.parent / cfg.experiment["name"]
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            return run_experiment(cfg, out, args.workers)
        if args.command == "sobol":
            print(sobol_report(args.function, args.n, args.seed))
            return 0
        print(summarize(args.directory))
        return 0
    except ConfigError as exc:
        print(f"{args.config}: {exc}" if args.command == "run" else str(exc), file=sys.stderr)
        return 2
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

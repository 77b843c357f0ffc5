import json
import math

import numpy as np
import pytest

from sadcbo import cli
from sadcbo.cli import (
    CSV_COLUMNS,
    ConfigError,
    main,
    parse_config,
    plan_jobs,
    read_results_csv,
    sobol_report,
    splitmix64,
    trial_seed,
)

TINY = """
[experiment]
name = "tiny"
trials = 1
methods = ["CUBO"]

[problem]
base_function = "ackley5"
num_irrelevant_contexts = 1

[run]
budget = 12
"""


def write(tmp_path, text, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestSeeding:
    def test_splitmix_reference(self):
        # first output of the reference generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_trial_seeds_distinct(self):
        seeds = {trial_seed(0, 0, 123, k) for k in range(1000)}
        assert len(seeds) == 1000

    def test_paired_methods_share_seeds(self):
        cfg = parse_config(TINY.replace('["CUBO"]', '["CUBO", "VBO"]'))
        jobs = plan_jobs(cfg)
        assert jobs[0].seed == jobs[1].seed

    def test_unpaired_methods_differ(self):
        text = TINY.replace('["CUBO"]', '["CUBO", "VBO"]').replace('trials = 1', 'trials = 1\npaired = false')
        jobs = plan_jobs(parse_config(text))
        assert jobs[0].seed != jobs[1].seed


class TestConfig:
    def test_defaults_filled(self):
        cfg = parse_config(TINY)
        assert cfg.sections["run"]["eta"] == 0.8
        assert cfg.sections["stopping"]["kappa_value"] == 0.0

    def test_sweep_cells(self):
        cfg = parse_config(TINY + '\n[sweep]\n"run.eta" = [0.5, 0.8]\nproblem.num_irrelevant_contexts = [1, 2]\n')
        assert len(cfg.cells()) == 4
        assert cfg.cell_sections({"run.eta": 0.5})["run"]["eta"] == 0.5

    @pytest.mark.parametrize("text,line", [
        ("[experiment]\ntrials = 0\n", 2),
        ("[run]\n\neta = 1.5\n", 3),
        ("[run]\nfoo = 1\n", 2),
        ("[nothing]\n", 1),
        ("[run\n", 1),
        ("[sweep]\n\"run.eta\" = []\n", 2),
        ("[experiment]\nmethods = [\"XBO\"]\n", 2),
    ])
    def test_line_diagnostics(self, text, line):
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        assert exc.value.line == line

    def test_manifest_round_trip(self, tmp_path):
        cfg = parse_config(TINY)
        again = parse_config(json.dumps({"config": cfg.resolved()}), fmt="json")
        assert again.sections == cfg.sections


class TestRun:
    def test_row_accounting(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", str(write(tmp_path, TINY)), "--out", str(out)]) == 0
        files = sorted(out.glob("results_*.csv"))
        assert len(files) == 1
        rows = read_results_csv(files[0])
        # 5 initial rows, then unit-cost steps while the remaining budget covers
        # a design plus the cheapest context (1 + 3): 7, 6, 5, 4 left
        assert len(rows) == 5 + 4
        assert [r["t"] for r in rows] == list(range(-4, 5))
        assert rows[-1]["cumulative_cost"] == 9.0

    def test_header_order(self, tmp_path):
        out = tmp_path / "out"
        main(["run", str(write(tmp_path, TINY)), "--out", str(out)])
        header = (out / "results_cell000.csv").read_text().splitlines()[0].split(",")
        assert tuple(header[: len(CSV_COLUMNS)]) == CSV_COLUMNS
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["csv_extras"] == header[len(CSV_COLUMNS):]

    def test_reader_round_trip(self, tmp_path):
        out = tmp_path / "out"
        main(["run", str(write(tmp_path, TINY.replace("CUBO", "SADCBO"))), "--out", str(out)])
        rows = read_results_csv(out / "results_cell000.csv")
        cfg = parse_config(TINY.replace("CUBO", "SADCBO"))
        res = cli.execute_job(plan_jobs(cfg)[0])[1]
        np.testing.assert_array_equal([r["y_best"] for r in rows], res.y_best)
        np.testing.assert_array_equal([r["cumulative_cost"] for r in rows], res.cumulative_cost)
        assert [r["selected_mask"] for r in rows] == res.mask_strings()
        for r, b in zip(rows, res.delta_R_bound):
            assert (math.isnan(r["delta_R_bound"]) and math.isnan(b)) or r["delta_R_bound"] == b

    def test_rerun_is_byte_identical(self, tmp_path):
        text = TINY.replace('["CUBO"]', '["CUBO", "SADCBO"]').replace("trials = 1", "trials = 2")
        cfgp = write(tmp_path, text)
        main(["run", str(cfgp), "--out", str(tmp_path / "a")])
        main(["run", str(cfgp), "--out", str(tmp_path / "b"), "--workers", "2"])
        main(["run", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "c")])
        for name in ("results_cell000.csv", "summary.csv", "inclusion.csv", "switching.csv"):
            a = (tmp_path / "a" / name).read_bytes()
            assert a == (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()

    def test_partial_failure_recorded(self, tmp_path, monkeypatch):
        real = cli.run_trial

        def flaky(method, problem, cost_law, run, seed):
            if method == "VBO":
                raise RuntimeError("boom")
            return real(method, problem, cost_law, run, seed)

        monkeypatch.setattr(cli, "run_trial", flaky)
        out = tmp_path / "out"
        code = main(["run", str(write(tmp_path, TINY.replace('["CUBO"]', '["CUBO", "VBO"]'))), "--out", str(out)])
        assert code == 1
        manifest = json.loads((out / "manifest.json").read_text())
        assert [f["method"] for f in manifest["failures"]] == ["VBO"]
        assert {r["method"] for r in read_results_csv(out / "results_cell000.csv")} == {"CUBO"}

    def test_bad_config_exit_code(self, tmp_path, capsys):
        assert main(["run", str(write(tmp_path, "[run]\neta = 2.0\n"))]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_summarize(self, tmp_path, capsys):
        out = tmp_path / "out"
        main(["run", str(write(tmp_path, TINY)), "--out", str(out)])
        capsys.readouterr()
        assert main(["summarize", str(out)]) == 0
        assert "CUBO" in capsys.readouterr().out


class TestSobolReport:
    def test_row_labels(self):
        lines = sobol_report("hartmann6", 1024, seed=0).splitlines()
        assert [ln.split()[0] for ln in lines[1:7]] == ["z(1)", "x(2)", "z(3)", "z(4)", "x(5)", "x(6)"]

    def test_group_sums(self):
        lines = sobol_report("hartmann6", 2**16, seed=0).splitlines()
        sums = {ln.split()[1]: float(ln.split()[2]) for ln in lines if ln.startswith("sum")}
        assert abs(sums["x"] - 0.124) <= 0.03
        assert abs(sums["z"] - 0.196) <= 0.03

    def test_unknown_function(self):
        with pytest.raises(SystemExit):
            main(["sobol", "rosenbrock"])

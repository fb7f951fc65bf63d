import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mcboost import cli
from mcboost.dynamics import Trace
from mcboost.exceptions import ContractError

FAST = ["--n-trees", "5", "--init-n-trees", "5", "--init-max-depth", "3", "--synthetic-n", "60"]


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def toy_run(out):
    assert run_cli("run", "--dataset", "toy", "--rounds", 2, "--out-dir", out) == 0
    return out / "trace.json"


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestRun:
    def test_toy(self, tmp_path, capsys):
        path = toy_run(tmp_path)
        tr = Trace.from_json(path.read_text())
        assert tr.rounds[0].gap == pytest.approx(2.8284271, abs=1e-7)
        assert tr.rounds[1].gap == pytest.approx(0.0, abs=1e-14)
        out = capsys.readouterr().out
        assert out.splitlines()[0].split() == ["t", "w_t", "gap", "train_mse", "mce_l2", "bound"]
        assert (tmp_path / "trace.csv").exists() and (tmp_path / "config.ini").exists()

    def test_zero_rounds_rejected(self, tmp_path, capsys):
        assert run_cli("run", "--dataset", "toy", "--rounds", 0, "--out-dir", tmp_path) == 2
        assert "rounds" in capsys.readouterr().err

    def test_deterministic(self, tmp_path):
        args = ["run", "--dataset", "synthetic", "--rounds", 3, *FAST]
        assert run_cli(*args, "--out-dir", tmp_path / "a") == 0
        assert run_cli(*args, "--out-dir", tmp_path / "b") == 0
        for name in ("trace.json", "trace.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_env_and_flag_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "7")
        args = cli.build_parser().parse_args(["run"])
        assert cli.build_config(args).seed == 7
        args = cli.build_parser().parse_args(["run", "--seed", "3"])
        assert cli.build_config(args).seed == 3

    def test_config_file(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[run]\nrule = adaptive\nrounds = 5\n")
        cfg = cli.build_config(cli.build_parser().parse_args(["run", "--config", str(ini), "--rounds", "7"]))
        assert cfg.rule == "adaptive" and cfg.rounds == 7
        ini.write_text("[run]\nbogus = 1\n")
        with pytest.raises(ContractError, match="bogus"):
            cli.build_config(cli.build_parser().parse_args(["run", "--config", str(ini)]))

    def test_defaults_match_experimental_setup(self):
        cfg = cli.RunConfig()
        assert (cfg.rounds, cfg.eta, cfg.n_trees, cfg.learn_rate, cfg.max_depth) == (20, 1.0, 100, 0.1, 3)
        assert (cfg.init, cfg.init_n_trees, cfg.init_max_depth) == ("forest", 100, 5)

    def test_config_round_trip(self, tmp_path):
        cfg = cli.RunConfig(rule="relaxed", eta=0.5)
        ini = tmp_path / "c.ini"
        ini.write_text(cli.config_to_ini(cfg))
        assert cli.build_config(cli.build_parser().parse_args(["run", "--config", str(ini)])) == cfg

    def test_init_file(self, tmp_path):
        np.savetxt(tmp_path / "f0.csv", [0.5, 0.5], delimiter=",")
        assert run_cli("run", "--dataset", "toy", "--rounds", 1, "--init", "file",
                       "--init-file", tmp_path / "f0.csv", "--out-dir", tmp_path) == 0
        tr = Trace.from_json((tmp_path / "trace.json").read_text())
        np.testing.assert_array_equal(tr.rounds[0].f, [0.5, 0.5])
        np.savetxt(tmp_path / "f0.csv", [0.5, 0.5, 0.5], delimiter=",")
        assert run_cli("run", "--dataset", "toy", "--rounds", 1, "--init", "file",
                       "--init-file", tmp_path / "f0.csv", "--out-dir", tmp_path) == 2

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "mcboost", "run", "--dataset", "toy", "--rounds", "1", "--out-dir", str(tmp_path)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr


class TestVerify:
    def test_pass(self, tmp_path, capsys):
        path = toy_run(tmp_path)
        assert run_cli("verify", path) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["overall"] == "pass"
        assert "overall: pass" in (tmp_path / "report.txt").read_text()

    def test_corrupted(self, tmp_path, capsys):
        path = toy_run(tmp_path)
        d = json.loads(path.read_text())
        d["rounds"][1]["f"] = [10.0, 10.0]
        path.write_text(json.dumps(d))
        assert run_cli("verify", path) == 1
        assert "failed checks:" in capsys.readouterr().out

    def test_malformed(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run_cli("verify", bad) == 2
        assert run_cli("verify", tmp_path / "missing.json") == 2

    def test_tree_trace_not_applicable(self, tmp_path):
        assert run_cli("run", "--dataset", "synthetic", "--rounds", 3, *FAST, "--out-dir", tmp_path) == 0
        assert run_cli("verify", tmp_path / "trace.json") == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        st = {c["name"]: c["status"] for c in rep["checks"]}
        assert st["lyapunov_decrement"] == st["mce_bound"] == "not-applicable"


def _geometric_trace(path, T=10):
    from mcboost.dynamics import RoundRecord

    y = np.array([1.0, 0.0])
    F = [np.array([1.0 - 0.5**t, 0.0]) for t in range(T + 1)]
    rounds = [
        RoundRecord(t, F[t], 1.0 if t < T else None, float(np.linalg.norm(F[t + 1] - F[t])) if t < T else None,
                    0.0, 0.0, 0.0, 0.0, None, 1.0, None)
        for t in range(T + 1)
    ]
    cfg = {"rule": {"kind": "unit"}, "mode": {"kind": "trees"}, "eta": 1.0, "T": T, "n": 2}
    path.write_text(Trace(cfg, y, rounds).to_json())
    return path


class TestRateFit:
    def test_geometric(self, tmp_path):
        path = _geometric_trace(tmp_path / "trace.json")
        assert run_cli("rate-fit", path, "--window", 0, 10) == 0
        fit = json.loads((tmp_path / "ratefit.json").read_text())
        assert fit["r2"] == pytest.approx(1.0, abs=1e-12)
        assert fit["kappa_hat"] == pytest.approx(0.5, abs=1e-12)

    def test_window_too_long(self, tmp_path, capsys):
        path = _geometric_trace(tmp_path / "trace.json")
        assert run_cli("rate-fit", path, "--window", 0, 11) == 2
        assert "window" in capsys.readouterr().err


class TestSweep:
    def test_parse_seeds(self):
        assert cli.parse_seeds("0-3") == [0, 1, 2, 3]
        assert cli.parse_seeds("1,4, 7") == [1, 4, 7]
        with pytest.raises(ContractError, match="duplicate"):
            cli.parse_seeds("0-3,2")
        with pytest.raises(ContractError):
            cli.parse_seeds("")

    def test_duplicate_seeds_exit(self, tmp_path):
        assert run_cli("sweep", "--dataset", "toy", "--seeds", "1,1", "--out-dir", tmp_path) == 2

    def test_single_seed_aggregate_equals_trace(self, tmp_path):
        assert run_cli("sweep", "--dataset", "synthetic", "--rounds", 3, *FAST, "--seeds", "4",
                       "--rules", "unit", "--out-dir", tmp_path) == 0
        agg = rows(tmp_path / "aggregate.csv")
        tr = Trace.from_json((tmp_path / "seed_4" / "unit" / "trace.json").read_text())
        assert [float(r["train_mse_mean"]) for r in agg] == tr.series("train_mse")
        assert sum(int(r["best_round"]) for r in agg) == 1

    def test_rules_and_rounds(self, tmp_path):
        assert run_cli("sweep", "--dataset", "synthetic", "--rounds", 2, *FAST, "--seeds", "0-1",
                       "--rules", "unit,relaxed,adaptive", "--jobs", 2, "--out-dir", tmp_path) == 0
        agg = rows(tmp_path / "aggregate.csv")
        assert len(agg) == 3 * 3
        assert {r["rule"] for r in agg} == {"unit", "relaxed", "adaptive"}
        assert all(r["n_seeds"] == "2" for r in agg)

    def test_all_fail(self, tmp_path, capsys):
        assert run_cli("sweep", "--dataset", "german", "--seeds", "0", "--rules", "unit",
                       "--data-path", tmp_path / "nope.csv", "--out-dir", tmp_path) == 1
        assert "failed" in capsys.readouterr().err


def test_export_plot(tmp_path):
    path = toy_run(tmp_path)
    assert run_cli("export-plot", path, "--label", "toy", "--out-dir", tmp_path) == 0
    gaps = rows(tmp_path / "plot_gaps.csv")
    curves = rows(tmp_path / "plot_curves.csv")
    assert [r["series"] for r in gaps] == ["toy", "toy"]
    assert len(curves) == 3 and set(curves[0]) == {"series", "t", "train_mse", "mce_l2", "mce_linf"}

import json

import pytest

from zoneliq import cli


def run(tmp_path, *argv):
    out = tmp_path / "out"
    code = cli.main([argv[0], "--out", str(out), *argv[1:]])
    report = json.loads((out / "report.json").read_text()) if (out / "report.json").exists() else None
    return code, out, report


def test_simulate_is_reproducible(tmp_path, configs_dir):
    cfg = str(configs_dir / "benchmark_abm.json")
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert cli.main(["simulate", "--config", cfg, "--out", str(a), "--paths", "3", "--steps", "50"]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", str(b), "--paths", "3", "--steps", "50",
                     "--threads", "4"]) == 0
    for name in ("path_0.csv", "path_2.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "path_0.csv").read_text().splitlines()[0] == "t,S,L"


def test_simulate_report(tmp_path, configs_dir):
    code, out, rep = run(tmp_path, "simulate", "--config", str(configs_dir / "benchmark_abm.json"),
                         "--paths", "2000", "--steps", "100", "--max-files", "1")
    assert code == 0
    assert rep["pass"] and rep["seed"] == 20240611
    assert len(rep["problem_hash"]) == 16
    assert rep["checks"][0]["name"] == "mean_L_T_vs_expected"


def test_seed_override_changes_paths(tmp_path, configs_dir):
    cfg = str(configs_dir / "benchmark_abm.json")
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--steps", "20"])
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--steps", "20", "--seed", "5"])
    assert (tmp_path / "a" / "path_0.csv").read_text() != (tmp_path / "b" / "path_0.csv").read_text()


def test_missing_config_is_io_error(tmp_path):
    code, _, _ = run(tmp_path, "simulate", "--config", str(tmp_path / "nope.json"))
    assert code == 4


def test_invalid_config_is_validation_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"kind": "GBM", "barrier": -1.0, "z0": 1.0}, "cost": {}}))
    code, _, _ = run(tmp_path, "solve", "--config", str(bad))
    assert code == 2
    bad.write_text("{not json")
    assert run(tmp_path, "solve", "--config", str(bad))[0] == 2


def test_bad_flag_values(tmp_path, configs_dir, monkeypatch):
    cfg = str(configs_dir / "benchmark_abm.json")
    assert run(tmp_path, "simulate", "--config", cfg, "--paths", "0")[0] == 2
    monkeypatch.setenv("ZONELIQ_THREADS", "many")
    assert run(tmp_path, "simulate", "--config", cfg)[0] == 2


def test_threads_from_environment(monkeypatch):
    args = cli.build_parser().parse_args(["simulate", "--config", "x", "--out", "y"])
    monkeypatch.setenv("ZONELIQ_THREADS", "3")
    assert cli._threads(args) == 3
    args.threads = 2
    assert cli._threads(args) == 2


def test_solve_writes_field(tmp_path, configs_dir):
    code, out, rep = run(tmp_path, "solve", "--config", str(configs_dir / "benchmark_abm.json"),
                         "--nt", "100", "--nz", "21", "--residual-paths", "4000")
    assert code == 0, rep["checks"]
    assert (out / "value_field.csv").read_text().splitlines()[0] == "t,z,u,h"
    meta = json.loads((out / "value_meta.json").read_text())
    assert meta["problem_hash"] == rep["problem_hash"]


def test_verify_zero_penalty(tmp_path, configs_dir):
    code, out, rep = run(tmp_path, "verify", "--config", str(configs_dir / "zero_penalty.json"),
                         "--paths", "500", "--pilot-paths", "200", "--steps", "50")
    assert code == 0, rep["checks"]
    assert rep["results"]["u_T_z0"] == 0.0


@pytest.mark.parametrize("policy", [["--policy", "optimal"], ["--policy", "constant", "--rate", "0.5"]])
def test_execute_writes_records(tmp_path, configs_dir, policy):
    code, out, rep = run(tmp_path, "execute", "--config", str(configs_dir / "benchmark_abm.json"),
                         "--paths", "20", "--steps", "100", "--max-files", "2", *policy)
    assert code == 0
    assert (out / "execution_00001.csv").read_text().splitlines()[0] == "t,S,L,xi,X"
    assert "summary" in rep["results"]


def test_branching_command(tmp_path, configs_dir):
    code, out, rep = run(tmp_path, "branching", "--config", str(configs_dir / "benchmark_abm.json"),
                         "--nscale", "10", "--paths", "2000")
    assert code == 0, rep["checks"]
    assert "finite_scale_prediction" in rep["results"]


def test_lattice_command(tmp_path, configs_dir):
    code, out, rep = run(tmp_path, "lattice", "--config", str(configs_dir / "benchmark_abm.json"),
                         "--levels", "2,3", "--paths", "5")
    assert (out / "lattice_convergence.csv").exists()
    assert (out / "lattice_n2.csv").exists()
    assert code in (0, 3)
    assert [c["name"] for c in rep["checks"]] == ["sup_error_strictly_decreasing",
                                                  "cost_gap_ratio_last_vs_first"]
    assert all(r["zero_policy_gap"] == 0.0 for r in rep["results"]["rows"])

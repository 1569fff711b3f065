import math
import subprocess
import sys

import numpy as np
import pytest

from fbsde_hjb.cli import main

# small enough to keep each command to a few seconds
SMALL = """
[grid]
nx = 61
nt = 200
[mc]
paths = 4000
steps = 32
[solver]
candidates = 26
[verify]
dpp_paths = 2000
"""


def run(tmp_path, name, *args, config=SMALL):
    cfg = tmp_path / f"{name}.ini"
    cfg.write_text(config)
    out = tmp_path / name
    return main(["--config", str(cfg), "--out-dir", str(out), *args]), out


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("solve")
    code, out = run(tmp, "out", "solve")
    return code, out


def test_solve_writes_artifacts(solved):
    code, out = solved
    assert code == 0
    for name in ("v.csv", "g.csv", "z.csv", "u_star.csv", "report.txt", "config.ini"):
        assert (out / name).is_file()
    header = (out / "v.csv").read_text().splitlines()[0]
    assert header == "t,x,value"
    assert "converged: True" in (out / "report.txt").read_text()


def test_solve_output_is_deterministic(solved, tmp_path):
    _, first = solved
    code, second = run(tmp_path, "again", "solve")
    assert code == 0
    for name in ("v.csv", "g.csv", "z.csv", "u_star.csv", "report.txt"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_value_is_written_as_a_reward(solved):
    _, out = solved
    vals = np.loadtxt(out / "v.csv", delimiter=",", skiprows=1)[:, 2]
    assert np.all(vals < 0)


def test_verify_with_zero_tolerance_fails(solved):
    _, out = solved
    cfg = out.parent / "strict.ini"
    cfg.write_text(SMALL + "residual_tol = 0\n")
    code = main(["verify", "--no-solve", "--config", str(cfg), "--out-dir", str(out)])
    assert code == 3
    report = (out / "verify_report.txt").read_text()
    assert "residuals: FAIL" in report
    for name in ("cost_match", "dpp", "z_identity"):
        assert f"{name}:" in report


def test_verify_without_artifacts(tmp_path, capsys):
    code, _ = run(tmp_path, "empty", "verify", "--no-solve")
    assert code == 1
    assert "missing artifacts" in capsys.readouterr().err


def test_check_dpp_reads_artifacts(solved):
    _, out = solved
    cfg = out.parent / "dpp.ini"
    cfg.write_text(SMALL)
    code = main(["check-dpp", "--no-solve", "--config", str(cfg), "--out-dir", str(out)])
    report = (out / "dpp_report.txt").read_text()
    assert code in (0, 3)
    assert report.startswith("dpp: ")
    assert len([ln for ln in report.splitlines() if ln[:1].isdigit()]) == 9


@pytest.mark.parametrize(
    "extra, message",
    [("[grid]\nnx = 2\n", "grid too small"), ("[solver]\nmax_iter = 0\n", "max_iter"), ("[mc]\npaths = 0\n", "paths")],
)
def test_invalid_config_exits_1(tmp_path, capsys, extra, message):
    code, _ = run(tmp_path, "bad", "solve", config=extra)
    assert code == 1
    assert message in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["solve", "--config", str(tmp_path / "missing.ini")]) == 1
    assert main(["simulate", "--threads", "0", "--out-dir", str(tmp_path)]) == 1


def test_non_convergence_exits_2(tmp_path):
    code, out = run(tmp_path, "short", "solve", config=SMALL.replace("candidates = 26", "candidates = 26\nmax_iter = 1\ntol = 0"))
    assert code == 2
    assert "converged: False" in (out / "report.txt").read_text()


def test_simulate_is_byte_identical(tmp_path):
    code1, a = run(tmp_path, "a", "simulate")
    code2, b = run(tmp_path, "b", "simulate", "--threads", "2")
    assert code1 == code2 == 0
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    assert (a / "summary.csv").read_text().splitlines()[0] == "k,t,mean_X,std_X,mean_Y,mean_Z"
    _, c = run(tmp_path, "c", "simulate", "--seed", "1")
    assert (a / "summary.csv").read_bytes() != (c / "summary.csv").read_bytes()


def test_rerun_from_echoed_config(tmp_path):
    _, first = run(tmp_path, "first", "simulate", "--seed", "3")
    code = main(["simulate", "--config", str(first / "config.ini"), "--out-dir", str(tmp_path / "second")])
    assert code == 0
    assert (first / "summary.csv").read_bytes() == (tmp_path / "second" / "summary.csv").read_bytes()


def test_meanvar_simulation_tracks_the_martingale(tmp_path):
    cfg = "[problem]\nbuiltin = meanvar\n[mc]\npaths = 20000\nsteps = 32\nwrite_paths = false\n"
    code, out = run(tmp_path, "mv", "simulate", config=cfg)
    assert code == 0
    rows = np.loadtxt(out / "summary.csv", delimiter=",", skiprows=1)
    assert rows[0, 0] == 0
    # Y_0 = E[X_T] = x0 without drift; sd of X_T is 0.2
    assert abs(rows[0, 4] - 1.0) <= 3 * 0.2 / math.sqrt(20000)
    assert np.all(np.isfinite(rows[:-1, 5]))


def test_path_dump(tmp_path):
    code, out = run(tmp_path, "dump", "simulate", config="[mc]\npaths = 3\nsteps = 4\nwrite_paths = true\n")
    assert code == 0
    lines = (out / "paths.csv").read_text().splitlines()
    assert lines[0] == "path,k,t,x,y,z,u" and len(lines) == 1 + 3 * 5


def test_custom_policy_expression(tmp_path):
    code, out = run(tmp_path, "pol", "simulate", config=SMALL.replace("[mc]\n", "[mc]\npolicy = 0.5 + 0*x\n"))
    assert code == 0
    assert "cost_mean" in (out / "simulate_report.txt").read_text()


def test_bench_viscosity(tmp_path, capsys):
    code, out = run(tmp_path, "visc", "bench", "viscosity")
    assert code == 0
    report = (out / "viscosity_report.txt").read_text()
    assert "= -2" in report and "= 2" in report


def test_bench_meanvar(tmp_path):
    code, out = run(tmp_path, "mvb", "bench", "meanvar", config="[mc]\npaths = 20000\nsteps = 64\n")
    assert code == 0
    report = (out / "meanvar_report.txt").read_text()
    for key in ("direct_variance", "transformed_cost", "gap_in_combined_se"):
        assert key in report


def test_bench_utility(tmp_path):
    code, out = run(tmp_path, "util", "bench", "utility", config="")
    assert code == 0
    rows = (out / "benchmark.csv").read_text().splitlines()
    assert rows[0] == "t,x,v_closed,v_grid,g_closed,g_grid,pi_closed,pi_grid,abs_err_v,abs_err_g,abs_err_pi"
    data = np.loadtxt(out / "benchmark.csv", delimiter=",", skiprows=1)
    assert np.all(np.isfinite(data))
    assert np.max(data[:, 10] / data[:, 6]) <= 0.05
    assert "overall: PASS" in (out / "benchmark_report.txt").read_text()


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "fbsde_hjb", "bench", "viscosity", "--out-dir", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "status: PASS" in proc.stdout

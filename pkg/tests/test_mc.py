import math

import numpy as np
import pytest

from fbsde_hjb import bench, mc
from fbsde_hjb.errors import NonFiniteError
from fbsde_hjb.problem import from_expressions


def problem(**kw):
    base = dict(mu="0", sigma="1", h="0", f="0", phi="x", g_terminal="x", T=1.0, u_lower=0.0, u_upper=0.0)
    base.update(kw)
    return from_expressions(**base)


def zero_policy(t, x):
    return np.zeros_like(x)


# --- forward simulation ------------------------------------------------------


def test_frozen_dynamics():
    ens = mc.simulate_forward(problem(sigma="0"), zero_policy, 0.0, 0.7, 16, 100, seed=1)
    assert np.all(ens.X == 0.7)
    assert ens.X.shape == (100, 17, 1) and ens.dB.shape == (100, 16, 1)


def test_brownian_moments():
    P = 100_000
    ens = mc.simulate_forward(problem(), zero_policy, 0.0, 0.0, 16, P, seed=2)
    xT = ens.X[:, -1, 0]
    assert abs(xT.mean()) <= 3.0 / math.sqrt(P)
    assert abs(xT.var(ddof=1) - 1.0) <= 0.05


def test_geometric_mean_matches_lognormal_formula():
    ens = mc.simulate_forward(problem(mu="0.1*x", sigma="0.2*x"), zero_policy, 0.0, 1.0, 256, 100_000, seed=3)
    est = mc.CostEstimate.from_samples(ens.X[:, -1, 0], 3)
    assert abs(est.mean - math.exp(0.1)) <= 3.0 * est.stderr


def test_increments_replay_the_paths():
    spec = problem(mu="0.3*x", sigma="0.5 + 0.1*tanh(x)")
    ens = mc.simulate_forward(spec, zero_policy, 0.0, 0.2, 20, 50, seed=4)
    x = np.full(50, 0.2)
    for k in range(20):
        t = ens.times[k]
        x = x + spec.mu(t, x, 0.0) * ens.dt + spec.sigma(t, x, 0.0) * ens.dB[:, k, 0]
        np.testing.assert_array_equal(ens.X[:, k + 1, 0], x)


def test_replayable_and_worker_independent():
    spec = problem(mu="0.1*x")
    P = 3 * mc.PATH_BLOCK + 17
    a = mc.simulate_forward(spec, zero_policy, 0.0, 1.0, 8, P, seed=5)
    b = mc.simulate_forward(spec, zero_policy, 0.0, 1.0, 8, P, seed=5)
    c = mc.simulate_forward(spec, zero_policy, 0.0, 1.0, 8, P, seed=5, workers=3)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.X, c.X)
    np.testing.assert_array_equal(a.dB, c.dB)


def test_smaller_ensembles_are_prefixes():
    spec = problem()
    big = mc.simulate_forward(spec, zero_policy, 0.0, 0.0, 8, mc.PATH_BLOCK + 900, seed=6)
    small = mc.simulate_forward(spec, zero_policy, 0.0, 0.0, 8, mc.PATH_BLOCK + 400, seed=6)
    np.testing.assert_array_equal(small.dB, big.dB[: small.paths])


def test_different_seeds_differ():
    spec = problem()
    a = mc.simulate_forward(spec, zero_policy, 0.0, 0.0, 4, 10, seed=7)
    b = mc.simulate_forward(spec, zero_policy, 0.0, 0.0, 4, 10, seed=8)
    assert not np.array_equal(a.dB, b.dB)


def test_substreams_are_distinct():
    seeds = {mc.substream_seed(0, p) for p in range(4)} | {mc.substream_seed(1, p) for p in range(4)}
    assert len(seeds) == 8
    assert mc.substream_seed(3, 2) == mc.substream_seed(3, 2)


def test_non_finite_state_reports_path_and_step():
    spec = problem(mu="1000*x*x", sigma="0")
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError) as info:
            mc.simulate_forward(spec, zero_policy, 0.0, 1.0, 50, 3, seed=0)
    path, step = info.value.where
    assert path == 0 and 1 <= step <= 50


def test_simulation_validation():
    with pytest.raises(ValueError):
        mc.simulate_forward(problem(), zero_policy, 0.0, 0.0, 4, 0, seed=0)
    with pytest.raises(ValueError):
        mc.simulate_forward(problem(), zero_policy, 0.0, 0.0, 0, 4, seed=0)


# --- backward regression -----------------------------------------------------


def test_identity_martingale():
    P = 20_000
    ens = mc.backward_regression(problem(), mc.simulate_forward(problem(), zero_policy, 0.0, 0.0, 32, P, seed=9))
    np.testing.assert_array_equal(ens.Y[:, -1], ens.X[:, -1, 0])
    assert np.max(np.abs(ens.Y[:, 0] - ens.X[:, 0, 0])) <= 3.0 / math.sqrt(P)
    # the cubic fit is loosest in the tails, so compare on average
    assert np.mean(np.abs(ens.Y[:, 1:] - ens.X[:, 1:, 0])) < 1e-2
    assert abs(ens.Z.mean() - 1.0) < 1e-2


def test_martingale_means_are_flat():
    P = 20_000
    ens = mc.backward_regression(problem(), mc.simulate_forward(problem(), zero_policy, 0.0, 0.0, 32, P, seed=10))
    means = ens.Y.mean(axis=0)
    assert np.all(np.abs(means - means[0]) <= 3.0 / math.sqrt(P))


def test_gaussian_second_moment():
    P = 50_000
    spec = problem(phi="x^2")
    ens = mc.backward_regression(spec, mc.simulate_forward(spec, zero_policy, 0.0, 0.0, 32, P, seed=11))
    # Var(X_T^2) = 2 for a standard normal
    assert abs(ens.Y[0, 0] - 1.0) <= 3.0 * math.sqrt(2.0 / P)


def test_driver_enters_backward_step():
    # h = 1 adds T - t to the identity martingale
    spec = problem(h="1")
    ens = mc.backward_regression(spec, mc.simulate_forward(spec, zero_policy, 0.0, 0.0, 16, 20_000, seed=12))
    assert abs(ens.Y[0, 0] - 1.0) <= 3.0 / math.sqrt(20_000)


def test_rank_deficiency_warns_and_stays_finite():
    ens = mc.backward_regression(problem(), mc.simulate_forward(problem(), zero_policy, 0.0, 0.0, 4, 1000, seed=13))
    assert any("rank-deficient" in w for w in ens.warnings)
    assert np.all(np.isfinite(ens.Y)) and np.all(np.isfinite(ens.Z))


def test_degree_must_be_positive():
    ens = mc.simulate_forward(problem(), zero_policy, 0.0, 0.0, 4, 10, seed=0)
    with pytest.raises(ValueError):
        mc.backward_regression(problem(), ens, degree=0)


def test_benchmark_y0_matches_affine_field(utility_params, utility_spec, utility_grid):
    pol = bench.closed_form_policy(utility_params, utility_grid, utility_spec)
    ens = mc.simulate_forward(utility_spec, pol, 0.0, 1.0, 128, 20_000, seed=14)
    mc.backward_regression(utility_spec, ens)
    cf = bench.closed_form(utility_params, 0.0, 1.0)
    se = np.std(ens.Y[:, -1], ddof=1) / math.sqrt(ens.paths)
    assert abs(ens.Y[0, 0] - float(cf.g)) <= 3.0 * se


# --- cost estimation ---------------------------------------------------------


def test_cost_of_martingale_terminal():
    est = mc.estimate_cost(problem(), zero_policy, 0.0, 0.4, 16, 20_000, seed=15)
    assert abs(est.mean - 0.4) <= 3.0 * est.stderr
    assert est.paths == 20_000 and est.seed == 15


def test_stderr_formula():
    s = np.array([1.0, 2.0, 4.0, 7.0])
    est = mc.CostEstimate.from_samples(s, 0)
    assert est.mean == pytest.approx(3.5)
    assert est.stderr == pytest.approx(np.std(s, ddof=1) / 2.0)


def test_variance_estimate():
    rng = np.random.default_rng(0)
    s = rng.normal(0.0, 2.0, 100_000)
    est = mc.variance_estimate(s, 0)
    assert est.mean == pytest.approx(np.var(s, ddof=1))
    assert abs(est.mean - 4.0) <= 3.0 * est.stderr


def test_cost_from_fields_matches_value(utility_spec, utility_solution):
    fields, _ = utility_solution
    est = mc.estimate_cost(utility_spec, fields.u_star, 0.0, 1.0, 128, 20_000, seed=16, source="fields", fields=fields)
    v0 = float(fields.v.at(0.0, 1.0))
    assert abs(est.mean - v0) <= max(3.0 * est.stderr, 0.02 * abs(v0))


def test_unknown_source():
    with pytest.raises(ValueError, match="source"):
        mc.estimate_cost(problem(), zero_policy, 0.0, 0.0, 4, 10, seed=0, source="oracle")


# --- dynamic programming check -----------------------------------------------


def test_dpp_split_outside_horizon(utility_spec, utility_solution):
    fields, _ = utility_solution
    for s in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError, match="split"):
            mc.check_dpp(utility_spec, fields, 0.0, 1.0, s, [fields.u_star], 100, seed=0)


def test_dpp_one_step_split(utility_spec, utility_solution):
    fields, _ = utility_solution
    s = fields.grid.dt
    cands = [fields.u_star, fields.u_star.shifted(0.3), fields.u_star.shifted(-0.3)]
    rep = mc.check_dpp(utility_spec, fields, 0.0, 1.0, s, cands, 5000, seed=17)
    for r in rep.rhs:
        assert r.mean - rep.lhs >= -3.0 * r.stderr - 1e-9
        assert abs(r.mean - rep.lhs) < 1e-2
    assert len(rep.lines()) == len(cands) + 6


def test_dpp_optimal_candidate_alone(utility_spec, utility_solution):
    fields, _ = utility_solution
    rep = mc.check_dpp(utility_spec, fields, 0.0, 1.0, 0.5, [fields.u_star], 10_000, seed=18)
    # 1% of |v| allowance for the grid discretization
    assert abs(rep.gap) <= 3.0 * rep.gap_se + 0.01 * abs(rep.lhs)
    assert rep.discretization_ratio >= 0.0


# --- artifacts ---------------------------------------------------------------


def test_csv_layouts(tmp_path):
    ens = mc.simulate_forward(problem(), zero_policy, 0.0, 0.0, 3, 2, seed=0)
    mc.backward_regression(problem(), ens, degree=1)
    ens.write_summary_csv(tmp_path / "summary.csv")
    ens.write_paths_csv(tmp_path / "paths.csv")
    summary = (tmp_path / "summary.csv").read_bytes().decode()
    paths = (tmp_path / "paths.csv").read_bytes().decode()
    assert summary.splitlines()[0] == "k,t,mean_X,std_X,mean_Y,mean_Z"
    assert paths.splitlines()[0] == "path,k,t,x,y,z,u"
    assert len(summary.splitlines()) == 1 + 4 and len(paths.splitlines()) == 1 + 2 * 4
    assert "\r" not in summary
    row = summary.splitlines()[2].split(",")
    assert float(row[2]) == float(f"{ens.X[:, 1, 0].mean():.17g}")

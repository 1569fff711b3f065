"""Cross-checks between the grid solution, Monte Carlo and closed forms.

Each check returns a :class:`CheckResult` with the measured value, its
limit and a one-line summary.  The same functions back ``verify``,
``check-dpp`` and ``bench`` on the command line and the acceptance tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bench, mc
from .grid import GridSpec, solve_g
from .hjb import FieldPair, hjb_residuals
from .problem import ProblemSpec, transform_gamma

DEFAULT_SHIFTS = (-0.4, -0.2, -0.1, -0.05, 0.05, 0.1, 0.2, 0.4)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: list[str] = field(default_factory=list)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.name}: {flag} (value {self.value:.6g}, limit {self.limit:.6g})"


def residual_check(spec: ProblemSpec, fields: FieldPair, candidates, tol: float) -> CheckResult:
    """Relative residuals of both equations on the inner domain."""
    res = hjb_residuals(spec, fields, candidates)
    worst = max(res["hjb_v_rel"], res["hjb_g_rel"])
    detail = [f"{k}: {v:.6g}" for k, v in sorted(res.items())]
    return CheckResult("residuals", worst <= tol, worst, tol, detail)


def optimal_ensemble(spec, fields: FieldPair, t0, x0, nt, paths, seed, degree=3, workers=1) -> mc.PathEnsemble:
    """Paths under the recovered policy with regression (Y, Z)."""
    ens = mc.simulate_forward(spec, fields.u_star, t0, x0, nt, paths, seed, workers=workers)
    return mc.backward_regression(spec, ens, degree)


def cost_check(
    spec: ProblemSpec,
    fields: FieldPair,
    t0: float,
    x0: float,
    nt: int,
    paths: int,
    seed: int,
    rel_tol: float,
    degree: int = 3,
    workers: int = 1,
    ensemble: mc.PathEnsemble | None = None,
) -> CheckResult:
    """Monte Carlo cost of the recovered policy against v(t0, x0).

    ``ensemble`` reuses paths already simulated under u* with (Y, Z) filled.
    """
    v0 = float(fields.v.at(t0, x0))
    if ensemble is None:
        ensemble = optimal_ensemble(spec, fields, t0, x0, nt, paths, seed, degree, workers)
    est = mc.CostEstimate.from_samples(mc.path_costs(spec, ensemble), ensemble.seed)
    gap = abs(est.mean - v0)
    limit = max(3.0 * est.stderr, rel_tol * abs(v0))
    detail = [
        f"v(t0,x0): {v0:.17g}",
        f"mc_mean: {est.mean:.17g}",
        f"mc_stderr: {est.stderr:.17g}",
        f"paths: {est.paths}",
    ]
    return CheckResult("cost_match", gap <= limit, gap, limit, detail)


def perturbed_candidates(fields: FieldPair, shifts=DEFAULT_SHIFTS) -> list:
    return [fields.u_star] + [fields.u_star.shifted(d) for d in shifts]


def dpp_check(
    spec: ProblemSpec,
    fields: FieldPair,
    t0: float,
    x0: float,
    s: float,
    shifts,
    paths: int,
    seed: int,
    rel_tol: float,
    workers: int = 1,
) -> tuple[CheckResult, mc.DPPReport]:
    """DPP gap of the optimal candidate, and no perturbation doing better.

    Passes when |gap of u*| <= 3 SE + rel_tol |v(t0, x0)| and every
    perturbed rhs is >= the rhs of u* minus 3 SE.
    """
    cands = perturbed_candidates(fields, shifts)
    report = mc.check_dpp(spec, fields, t0, x0, s, cands, paths, seed, workers=workers)
    opt = report.rhs[0]
    gap0 = opt.mean - report.lhs
    limit = 3.0 * opt.stderr + rel_tol * abs(report.lhs)
    beaten = [i for i, r in enumerate(report.rhs[1:], 1) if r.mean < opt.mean - 3.0 * r.stderr]
    detail = report.lines() + [
        f"optimal_gap: {gap0:.17g}",
        f"candidates_beating_optimal: {beaten if beaten else 'none'}",
    ]
    ok = abs(gap0) <= limit and not beaten
    return CheckResult("dpp", ok, abs(gap0), limit, detail), report


def z_identity_check(
    spec: ProblemSpec,
    fields: FieldPair,
    t0: float,
    x0: float,
    nt: int,
    paths: int,
    seed: int,
    rel_tol: float,
    degree: int = 3,
    workers: int = 1,
    ensemble: mc.PathEnsemble | None = None,
) -> CheckResult:
    """Regression Z along optimal paths against the field sigma* g_x."""
    ens = ensemble if ensemble is not None else optimal_ensemble(spec, fields, t0, x0, nt, paths, seed, degree, workers)
    mad, scale = mc.z_identity_gap(spec, ens, fields)
    detail = [f"mean_abs_dev: {mad:.6g}", f"field_scale: {scale:.6g}"]
    return CheckResult("z_identity", mad <= rel_tol * scale, mad, rel_tol * scale, detail)


# ---------------------------------------------------------------------------
# portfolio benchmark


@dataclass
class UtilityComparison:
    v_rel_err: float
    pi_rel_err: float
    pi_x_variation: float
    candidate_spacing: float
    g_abs_err: float
    ode_gaps: dict[str, float]
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _inner(grid: GridSpec, fraction=0.6, t_max=None):
    mask = grid.inner_mask(fraction)
    rows = np.ones(grid.nt + 1, dtype=bool) if t_max is None else grid.t <= t_max + 1e-12
    return rows, mask


def utility_comparison(
    params: bench.UtilityParams,
    spec: ProblemSpec,
    fields: FieldPair,
    candidates: int = 101,
    ode_steps: int = 1000,
    scheme: str = "explicit",
) -> UtilityComparison:
    """Grid solution of the portfolio problem against its closed forms.

    v is compared on the inner 60% of the window for t <= 0.9 T, the policy
    and g on the inner window for all t.  g is re-solved under the
    closed-form policy so that only the linear solver is under test.
    """
    grid = fields.grid
    x, t = grid.x, grid.t
    cf = bench.closed_form(params, t[:, None], x[None, :])
    v_reward = -fields.v.values
    rows, mask = _inner(grid, t_max=grid.t0 + 0.9 * (grid.T - grid.t0))
    v_rel = float(np.max(np.abs(v_reward[rows][:, mask] / cf.v[rows][:, mask] - 1.0)))

    pi = fields.u_star.values[:, mask]
    pi_true = np.broadcast_to(cf.pi_star, (len(t), grid.nx))[:, mask]
    pi_rel = float(np.max(np.abs(pi - pi_true) / np.abs(pi_true)))
    x_var = float(np.max(pi.max(axis=1) - pi.min(axis=1)))
    spacing = (float(spec.u_upper[0]) - float(spec.u_lower[0])) / max(candidates - 1, 1)

    g_cf, _ = solve_g(spec, bench.closed_form_policy(params, grid, spec), grid, scheme)
    g_err = float(np.max(np.abs(g_cf.values[:, mask] - cf.g[:, mask])))

    gaps = bench.ode_crosscheck(params, ode_steps)
    ode_err = max(gaps[k] for k in ("A", "B", "C", "D"))
    checks = [
        CheckResult("value_vs_closed_form", v_rel <= 0.02, v_rel, 0.02),
        CheckResult("policy_vs_closed_form", pi_rel <= 0.05, pi_rel, 0.05),
        CheckResult("policy_x_variation", x_var <= 2 * spacing, x_var, 2 * spacing),
        CheckResult("g_under_closed_form_policy", g_err <= 1e-3, g_err, 1e-3),
        CheckResult("ode_vs_closed_form", ode_err <= 1e-8, ode_err, 1e-8),
    ]
    return UtilityComparison(v_rel, pi_rel, x_var, spacing, g_err, gaps, checks)


BENCHMARK_HEADER = "t,x,v_closed,v_grid,g_closed,g_grid,pi_closed,pi_grid,abs_err_v,abs_err_g,abs_err_pi"


def benchmark_rows(params: bench.UtilityParams, fields: FieldPair, t_samples: int = 41, fraction: float = 0.6):
    """Closed form vs grid on a subsample of slices and the inner window."""
    grid = fields.grid
    js = np.unique(np.round(np.linspace(0, grid.nt, t_samples)).astype(int))
    idx = np.flatnonzero(grid.inner_mask(fraction))
    rows = []
    for j in js:
        t = grid.t[j]
        x = grid.x[idx]
        cf = bench.closed_form(params, min(t, params.T), x)
        v_grid = -fields.v.values[j, idx]
        g_grid = fields.g.values[j, idx]
        pi_grid = fields.u_star.values[j, idx]
        pi_cf = np.broadcast_to(cf.pi_star, x.shape)
        for i in range(len(x)):
            rows.append((
                t, x[i], cf.v[i], v_grid[i], cf.g[i], g_grid[i], pi_cf[i], pi_grid[i],
                abs(cf.v[i] - v_grid[i]), abs(cf.g[i] - g_grid[i]), abs(pi_cf[i] - pi_grid[i]),
            ))
    return rows


# ---------------------------------------------------------------------------
# mean-variance equivalence


@dataclass
class MeanVarReport:
    direct: mc.CostEstimate
    transformed: mc.CostEstimate
    combined_se: float

    @property
    def gap(self) -> float:
        return self.transformed.mean - self.direct.mean

    @property
    def gap_in_se(self) -> float:
        return self.gap / self.combined_se

    @property
    def passed(self) -> bool:
        return abs(self.gap) <= 3.0 * self.combined_se

    def lines(self) -> list[str]:
        return [
            f"direct_variance: {self.direct.mean:.17g} (se {self.direct.stderr:.6g})",
            f"transformed_cost: {self.transformed.mean:.17g} (se {self.transformed.stderr:.6g})",
            f"gap: {self.gap:.6g}",
            f"gap_in_combined_se: {self.gap_in_se:.4f}",
            f"status: {'PASS' if self.passed else 'FAIL'}",
        ]


def meanvar_equivalence(
    spec: ProblemSpec,
    x0: float,
    nt: int,
    paths: int,
    seed: int,
    degree: int = 3,
    workers: int = 1,
) -> MeanVarReport:
    """Var(X_T) computed directly and as E[int Z^2 ds] from the transformed cost.

    Both estimators run on the same paths; the combined standard error
    sqrt(se_1^2 + se_2^2) ignores their (positive) correlation and is
    therefore conservative.
    """
    if spec.gamma is None:
        raise ValueError("mean-variance check needs the gamma form of the problem")
    lo = float(spec.u_lower[0])
    policy = lambda t, x: np.full(np.shape(x), lo)  # noqa: E731  U is a single point
    ens = mc.simulate_forward(spec, policy, 0.0, x0, nt, paths, seed, workers=workers)
    direct = mc.variance_estimate(ens.X[:, -1, 0], seed)
    tilde = transform_gamma(spec)
    mc.backward_regression(tilde, ens, degree)
    transformed = mc.CostEstimate.from_samples(mc.path_costs(tilde, ens), seed)
    return MeanVarReport(direct, transformed, math.hypot(direct.stderr, transformed.stderr))

"""Extended HJB solver by policy iteration.

Each outer iteration freezes the current policy u_n, solves the auxiliary
equation for (g_n, z_n), then marches the value equation

    v_t + min_u { mu v_x + 1/2 sigma^2 v_xx + f(t, x, g_n, z_n, u) } = 0,  v(T) = G

by exhaustive search over a control grid.  The raw argmin is projected onto
the K-Lipschitz class slice by slice to give u_{n+1}.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CFLError, NonFiniteError
from .grid import (
    CFL_LIMIT,
    GridSpec,
    ScalarField,
    cfl_number,
    d1_upwind,
    generator,
    linear_backward,
    solve_g,
)
from .policy import LIP_SLACK, FeedbackPolicy
from .problem import ProblemSpec

log = logging.getLogger(__name__)

DEFAULT_CANDIDATES = 101


@dataclass(frozen=True)
class FieldPair:
    v: ScalarField
    g: ScalarField
    z: ScalarField
    u_star: FeedbackPolicy

    @property
    def grid(self) -> GridSpec:
        return self.v.grid


@dataclass
class SolveReport:
    iterations: int = 0
    policy_changes: list[float] = field(default_factory=list)
    value_changes: list[float] = field(default_factory=list)
    residuals: dict[str, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    converged: bool = False
    value_monotone: bool | None = None
    max_abs_dg: float = 0.0

    def lines(self, timings: bool = True) -> list[str]:
        out = [
            f"converged: {self.converged}",
            f"iterations: {self.iterations}",
            "iter,policy_change,value_change",
        ]
        for i, (du, dv) in enumerate(zip(self.policy_changes, self.value_changes), start=1):
            out.append(f"{i},{du:.17g},{dv:.17g}")
        out.append(f"value_monotone_decreasing: {self.value_monotone}")
        out.append(f"max_abs_dg: {self.max_abs_dg:.17g}")
        for k, v in self.residuals.items():
            out.append(f"residual_{k}: {v:.17g}")
        for k, v in (self.timings.items() if timings else ()):
            out.append(f"time_{k}_s: {v:.3f}")
        return out


def control_candidates(spec: ProblemSpec, count: int = DEFAULT_CANDIDATES) -> np.ndarray:
    """Uniform candidate grid over U (scalar controls)."""
    lo, hi = float(spec.u_lower[0]), float(spec.u_upper[0])
    if lo == hi:
        return np.array([lo])
    if count < 2:
        raise ValueError("need at least 2 control candidates for a nondegenerate U")
    return np.linspace(lo, hi, count)


def _sorted_candidates(candidates) -> np.ndarray:
    c = np.asarray(candidates, dtype=float)
    if c.size == 0:
        raise ValueError("candidate set is empty")
    if c.ndim == 1:
        return np.sort(c, kind="stable")
    order = np.lexsort(c.T[::-1])
    return c[order]


def _select(H: np.ndarray, cands: np.ndarray):
    """Row-wise argmin over axis 0 of H; the first (smallest) candidate wins ties."""
    idx = np.argmin(H, axis=0)
    hmin = np.take_along_axis(H, idx[None, ...], axis=0)[0]
    return cands[idx], hmin


def hamiltonian_argmin(t, x, dv1, dv2, g_val, z_val, spec: ProblemSpec, candidates):
    """Minimise mu v_x + 1/2 sigma^2 v_xx + f(t, x, g, z, u) over candidates.

    ``x`` may be an array; ``dv1`` may carry a leading candidate axis when the
    first derivative depends on the candidate (upwinding).  Returns
    ``(u_min, h_min)`` with ties resolved towards the smallest candidate
    (lexicographic order for vector controls).
    """
    cands = _sorted_candidates(candidates)
    x = np.asarray(x, dtype=float)
    if cands.ndim == 1:
        U = cands.reshape((-1,) + (1,) * x.ndim)
        mu = spec.mu(t, x, U)
        sig = spec.sigma(t, x, U)
        H = mu * dv1 + 0.5 * sig * sig * dv2 + spec.f(t, x, g_val, z_val, U)
        H = np.broadcast_to(H, (len(cands),) + np.broadcast_shapes(x.shape, np.shape(dv2)))
    else:
        rows = []
        for i, c in enumerate(cands):
            d1 = dv1[i] if np.ndim(dv1) > x.ndim else dv1
            mu = spec.mu(t, x, c)
            sig = spec.sigma(t, x, c)
            rows.append(mu * d1 + 0.5 * sig * sig * dv2 + spec.f(t, x, g_val, z_val, c))
        H = np.array(np.broadcast_arrays(*rows))
    return _select(H, cands)


def lipschitz_project(values, dx: float, K: float, lower: float = -np.inf, upper: float = np.inf):
    """Two-sweep projection of per-node controls onto |u_{i+1} - u_i| <= K dx.

    Works along the last axis (leading axes are independent slices).  A
    left-to-right sweep clamps each node into the band around its left
    neighbour, a right-to-left sweep does the same against the right
    neighbour, and the result is finally clipped into [lower, upper].
    Compliant slices are returned unchanged.
    """
    out = np.array(values, dtype=float, copy=True)
    if out.shape[-1] < 2:
        raise ValueError("slice needs at least 2 nodes")
    if K < 0:
        raise ValueError("K must be nonnegative")
    c = K * dx
    n = out.shape[-1]

    def fix(anchor, val):
        slack = LIP_SLACK * np.maximum(np.maximum(np.abs(anchor), np.abs(val)), max(c, 1.0))
        bad = np.abs(val - anchor) > c + slack
        return np.where(bad, np.clip(val, anchor - c, anchor + c), val)

    for i in range(n - 1):
        out[..., i + 1] = fix(out[..., i], out[..., i + 1])
    for i in range(n - 2, -1, -1):
        out[..., i] = fix(out[..., i + 1], out[..., i])
    return np.clip(out, lower, upper)


def _value_sweep(spec: ProblemSpec, grid: GridSpec, g: np.ndarray, z: np.ndarray, cands: np.ndarray, explicit_check=True):
    """One backward HJB relaxation with (y, z) frozen at the given fields."""
    x, t, dt, dx = grid.x, grid.t, grid.dt, grid.dx
    nt = grid.nt
    U = cands[:, None]
    shape = (len(cands), grid.nx)
    v = np.empty((nt + 1, grid.nx))
    raw = np.empty_like(v)

    def table(j, w):
        mu = np.broadcast_to(spec.mu(t[j], x, U), shape)
        sig = np.broadcast_to(spec.sigma(t[j], x, U), shape)
        if explicit_check and j < nt:
            c = cfl_number(mu, sig, dt, dx)
            if c > CFL_LIMIT:
                raise CFLError(f"CFL number {c:.4g} exceeds {CFL_LIMIT} in the value sweep at step {j}")
        jj = min(j + 1, nt)
        return generator(w, mu, sig, dx) + spec.f(t[j], x, g[jj], z[jj], U)

    v[nt] = np.broadcast_to(spec.g_terminal(x), x.shape)
    raw[nt], _ = _select(table(nt, v[nt]), cands)
    for j in range(nt - 1, -1, -1):
        u, hmin = _select(table(j, v[j + 1]), cands)
        v[j] = v[j + 1] + dt * hmin
        raw[j] = u
        bad = ~np.isfinite(v[j])
        if np.any(bad):
            raise NonFiniteError("non-finite value", (j, int(np.argmax(bad))))
    return v, raw


def policy_value(spec: ProblemSpec, policy: FeedbackPolicy, grid: GridSpec, g: ScalarField, z: ScalarField, scheme="explicit"):
    """Cost-to-go of a frozen policy with f's (y, z) read from (g, z)."""

    def source(j, tj, x, w_next, z_next, u):
        return spec.f(tj, x, g.values[j + 1], z.values[j + 1], u)

    w, _ = linear_backward(spec, policy, grid, spec.g_terminal(grid.x), source, scheme)
    return w


def solve_extended_hjb(
    spec: ProblemSpec,
    grid: GridSpec,
    u0: FeedbackPolicy | None = None,
    candidates=DEFAULT_CANDIDATES,
    tol: float = 1e-6,
    max_iter: int = 50,
    scheme: str = "explicit",
) -> tuple[FieldPair, SolveReport]:
    """Policy iteration for the coupled (v, g) system.

    Stops when both sup-norm changes (policy and value) are <= ``tol``.  On
    hitting ``max_iter`` the iterate with the smallest change is returned
    and ``report.converged`` is False.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    lo, hi = float(spec.u_lower[0]), float(spec.u_upper[0])
    if np.isscalar(candidates) or np.ndim(candidates) == 0:
        cands = control_candidates(spec, int(candidates))
    else:
        cands = _sorted_candidates(candidates)
    if np.any(cands < lo) or np.any(cands > hi):
        raise ValueError("control candidates must lie in U")
    K = spec.lipschitz_k
    if u0 is None:
        u0 = FeedbackPolicy.constant(grid.t, grid.x, float(spec.u_mid[0]), K, lo, hi)
    if u0.violations():
        raise ValueError(f"initial policy not admissible: {u0.violations()}")

    report = SolveReport()
    timer = {"g_solve": 0.0, "value_sweep": 0.0, "projection": 0.0}
    clock = time.perf_counter()
    u = u0
    g, z = solve_g(spec, u, grid, scheme)
    v_prev = policy_value(spec, u, grid, g, z, scheme)
    timer["g_solve"] += time.perf_counter() - clock

    best = None
    monotone = True
    for n in range(1, max_iter + 1):
        clock = time.perf_counter()
        v, raw = _value_sweep(spec, grid, g.values, z.values, cands)
        timer["value_sweep"] += time.perf_counter() - clock

        clock = time.perf_counter()
        new_vals = lipschitz_project(raw, grid.dx, K, lo, hi)
        u_next = FeedbackPolicy(grid.t, grid.x, new_vals, K, lo, hi)
        timer["projection"] += time.perf_counter() - clock

        du = float(np.max(np.abs(new_vals - _on_grid(u, grid))))
        dv = float(np.max(np.abs(v - v_prev)))
        monotone = monotone and bool(np.all(v <= v_prev + 1e-12 * np.maximum(1.0, np.abs(v_prev))))
        report.policy_changes.append(du)
        report.value_changes.append(dv)
        report.iterations = n
        log.info("outer %d: |du|=%.3e |dv|=%.3e", n, du, dv)

        score = max(du, dv)
        if best is None or score < best[0]:
            best = (score, v, u_next)
        u = u_next
        clock = time.perf_counter()
        g, z = solve_g(spec, u, grid, scheme)
        timer["g_solve"] += time.perf_counter() - clock
        if du <= tol and dv <= tol:
            report.converged = True
            break
        v_prev = v

    if not report.converged:
        _, v, u_best = best
        if u_best is not u:
            u = u_best
            g, z = solve_g(spec, u, grid, scheme)
    fields = FieldPair(ScalarField(grid, v), g, z, u)
    report.value_monotone = monotone
    report.max_abs_dg = float(np.max(np.abs(d1_upwind(g.values, 0.0, grid.dx))))
    clock = time.perf_counter()
    report.residuals = hjb_residuals(spec, fields, cands)
    timer["residuals"] = time.perf_counter() - clock
    report.timings = timer
    return fields, report


def _on_grid(policy: FeedbackPolicy, grid: GridSpec) -> np.ndarray:
    if policy.values.shape == (grid.nt + 1, grid.nx) and np.array_equal(policy.nodes, grid.x):
        return policy.values
    return np.array([policy(t, grid.x) for t in grid.t])


def hjb_residuals(
    spec: ProblemSpec,
    fields: FieldPair,
    candidates,
    fraction: float = 0.6,
    t_fraction: float = 0.9,
) -> dict[str, float]:
    """Residuals of both equations with centred stencils, independent of the marcher.

    Evaluated on interior slices with t <= t0 + t_fraction (T - t0) and on the
    central ``fraction`` of the window.  ``*_rel`` divide by max |v| (resp.
    max |g|) over the same region.
    """
    grid = fields.grid
    x, t, dt, dx = grid.x, grid.t, grid.dt, grid.dx
    cands = _sorted_candidates(candidates)
    U = cands[:, None]
    mask = grid.inner_mask(fraction)
    v, g, z = fields.v.values, fields.g.values, fields.z.values
    js = [j for j in range(1, grid.nt) if t[j] <= grid.t0 + t_fraction * (grid.T - grid.t0) + 1e-12]

    def cdiff(w):
        d1 = np.gradient(w, dx, axis=-1)
        d2 = np.empty_like(w)
        d2[..., 1:-1] = (w[..., :-2] - 2 * w[..., 1:-1] + w[..., 2:]) / dx**2
        d2[..., 0], d2[..., -1] = d2[..., 1], d2[..., -2]
        return d1, d2

    rv, rg = 0.0, 0.0
    for j in js:
        vt = (v[j + 1] - v[j - 1]) / (2 * dt)
        gt = (g[j + 1] - g[j - 1]) / (2 * dt)
        v1, v2 = cdiff(v[j])
        g1, g2 = cdiff(g[j])
        mu = spec.mu(t[j], x, U)
        sig = spec.sigma(t[j], x, U)
        H = mu * v1 + 0.5 * sig * sig * v2 + spec.f(t[j], x, g[j], z[j], U)
        res_v = vt + np.min(np.broadcast_to(H, (len(cands), grid.nx)), axis=0)
        u = fields.u_star(t[j], x)
        mus, sigs = spec.mu(t[j], x, u), spec.sigma(t[j], x, u)
        res_g = gt + mus * g1 + 0.5 * sigs * sigs * g2 + spec.h(t[j], x, g[j], sigs * g1, u)
        rv = max(rv, float(np.max(np.abs(res_v[mask]))))
        rg = max(rg, float(np.max(np.abs(res_g[mask]))))
    sl = np.array(js)
    vscale = float(np.max(np.abs(v[sl][:, mask]))) if js else 1.0
    gscale = float(np.max(np.abs(g[sl][:, mask]))) if js else 1.0
    return {
        "hjb_v": rv,
        "hjb_g": rg,
        "hjb_v_rel": rv / max(vscale, 1e-300),
        "hjb_g_rel": rg / max(gscale, 1e-300),
    }

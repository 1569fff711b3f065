"""Command-line front end.

    fbsde-hjb [--config PATH] [--out-dir PATH] [--seed N] [--threads N] COMMAND

Commands: ``solve``, ``simulate``, ``verify [--no-solve]``,
``bench {utility,meanvar,viscosity}``, ``check-dpp``.

Exit codes: 0 success, 1 usage/config/IO error, 2 policy iteration did not
converge, 3 a verification or benchmark check failed.

Seeds: every random draw derives from ``[mc] seed`` through
``mc.substream_seed(seed, purpose)`` with the purposes below, so commands do
not share streams.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, mc, verify
from .config import RunConfig, load_config
from .errors import ConfigError, ExpressionError, NonFiniteError, SingularSystemError
from .expr import parse_coefficient
from .grid import GridSpec, read_field_csv, write_field_csv
from .hjb import FieldPair, control_candidates, solve_extended_hjb
from .policy import FeedbackPolicy
from .problem import ProblemSpec, transform_gamma

log = logging.getLogger("fbsde_hjb")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3
SEED_SIMULATE, SEED_COST, SEED_DPP, SEED_MEANVAR = 0, 1, 2, 3
FIELD_FILES = ("v.csv", "g.csv", "z.csv", "u_star.csv")


class Run:
    """Resolved configuration plus the problem objects every command needs."""

    def __init__(self, cfg: RunConfig, threads: int):
        self.cfg = cfg
        self.workers = threads
        self.out = Path(cfg.output.dir)
        self.problem = cfg.build_problem()
        # the solver works with the gamma-free form
        self.spec = transform_gamma(self.problem) if self.problem.gamma is not None else self.problem
        p = cfg.problem
        self.t0, self.x0 = p.t0, p.x0

    def grid(self) -> GridSpec:
        lo, hi = self.cfg.window()
        try:
            return GridSpec(lo, hi, self.cfg.grid.nx, self.cfg.grid.nt, self.t0, self.cfg.problem.T)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def seed(self, purpose: int) -> int:
        return mc.substream_seed(self.cfg.mc.seed, purpose)

    def prepare_out(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.ini").write_text(self.cfg.to_ini())

    def write(self, name: str, lines: list[str]) -> None:
        (self.out / name).write_text("\n".join(lines) + "\n")


def _value_sign(spec: ProblemSpec) -> float:
    # maximisation problems are solved on negated rewards
    return -1.0 if spec.maximize else 1.0


def solve(run: Run):
    cfg = run.cfg.solver
    fields, report = solve_extended_hjb(
        run.spec, run.grid(), candidates=cfg.candidates, tol=cfg.tol, max_iter=cfg.max_iter, scheme=cfg.scheme
    )
    for k, v in report.timings.items():
        log.info("time %s: %.3f s", k, v)
    return fields, report


def write_fields(run: Run, fields: FieldPair) -> None:
    grid = fields.grid
    write_field_csv(run.out / "v.csv", grid, _value_sign(run.spec) * fields.v.values)
    write_field_csv(run.out / "g.csv", grid, fields.g.values)
    write_field_csv(run.out / "z.csv", grid, fields.z.values)
    write_field_csv(run.out / "u_star.csv", grid, fields.u_star.values)


def read_fields(run: Run) -> FieldPair:
    missing = [n for n in FIELD_FILES if not (run.out / n).is_file()]
    if missing:
        raise ConfigError(f"missing artifacts in {run.out}: {', '.join(missing)} (run solve first)")
    v, g, z, u = (read_field_csv(run.out / n) for n in FIELD_FILES)
    v = type(v)(v.grid, _value_sign(run.spec) * v.values)
    spec = run.spec
    policy = FeedbackPolicy(
        u.grid.t, u.grid.x, u.values, spec.lipschitz_k, float(spec.u_lower[0]), float(spec.u_upper[0])
    )
    return FieldPair(v, g, z, policy)


def solve_lines(run: Run, fields: FieldPair, report) -> list[str]:
    grid = fields.grid
    sign = _value_sign(run.spec)
    return [
        f"problem: {run.spec.name}",
        f"grid: x in [{grid.x_lo:.17g}, {grid.x_hi:.17g}], nx={grid.nx}, nt={grid.nt}, t0={grid.t0:.17g}, T={grid.T:.17g}",
        f"solver: scheme={run.cfg.solver.scheme}, candidates={run.cfg.solver.candidates}, "
        f"tol={run.cfg.solver.tol:.6g}, max_iter={run.cfg.solver.max_iter}",
        f"v(t0,x0): {sign * fields.v.at(run.t0, run.x0):.17g}",
        f"g(t0,x0): {fields.g.at(run.t0, run.x0):.17g}",
        f"u_star(t0,x0): {float(fields.u_star(run.t0, run.x0)):.17g}",
    ] + report.lines(timings=False)


# ---------------------------------------------------------------------------
# commands


def cmd_solve(run: Run, args) -> int:
    fields, report = solve(run)
    write_fields(run, fields)
    run.write("report.txt", solve_lines(run, fields, report))
    print(f"converged: {report.converged} after {report.iterations} iterations; artifacts in {run.out}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def _simulation_policy(run: Run):
    choice = run.cfg.mc.policy.strip()
    spec = run.problem
    lo, hi = float(spec.u_lower[0]), float(spec.u_upper[0])
    if choice == "solve":
        fields, report = solve(run)
        if not report.converged:
            log.warning("policy iteration did not converge; simulating the best iterate")
        return fields.u_star
    if choice == "auto":
        if spec.name == "utility":
            return bench.closed_form_policy(run.cfg.utility_params(), run.grid(), spec)
        mid = float(spec.u_mid[0])
        return lambda t, x: np.full(np.shape(x), mid)
    coef = parse_coefficient(choice, ["t", "x"])
    return lambda t, x: np.clip(coef(t, x), lo, hi)


def cmd_simulate(run: Run, args) -> int:
    m = run.cfg.mc
    policy = _simulation_policy(run)
    ens = mc.simulate_forward(
        run.problem, policy, run.t0, run.x0, m.steps, m.paths, run.seed(SEED_SIMULATE), workers=run.workers
    )
    mc.backward_regression(run.problem, ens, m.degree)
    ens.write_summary_csv(run.out / "summary.csv")
    if m.write_paths:
        ens.write_paths_csv(run.out / "paths.csv")
    # the gamma-free form has the same h and Phi, so (Y, Z) carry over
    cost = mc.CostEstimate.from_samples(mc.path_costs(run.spec, ens), ens.seed)
    sign = _value_sign(run.spec)
    lines = [
        f"problem: {run.spec.name}",
        f"paths: {ens.paths}",
        f"steps: {ens.nt}",
        f"seed: {ens.seed}",
        f"Y0: {float(np.mean(ens.Y[:, 0])):.17g}",
        f"cost_mean: {sign * cost.mean:.17g}",
        f"cost_stderr: {cost.stderr:.17g}",
        f"regression_warnings: {len(ens.warnings)}",
    ] + [f"  {w}" for w in ens.warnings]
    run.write("simulate_report.txt", lines)
    print(f"cost {sign * cost.mean:.6g} +- {cost.stderr:.2g}; summary in {run.out / 'summary.csv'}")
    return EXIT_OK


def _obtain_fields(run: Run, no_solve: bool):
    if no_solve:
        return read_fields(run), None
    fields, report = solve(run)
    write_fields(run, fields)
    run.write("report.txt", solve_lines(run, fields, report))
    return fields, report


def _dpp_split(run: Run) -> float:
    s = run.cfg.verify.dpp_split
    return 0.5 * (run.t0 + run.cfg.problem.T) if s is None else s


def cmd_verify(run: Run, args) -> int:
    fields, report = _obtain_fields(run, args.no_solve)
    cfg, m = run.cfg.verify, run.cfg.mc
    cands = control_candidates(run.spec, run.cfg.solver.candidates)
    ens = verify.optimal_ensemble(
        run.spec, fields, run.t0, run.x0, m.steps, m.paths, run.seed(SEED_COST), m.degree, run.workers
    )
    checks = [
        verify.residual_check(run.spec, fields, cands, cfg.residual_tol),
        verify.cost_check(run.spec, fields, run.t0, run.x0, m.steps, m.paths, ens.seed, cfg.cost_rel_tol, ensemble=ens),
        verify.dpp_check(
            run.spec, fields, run.t0, run.x0, _dpp_split(run), cfg.shifts, cfg.dpp_paths,
            run.seed(SEED_DPP), cfg.dpp_rel_tol, run.workers,
        )[0],
        verify.z_identity_check(
            run.spec, fields, run.t0, run.x0, m.steps, m.paths, ens.seed, cfg.z_rel_tol, ensemble=ens
        ),
    ]
    lines = []
    if run.spec.maximize:
        lines.append("note: values below are in minimisation form (rewards negated)")
    if report is not None and not report.converged:
        lines.append("note: policy iteration did not converge; checks use the best iterate")
    for c in checks:
        lines.append(c.line())
        lines += [f"  {d}" for d in c.detail]
    passed = all(c.passed for c in checks)
    lines.append(f"overall: {'PASS' if passed else 'FAIL'}")
    run.write("verify_report.txt", lines)
    for c in checks:
        print(c.line())
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_check_dpp(run: Run, args) -> int:
    fields, _ = _obtain_fields(run, args.no_solve)
    cfg = run.cfg.verify
    result, _ = verify.dpp_check(
        run.spec, fields, run.t0, run.x0, _dpp_split(run), cfg.shifts, cfg.dpp_paths,
        run.seed(SEED_DPP), cfg.dpp_rel_tol, run.workers,
    )
    run.write("dpp_report.txt", [result.line()] + result.detail)
    print(result.line())
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def bench_utility(run: Run) -> int:
    if run.problem.name != "utility":
        raise ConfigError("bench utility needs [problem] builtin = utility")
    params = run.cfg.utility_params()
    fields, report = solve(run)
    write_fields(run, fields)
    run.write("report.txt", solve_lines(run, fields, report))
    cmp = verify.utility_comparison(params, run.spec, fields, run.cfg.solver.candidates, scheme=run.cfg.solver.scheme)
    with open(run.out / "benchmark.csv", "w", newline="\n") as fh:
        fh.write(verify.BENCHMARK_HEADER + "\n")
        for row in verify.benchmark_rows(params, fields):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    gaps = cmp.ode_gaps
    lines = [c.line() for c in cmp.checks] + [
        f"ode_gap_{k}: {gaps[k]:.6g}" for k in ("A", "B", "C", "D")
    ] + [
        f"closed_form_B_vs_ode: {gaps['B_closed_vs_ode']:.6g}",
        f"D_integral_form_vs_ode: {gaps['D_integral_form_gap']:.6g} (sign slip in the integral form; ODE taken as authoritative)",
        f"converged: {report.converged}",
        f"overall: {'PASS' if cmp.passed else 'FAIL'}",
    ]
    run.write("benchmark_report.txt", lines)
    print("\n".join(lines))
    if not report.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK if cmp.passed else EXIT_CHECK_FAILED


def bench_meanvar(run: Run) -> int:
    b, m = run.cfg.benchmark, run.cfg.mc
    spec = bench.meanvar_problem(drift=b.drift, sigma=b.sigma, T=run.cfg.problem.T)
    rep = verify.meanvar_equivalence(spec, run.x0, m.steps, m.paths, run.seed(SEED_MEANVAR), m.degree, run.workers)
    run.write("meanvar_report.txt", rep.lines())
    print("\n".join(rep.lines()))
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def bench_viscosity(run: Run) -> int:
    rep = bench.check_example51()
    run.write("viscosity_report.txt", rep.lines())
    print("\n".join(rep.lines()))
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def cmd_bench(run: Run, args) -> int:
    return {"utility": bench_utility, "meanvar": bench_meanvar, "viscosity": bench_viscosity}[args.which](run)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI run configuration")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="artifact directory (overrides [output] dir)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides [mc] seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="fbsde-hjb", parents=[common], description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="policy iteration; writes v/g/z/u_star CSVs and report.txt")
    sub.add_parser("simulate", parents=[common], help="Monte Carlo paths and regression; writes summary.csv")
    p = sub.add_parser("verify", parents=[common], help="residual, cost, DPP and z-identity checks")
    p.add_argument("--no-solve", action="store_true", help="use artifacts already in the output directory")
    p = sub.add_parser("check-dpp", parents=[common], help="dynamic programming consistency check")
    p.add_argument("--no-solve", action="store_true", help="use artifacts already in the output directory")
    p = sub.add_parser("bench", parents=[common], help="reference benchmarks")
    p.add_argument("which", choices=("utility", "meanvar", "viscosity"))
    return parser


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "check-dpp": cmd_check_dpp,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config) if hasattr(args, "config") else RunConfig()
        cfg = cfg.with_overrides(seed=getattr(args, "seed", None), out_dir=getattr(args, "out_dir", None))
        threads = getattr(args, "threads", 1)
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = Run(cfg, threads)
        run.prepare_out()
        return COMMANDS[args.command](run, args)
    except (ConfigError, ExpressionError, NonFiniteError, SingularSystemError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

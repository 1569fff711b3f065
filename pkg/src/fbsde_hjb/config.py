"""INI run configuration for the command-line front end.

Sections and keys (all optional; defaults run the portfolio benchmark)::

    [problem]   builtin = utility | meanvar | custom, T, t0, x0,
                mu, sigma, h, f, phi, G, gamma, gamma_y, gamma_yy   (custom only)
                u_lower, u_upper, lipschitz_k
    [benchmark] r, mu, sigma, gamma, drift
    [grid]      x_lo, x_hi (or "auto"), nx, nt
    [mc]        paths, steps, seed, degree, policy, write_paths
    [solver]    tol, max_iter, candidates, scheme
    [verify]    residual_tol, cost_rel_tol, dpp_rel_tol, z_rel_tol, dpp_paths,
                dpp_split, perturbations
    [output]    dir

Unknown sections or keys are errors.  ``RunConfig.to_ini`` writes every key
with its effective value, so a run can be repeated from the echo.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench
from .errors import ConfigError
from .problem import ProblemSpec, from_expressions

BUILTINS = ("utility", "meanvar", "custom")
COEFFICIENT_KEYS = ("mu", "sigma", "h", "f", "phi", "G", "gamma", "gamma_y", "gamma_yy")


@dataclass
class ProblemSection:
    builtin: str = "utility"
    T: float = 1.0
    t0: float = 0.0
    x0: float = 1.0
    u_lower: float | None = None
    u_upper: float | None = None
    lipschitz_k: float | None = None
    mu: str = ""
    sigma: str = ""
    h: str = "0"
    f: str = "0"
    phi: str = "x"
    G: str = "0"
    gamma: str = ""
    gamma_y: str = ""
    gamma_yy: str = ""


@dataclass
class BenchmarkSection:
    r: float = 0.05
    mu: float = 0.1
    sigma: float = 0.2
    gamma: float = 1.0
    drift: float = 0.0


@dataclass
class GridSection:
    x_lo: float | None = None
    x_hi: float | None = None
    nx: int = 201
    nt: int = 800


@dataclass
class MCSection:
    paths: int = 100_000
    steps: int = 256
    seed: int = 0
    degree: int = 3
    policy: str = "auto"
    write_paths: bool = False


@dataclass
class SolverSection:
    tol: float = 1e-6
    max_iter: int = 50
    candidates: int = 101
    scheme: str = "explicit"


@dataclass
class VerifySection:
    residual_tol: float = 5e-3
    cost_rel_tol: float = 0.02
    dpp_rel_tol: float = 0.01
    z_rel_tol: float = 0.05
    dpp_paths: int = 50_000
    dpp_split: float | None = None
    perturbations: str = "-0.4,-0.2,-0.1,-0.05,0.05,0.1,0.2,0.4"

    @property
    def shifts(self) -> list[float]:
        return [float(s) for s in self.perturbations.split(",") if s.strip()]


@dataclass
class OutputSection:
    dir: str = "out"


SECTIONS = {
    "problem": ProblemSection,
    "benchmark": BenchmarkSection,
    "grid": GridSection,
    "mc": MCSection,
    "solver": SolverSection,
    "verify": VerifySection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    problem: ProblemSection = field(default_factory=ProblemSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    grid: GridSection = field(default_factory=GridSection)
    mc: MCSection = field(default_factory=MCSection)
    solver: SolverSection = field(default_factory=SolverSection)
    verify: VerifySection = field(default_factory=VerifySection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        self.validate()

    # -- building blocks ---------------------------------------------------

    def utility_params(self) -> bench.UtilityParams:
        b = self.benchmark
        return bench.UtilityParams(r=b.r, mu=b.mu, sigma=b.sigma, gamma=b.gamma, T=self.problem.T)

    def build_problem(self) -> ProblemSpec:
        """The problem as stated; a gamma term, if any, is still attached."""
        p = self.problem
        if p.builtin == "utility":
            return bench.utility_problem(
                self.utility_params(),
                pi_max=_or(p.u_upper, 2.5),
                pi_min=_or(p.u_lower, 0.0),
                lipschitz_k=_or(p.lipschitz_k, 1.0),
            )
        if p.builtin == "meanvar":
            return bench.meanvar_problem(drift=self.benchmark.drift, sigma=self.benchmark.sigma, T=p.T)
        return from_expressions(
            mu=p.mu,
            sigma=p.sigma,
            h=p.h,
            f=p.f,
            phi=p.phi,
            g_terminal=p.G,
            T=p.T,
            u_lower=_or(p.u_lower, 0.0),
            u_upper=_or(p.u_upper, 0.0),
            lipschitz_k=_or(p.lipschitz_k, 1.0),
            gamma=p.gamma or None,
            gamma_y=p.gamma_y or None,
            gamma_yy=p.gamma_yy or None,
        )

    def window(self) -> tuple[float, float]:
        g, p = self.grid, self.problem
        if g.x_lo is not None and g.x_hi is not None:
            return g.x_lo, g.x_hi
        if p.builtin == "utility":
            lo, hi = bench.utility_window(self.utility_params(), p.x0, _or(p.u_upper, 2.5))
        elif p.builtin == "meanvar":
            half = 6.0 * self.benchmark.sigma * math.sqrt(p.T) * math.exp(abs(self.benchmark.drift) * p.T)
            lo, hi = p.x0 - half, p.x0 + half
        else:
            raise ConfigError("[grid] x_lo and x_hi are required for a custom problem")
        return (_or(g.x_lo, lo), _or(g.x_hi, hi))

    # -- validation and IO -------------------------------------------------

    def validate(self) -> None:
        p = self.problem
        if p.builtin not in BUILTINS:
            raise ConfigError(f"[problem] builtin must be one of {', '.join(BUILTINS)}, got {p.builtin!r}")
        if p.builtin == "custom":
            for key in ("mu", "sigma"):
                if not getattr(p, key):
                    raise ConfigError(f"[problem] {key} is required for a custom problem")
        else:
            given = [k for k in COEFFICIENT_KEYS if getattr(p, k) != getattr(ProblemSection, k)]
            if given:
                raise ConfigError(f"[problem] coefficient keys {given} only apply to builtin = custom")
        _positive("problem", "T", p.T)
        if not 0.0 <= p.t0 < p.T:
            raise ConfigError("[problem] need 0 <= t0 < T")
        if p.lipschitz_k is not None and p.lipschitz_k < 0:
            raise ConfigError("[problem] lipschitz_k must be >= 0")
        if p.u_lower is not None and p.u_upper is not None and p.u_lower > p.u_upper:
            raise ConfigError("[problem] u_lower must be <= u_upper")
        b = self.benchmark
        _positive("benchmark", "sigma", b.sigma)
        _positive("benchmark", "gamma", b.gamma)
        if p.builtin == "utility":
            _positive("benchmark", "r", b.r)
        g = self.grid
        for key in ("nx", "nt"):
            _positive("grid", key, getattr(g, key))
        if g.nx < 3:
            raise ConfigError(f"grid too small: nx={g.nx} (need >= 3)")
        if g.x_lo is not None and g.x_hi is not None and g.x_lo >= g.x_hi:
            raise ConfigError("[grid] x_lo must be < x_hi")
        m = self.mc
        for key in ("paths", "steps", "degree"):
            _positive("mc", key, getattr(m, key))
        if m.seed < 0:
            raise ConfigError("[mc] seed must be >= 0")
        s = self.solver
        _positive("solver", "max_iter", s.max_iter)
        _positive("solver", "candidates", s.candidates)
        if s.tol < 0:
            raise ConfigError("[solver] tol must be >= 0")
        if s.scheme not in ("explicit", "implicit"):
            raise ConfigError(f"[solver] scheme must be explicit or implicit, got {s.scheme!r}")
        v = self.verify
        for key in ("residual_tol", "cost_rel_tol", "dpp_rel_tol", "z_rel_tol"):
            if getattr(v, key) < 0:
                raise ConfigError(f"[verify] {key} must be >= 0")
        _positive("verify", "dpp_paths", v.dpp_paths)
        if v.dpp_split is not None and not p.t0 < v.dpp_split < p.T:
            raise ConfigError("[verify] dpp_split must lie strictly between t0 and T")
        try:
            v.shifts
        except ValueError as exc:
            raise ConfigError(f"[verify] perturbations: {exc}") from None

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(SECTIONS[name]):
                value = getattr(getattr(self, name), f.name)
                if name == "grid" and f.name in ("x_lo", "x_hi") and value is None:
                    try:
                        value = self.window()[0 if f.name == "x_lo" else 1]
                    except ConfigError:
                        value = None
                lines.append(f"{f.name} = {_fmt(value)}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "RunConfig":
        cfg = dataclasses.replace(self)
        if seed is not None:
            cfg.mc = dataclasses.replace(self.mc, seed=seed)
        if out_dir is not None:
            cfg.output = dataclasses.replace(self.output, dir=str(out_dir))
        cfg.validate()
        return cfg


def _or(value, default):
    return default if value is None else value


def _positive(section: str, key: str, value) -> None:
    if not value > 0:
        raise ConfigError(f"[{section}] {key} must be positive, got {value}")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(section: str, f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    raw = raw.strip()
    try:
        if kind.startswith("float"):
            if raw in ("", "auto") and "None" in kind:
                return None
            value = float(raw)
            if not np.isfinite(value):
                raise ValueError("not finite")
            return value
        if kind == "int":
            return int(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected true/false")
    except ValueError as exc:
        raise ConfigError(f"[{section}] {f.name}: cannot read {raw!r} ({exc})") from None
    return raw


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case (G vs g)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[name])}
        values = {}
        for key, raw in parser.items(name):
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            values[key] = _convert(name, fields[key], raw)
        sections[name] = SECTIONS[name](**values)
    return RunConfig(**sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)

"""Problem definition for FBSDE-cost control problems.

A :class:`ProblemSpec` bundles the forward coefficients ``mu(t, x, u)``,
``sigma(t, x, u)``, the BSDE driver ``h(t, x, y, z, u)`` with terminal value
``phi(x)``, and the cost pieces ``f(t, x, y, z, u)`` and ``g_terminal(x)``.
All coefficient callables must accept numpy arrays and broadcast.

Shape convention: a dimension of size 1 carries no trailing axis (state,
noise and control are plain arrays when ``n = m = k = 1``); otherwise the
argument has a trailing axis of that size and ``sigma`` returns ``(..., n, m)``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import parse_coefficient

log = logging.getLogger(__name__)

GAMMA_FD_STEP = 1e-5


@dataclass(frozen=True)
class GammaTerm:
    """Nonlinear function of the initial BSDE value added to the cost."""

    fn: Callable
    dy: Callable | None = None
    dyy: Callable | None = None

    def first(self, y):
        if self.dy is not None:
            return self.dy(y)
        e = GAMMA_FD_STEP
        return (self.fn(y + e) - self.fn(y - e)) / (2 * e)

    def second(self, y):
        if self.dyy is not None:
            return self.dyy(y)
        e = GAMMA_FD_STEP
        return (self.fn(y + e) - 2.0 * self.fn(y) + self.fn(y - e)) / (e * e)


@dataclass(frozen=True)
class ProblemSpec:
    mu: Callable
    sigma: Callable
    h: Callable
    f: Callable
    phi: Callable
    g_terminal: Callable
    T: float
    u_lower: Sequence[float] | float
    u_upper: Sequence[float] | float
    lipschitz_k: float = 1.0
    n: int = 1
    m: int = 1
    k: int = 1
    gamma: GammaTerm | None = None
    name: str = "custom"
    # True when f and g_terminal are negated rewards; reported values flip sign.
    maximize: bool = False
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        for name in ("n", "m", "k"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"dimension {name} must be >= 1")
        lo = np.atleast_1d(np.asarray(self.u_lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.u_upper, dtype=float))
        if lo.shape != (self.k,) or hi.shape != (self.k,):
            raise ValueError(f"control bounds must have {self.k} entries")
        if np.any(lo > hi):
            raise ValueError("control box is empty (lower > upper)")
        if self.lipschitz_k < 0:
            raise ValueError("Lipschitz constant K must be nonnegative")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)

    @property
    def u_mid(self) -> np.ndarray:
        return 0.5 * (self.u_lower + self.u_upper)

    def clip_control(self, u):
        if self.k == 1:
            return np.clip(u, self.u_lower[0], self.u_upper[0])
        return np.clip(u, self.u_lower, self.u_upper)

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)


def from_expressions(
    *,
    mu: str,
    sigma: str,
    h: str,
    f: str,
    phi: str,
    g_terminal: str,
    T: float,
    u_lower: float,
    u_upper: float,
    lipschitz_k: float = 1.0,
    gamma: str | None = None,
    gamma_y: str | None = None,
    gamma_yy: str | None = None,
    name: str = "custom",
) -> ProblemSpec:
    """Build a scalar (n = m = k = 1) problem from expression strings."""
    fwd = ["t", "x", "u"]
    bwd = ["t", "x", "y", "z", "u"]
    g_term = None
    if gamma is not None:
        g_term = GammaTerm(
            parse_coefficient(gamma, ["y"]),
            parse_coefficient(gamma_y, ["y"]) if gamma_y else None,
            parse_coefficient(gamma_yy, ["y"]) if gamma_yy else None,
        )
    elif gamma_y or gamma_yy:
        raise ValueError("gamma derivatives given without gamma")
    return ProblemSpec(
        mu=parse_coefficient(mu, fwd),
        sigma=parse_coefficient(sigma, fwd),
        h=parse_coefficient(h, bwd),
        f=parse_coefficient(f, bwd),
        phi=parse_coefficient(phi, ["x"]),
        g_terminal=parse_coefficient(g_terminal, ["x"]),
        T=float(T),
        u_lower=u_lower,
        u_upper=u_upper,
        lipschitz_k=float(lipschitz_k),
        gamma=g_term,
        name=name,
    )


def _zz(z, m: int):
    z = np.asarray(z, dtype=float)
    return z * z if m == 1 else np.sum(z * z, axis=-1)


def transform_gamma(spec: ProblemSpec) -> ProblemSpec:
    """Fold ``gamma(Y_t)`` into the running and terminal costs.

    f~ = f + h * gamma'(y) - 1/2 |z|^2 gamma''(y),   G~ = G + gamma(phi(x)).
    """
    if spec.gamma is None:
        raise ValueError("transform_gamma requires a problem with a gamma term")
    gam, f, h, G, phi, m = spec.gamma, spec.f, spec.h, spec.g_terminal, spec.phi, spec.m

    def f_tilde(t, x, y, z, u):
        return f(t, x, y, z, u) + h(t, x, y, z, u) * gam.first(y) - 0.5 * _zz(z, m) * gam.second(y)

    def g_tilde(x):
        return G(x) + gam.fn(phi(x))

    return spec.replace(f=f_tilde, g_terminal=g_tilde, gamma=None)


# ---------------------------------------------------------------------------
# sampled assumption checks

SAMPLE_BLOCK = 1024


@dataclass
class AssumptionReport:
    lipschitz: dict[str, float]
    growth: dict[str, float]
    total_variation: dict[float, float]
    sup_u_at_zero: float | None
    passes: dict[str, bool]
    budget: int
    seed: int

    @property
    def all_pass(self) -> bool:
        return all(self.passes.values())


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _draw_block(spec: ProblemSpec, rng: np.random.Generator, size: int, box: float):
    """Two input points per sample plus a mode selecting which inputs differ."""
    n, m, k = spec.n, spec.m, spec.k

    def vec(dim, lo, hi):
        shape = (size,) if dim == 1 else (size, dim)
        return rng.uniform(lo, hi, size=shape)

    lo_u = spec.u_lower if k > 1 else spec.u_lower[0]
    hi_u = spec.u_upper if k > 1 else spec.u_upper[0]
    t = rng.uniform(0.0, spec.T, size=size)
    p1 = dict(x=vec(n, -box, box), y=rng.uniform(-box, box, size), z=vec(m, -box, box), u=vec(k, lo_u, hi_u))
    p2 = dict(x=vec(n, -box, box), y=rng.uniform(-box, box, size), z=vec(m, -box, box), u=vec(k, lo_u, hi_u))
    # mode 0 varies everything, mode j varies only the j-th input group
    mode = rng.integers(0, 5, size=size)
    for j, key in enumerate(("x", "y", "z", "u"), start=1):
        keep = mode != j
        keep_mask = keep if p1[key].ndim == 1 else keep[:, None]
        p2[key] = np.where(keep_mask & (mode != 0), p1[key], p2[key])
    return t, p1, p2


def _norm(a):
    a = np.asarray(a, dtype=float)
    if a.ndim <= 1:
        return np.abs(a)
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def _lead(a, size: int) -> np.ndarray:
    """Give a coefficient output a leading sample axis (constants come back as scalars)."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.shape[0] != size:
        a = np.broadcast_to(a, (size,) + a.shape)
    return a


def _block_stats(spec: ProblemSpec, block: int, size: int, seed: int, box: float):
    rng = _block_rng(seed, block)
    t, p1, p2 = _draw_block(spec, rng, size, box)
    dist = {k_: _norm(p1[k_] - p2[k_]) for k_ in ("x", "y", "z", "u")}
    with np.errstate(all="ignore"):
        evals = {
            "mu": (spec.mu(t, p1["x"], p1["u"]), spec.mu(t, p2["x"], p2["u"]), ("x", "u")),
            "sigma": (spec.sigma(t, p1["x"], p1["u"]), spec.sigma(t, p2["x"], p2["u"]), ("x", "u")),
            "h": (
                spec.h(t, p1["x"], p1["y"], p1["z"], p1["u"]),
                spec.h(t, p2["x"], p2["y"], p2["z"], p2["u"]),
                ("x", "y", "z", "u"),
            ),
            "phi": (spec.phi(p1["x"]), spec.phi(p2["x"]), ("x",)),
        }
        lip, grow = {}, {}
        for name, (a, b, deps) in evals.items():
            a, b = _lead(a, size), _lead(b, size)
            d = sum(dist[k_] for k_ in deps)
            diff = _norm(a - b)
            ok = d > 0
            lip[name] = float(np.max(diff[ok] / d[ok])) if np.any(ok) else 0.0
            denom = 1.0 + _norm(p1["x"]) + (_norm(p1["u"]) if "u" in deps else 0.0)
            grow[name] = float(np.max(_norm(a) / denom))
    return lip, grow


def check_assumptions(
    spec: ProblemSpec,
    budget: int = 10_000,
    seed: int = 0,
    *,
    c: float | dict[str, float] = 10.0,
    box: float = 10.0,
    policy=None,
    tv_points: int = 21,
    workers: int = 1,
) -> AssumptionReport:
    """Sample difference quotients and growth ratios on a bounded box.

    Samples are generated in fixed blocks of ``SAMPLE_BLOCK`` pairs, each
    from its own counter-derived stream, so the report does not depend on
    ``workers``.  ``c`` is the pass threshold, either one number or a dict
    with keys ``lipschitz``, ``growth`` and ``tv``.
    """
    if budget < 100:
        raise ValueError("sample budget must be at least 100")
    consts = {"lipschitz": c, "growth": c, "tv": c} if not isinstance(c, dict) else dict(c)
    sizes = [min(SAMPLE_BLOCK, budget - b * SAMPLE_BLOCK) for b in range(-(-budget // SAMPLE_BLOCK))]
    jobs = list(enumerate(sizes))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda j: _block_stats(spec, j[0], j[1], seed, box), jobs))
    else:
        results = [_block_stats(spec, b, s, seed, box) for b, s in jobs]

    names = ("mu", "sigma", "h", "phi")
    lip = {nm: max(r[0][nm] for r in results) for nm in names}
    grow = {nm: max(r[1][nm] for r in results) for nm in names}
    passes = {f"lipschitz_{nm}": lip[nm] <= consts["lipschitz"] for nm in names}
    passes.update({f"growth_{nm}": grow[nm] <= consts["growth"] for nm in names})

    tv: dict[float, float] = {}
    sup0 = None
    if policy is not None:
        xs = np.linspace(-box, box, tv_points)
        lo, hi = policy.nodes[0], policy.nodes[-1]
        xs = np.clip(xs, lo, hi)
        vals = np.array([policy(t, xs) for t in policy.times])
        var = np.sum(np.abs(np.diff(vals, axis=0)), axis=0)
        tv = {float(x): float(v) for x, v in zip(xs, var)}
        sup0 = float(np.max(np.abs([policy(t, np.clip(0.0, lo, hi)) for t in policy.times])))
        passes["total_variation"] = bool(
            all(v + sup0 <= consts["tv"] * (1.0 + abs(x)) for x, v in tv.items())
        )
    return AssumptionReport(lip, grow, tv, sup0, passes, budget, seed)

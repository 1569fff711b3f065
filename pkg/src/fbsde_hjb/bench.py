"""Reference problems with known answers.

* Exponential-utility portfolio problem: wealth dW = [rW + (mu - r) pi] dt +
  sigma pi dB, reward E[int f(Y) ds + U(W_T)] with f = U = -exp(-gamma x)/gamma
  and Y_s = E[W_T | F_s].  Closed forms for v, g and the optimal dollar
  holding pi*.
* Dynamic mean-variance instance: Var(X_T) written as a gamma-cost.
* A 1-D counterexample showing that the classical viscosity definition breaks
  when the running cost depends on the gradient of the auxiliary function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .grid import GridSpec
from .policy import FeedbackPolicy
from .problem import GammaTerm, ProblemSpec


@dataclass(frozen=True)
class UtilityParams:
    r: float = 0.05
    mu: float = 0.1
    sigma: float = 0.2
    gamma: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not math.isfinite(self.beta):
            raise ValueError("market price of risk is not finite")

    @property
    def beta(self) -> float:
        return (self.mu - self.r) / self.sigma


@dataclass(frozen=True)
class ClosedForm:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    v: np.ndarray
    g: np.ndarray
    pi_star: np.ndarray


def _b_integral(beta2: float, tau):
    """int_t^T exp(beta^2 (t + s - 2T)/2) ds with tau = T - t.

    The antiderivative in s gives (2/beta^2) [e^{-beta^2 tau/2} - e^{-beta^2 tau}]
    = -(2/beta^2) e^{a} expm1(a) with a = -beta^2 tau / 2; at beta = 0 the
    integral is tau.
    """
    tau = np.asarray(tau, dtype=float)
    if beta2 == 0.0:
        return tau
    a = -0.5 * beta2 * tau
    return -(2.0 / beta2) * np.exp(a) * np.expm1(a)


def closed_form(params: UtilityParams, t, x) -> ClosedForm:
    """Value (as a reward), auxiliary field and optimal holding at (t, x)."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    T = params.T
    if np.any(t < -1e-12) or np.any(t > T + 1e-12):
        raise ValueError(f"t must lie in [0, {T}]")
    b2 = params.beta**2
    tau = T - t
    C = np.exp(params.r * tau)
    A = -params.gamma * C
    B = np.exp(-0.5 * b2 * tau) + _b_integral(b2, tau)
    D = b2 * tau / params.gamma
    v = -(1.0 / params.gamma) * np.exp(A * x) * B
    g = C * x + D
    pi = (params.mu - params.r) * np.exp(-params.r * tau) / (params.gamma * params.sigma**2)
    pi = np.broadcast_to(pi, np.broadcast_shapes(t.shape, x.shape)).copy()
    return ClosedForm(A, B, C, D, v, g, pi)


@dataclass(frozen=True)
class OdeSolution:
    t: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray


def integrate_odes(params: UtilityParams, steps: int = 1000) -> OdeSolution:
    """Classical RK4 backward from T for

        C' = -r C,          C(T) = 1
        D' = beta^2 C / A,  D(T) = 0,   with A = -gamma C
        B' = beta^2 B / 2 - exp(-gamma D),  B(T) = 1
    """
    if steps < 10:
        raise ValueError("steps must be >= 10")
    r, gam, b2 = params.r, params.gamma, params.beta**2

    def rhs(y):
        B, C, D = y
        A = -gam * C
        return np.array([0.5 * b2 * B - math.exp(-gam * D), -r * C, b2 * C / A])

    h = -params.T / steps
    ys = np.empty((steps + 1, 3))
    ys[0] = (1.0, 1.0, 0.0)
    for i in range(steps):
        y = ys[i]
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        ys[i + 1] = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    ys = ys[::-1]
    t = params.T * np.arange(steps + 1) / steps
    B, C, D = ys[:, 0], ys[:, 1], ys[:, 2]
    return OdeSolution(t, -gam * C, B, C, D)


def ode_crosscheck(params: UtilityParams, steps: int = 1000) -> dict[str, float]:
    """Max pointwise gaps between RK4 and the closed forms.

    Also compares two alternative representations: the integral
    form of D, ``int_t^T beta^2 C / A ds``, which has the opposite sign of
    the solution of its own ODE, and the closed-form B against the ODE solution.
    """
    ode = integrate_odes(params, steps)
    cf = closed_form(params, ode.t, 0.0)
    out = {k: float(np.max(np.abs(getattr(ode, k) - getattr(cf, k)))) for k in "ABCD"}
    d_integral_form = -(params.beta**2) * (params.T - ode.t) / params.gamma
    out["D_integral_form_gap"] = float(np.max(np.abs(d_integral_form - ode.D)))
    out["B_closed_vs_ode"] = out["B"]
    return out


def utility_problem(
    params: UtilityParams = UtilityParams(),
    pi_max: float = 2.5,
    pi_min: float = 0.0,
    lipschitz_k: float = 1.0,
) -> ProblemSpec:
    """The portfolio problem as a cost minimisation (rewards negated)."""
    r, mu, sig, gam = params.r, params.mu, params.sigma, params.gamma

    def drift(t, x, u):
        return r * x + (mu - r) * u

    def vol(t, x, u):
        return sig * np.broadcast_to(u, np.broadcast_shapes(np.shape(x), np.shape(u)))

    def driver(t, x, y, z, u):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(z), np.shape(u)))

    def running(t, x, y, z, u):
        val = np.exp(-gam * np.asarray(y, dtype=float)) / gam
        return np.broadcast_to(val, np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(z), np.shape(u)))

    def terminal(x):
        return np.exp(-gam * np.asarray(x, dtype=float)) / gam

    def identity(x):
        return np.array(x, dtype=float)

    return ProblemSpec(
        mu=drift,
        sigma=vol,
        h=driver,
        f=running,
        phi=identity,
        g_terminal=terminal,
        T=params.T,
        u_lower=pi_min,
        u_upper=pi_max,
        lipschitz_k=lipschitz_k,
        name="utility",
        maximize=True,
        params={"r": r, "mu": mu, "sigma": sig, "gamma": gam},
    )


def utility_window(params: UtilityParams, x0: float, pi_max: float, width: float = 6.0) -> tuple[float, float]:
    half = width * params.sigma * math.sqrt(params.T) * pi_max
    return x0 - half, x0 + half


def closed_form_policy(params: UtilityParams, grid: GridSpec, spec: ProblemSpec) -> FeedbackPolicy:
    def pi(t, x):
        return closed_form(params, t, x).pi_star

    return FeedbackPolicy.from_function(
        grid.t, grid.x, pi, spec.lipschitz_k, float(spec.u_lower[0]), float(spec.u_upper[0])
    )


def meanvar_problem(drift: float = 0.0, sigma: float = 0.2, T: float = 1.0) -> ProblemSpec:
    """dX = drift X dt + sigma dB, cost Var(X_T) written as G = x^2, gamma(y) = -y^2."""

    def zeros(t, x, y, z, u):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(z), np.shape(u)))

    return ProblemSpec(
        mu=lambda t, x, u: drift * np.asarray(x, dtype=float) + 0.0 * np.asarray(u, dtype=float),
        sigma=lambda t, x, u: np.full(np.broadcast_shapes(np.shape(x), np.shape(u)), sigma),
        h=zeros,
        f=zeros,
        phi=lambda x: np.array(x, dtype=float),
        g_terminal=lambda x: np.asarray(x, dtype=float) ** 2,
        T=T,
        u_lower=0.0,
        u_upper=0.0,
        lipschitz_k=0.0,
        gamma=GammaTerm(
            fn=lambda y: -np.asarray(y, dtype=float) ** 2,
            dy=lambda y: -2.0 * np.asarray(y, dtype=float),
            dyy=lambda y: np.full(np.shape(y), -2.0),
        ),
        name="meanvar",
        params={"drift": drift, "sigma": sigma},
    )


# ---------------------------------------------------------------------------
# viscosity counterexample


@dataclass(frozen=True)
class PiecewiseLinear1D:
    breakpoints: tuple
    values: tuple

    def __post_init__(self):
        if len(self.breakpoints) != len(self.values) or len(self.breakpoints) < 2:
            raise ValueError("need matching breakpoints and values (at least 2)")
        if any(b <= a for a, b in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    @property
    def slopes(self) -> list:
        xs, vs = self.breakpoints, self.values
        exact = all(isinstance(a, (int, Fraction)) for a in (*xs, *vs))
        div = (lambda a, b: Fraction(a) / Fraction(b)) if exact else (lambda a, b: a / b)
        return [div(vs[i + 1] - vs[i], xs[i + 1] - xs[i]) for i in range(len(xs) - 1)]

    def __call__(self, x):
        xs, vs = self.breakpoints, self.values
        if x < xs[0] or x > xs[-1]:
            raise ValueError(f"x={x} outside [{xs[0]}, {xs[-1]}]")
        for i in range(len(xs) - 1):
            if x <= xs[i + 1]:
                return vs[i] + self.slopes[i] * (x - xs[i])
        return vs[-1]


@dataclass(frozen=True)
class SubDiff:
    """Derivative ranges of C^1 test functions touching from above / below.

    ``None`` means no test function touches from that side.
    """

    above: tuple | None
    below: tuple | None


def subdiff_interval(func: PiecewiseLinear1D, x) -> SubDiff:
    xs = func.breakpoints
    if x < xs[0] or x > xs[-1]:
        raise ValueError(f"x={x} outside [{xs[0]}, {xs[-1]}]")
    slopes = func.slopes
    if x in xs[1:-1]:
        i = list(xs).index(x)
        a, b = slopes[i - 1], slopes[i]
        if a == b:
            return SubDiff((a, a), (a, a))
        above = (b, a) if b <= a else None
        below = (a, b) if a <= b else None
        return SubDiff(above, below)
    if x == xs[0]:
        s = slopes[0]
    elif x == xs[-1]:
        s = slopes[-1]
    else:
        i = next(i for i in range(len(xs) - 1) if xs[i] < x < xs[i + 1])
        s = slopes[i]
    return SubDiff((s, s), (s, s))


def _exact(value):
    # integral fractions print and compare as plain ints
    if isinstance(value, Fraction) and value.denominator == 1:
        return int(value)
    return value


def _sample(interval, count: int = 9):
    lo, hi = interval
    if lo == hi:
        return [lo]
    return [lo + (hi - lo) * Fraction(i, count - 1) for i in range(count)]


V_TILDE = PiecewiseLinear1D((0, 1, 2), (0, 1, 0))
U_TILDE = PiecewiseLinear1D((0, 1, 2), (2, 3, 0))


def eikonal(p):
    """Second equation of the example: 1 - |v'|."""
    return 1 - abs(p)


def coupled_operator(p, q):
    """First equation of the example: 2 - |u'| - v'."""
    return 2 - abs(p) - q


@dataclass
class Example51Report:
    v_tilde_viscosity: bool
    v_tilde_smooth_values: dict
    kink_above_u: tuple
    kink_above_v: tuple
    contradiction: dict
    u_tilde_fails: bool

    @property
    def passed(self) -> bool:
        vals = set(self.contradiction.values())
        return self.v_tilde_viscosity and self.u_tilde_fails and {-2, 2} <= vals

    def lines(self) -> list[str]:
        out = [f"v_tilde viscosity solution of 1-|v'|=0: {self.v_tilde_viscosity}"]
        for x, val in self.v_tilde_smooth_values.items():
            out.append(f"  smooth point x={x}: 1-|v'| = {val}")
        out.append(f"super-differential of u_tilde at x=1: [{self.kink_above_u[0]}, {self.kink_above_u[1]}]")
        out.append(f"super-differential of v_tilde at x=1: [{self.kink_above_v[0]}, {self.kink_above_v[1]}]")
        for (p, q), val in self.contradiction.items():
            out.append(f"  2-|p|-q at (p,q)=({p},{q}) = {val}")
        out.append(f"u_tilde fails the classical definition: {self.u_tilde_fails}")
        out.append(f"status: {'PASS' if self.passed else 'FAIL'}")
        return out


def check_example51() -> Example51Report:
    """Viscosity checks at the kink x = 1 with exact rational arithmetic.

    Sign convention: sub-solution needs operator >= 0 for test functions from
    above, super-solution needs operator <= 0 for test functions from below.
    """
    ok = True
    smooth = {}
    for x in (Fraction(1, 2), Fraction(3, 2)):
        sd = subdiff_interval(V_TILDE, x)
        val = eikonal(sd.above[0])
        smooth[str(x)] = val
        ok &= val == 0
    sd = subdiff_interval(V_TILDE, 1)
    if sd.above is not None:
        ok &= all(eikonal(p) >= 0 for p in _sample(sd.above))
    if sd.below is not None:
        ok &= all(eikonal(p) <= 0 for p in _sample(sd.below))

    above_u = subdiff_interval(U_TILDE, 1).above
    above_v = sd.above
    pairs = [(_exact(above_u[0]), _exact(above_v[1])), (0, 0)]
    values = {pq: _exact(coupled_operator(*pq)) for pq in pairs}
    fails = any(val < 0 for val in values.values()) and any(val > 0 for val in values.values())
    return Example51Report(bool(ok), smooth, above_u, above_v, values, fails)

"""1-D grids, finite-difference stencils and the backward linear solve for g.

Under a frozen feedback policy the auxiliary field solves the semilinear
parabolic equation

    g_t + mu* g_x + 1/2 sigma*^2 g_xx + h(t, x, g, sigma* g_x, u*) = 0,  g(T) = phi,

which is marched backward in time.  The state is truncated to
``[x_lo, x_hi]``; boundary nodes take one-sided first differences and copy
the curvature of the adjacent interior node.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, solve_banded

from .errors import CFLError, NonFiniteError, SingularSystemError
from .policy import FeedbackPolicy, uniform_weights
from .problem import ProblemSpec

log = logging.getLogger(__name__)

CFL_LIMIT = 0.9


@dataclass(frozen=True)
class GridSpec:
    x_lo: float
    x_hi: float
    nx: int
    nt: int
    t0: float
    T: float

    def __post_init__(self):
        if self.nx < 3:
            raise ValueError(f"grid too small: nx={self.nx} (need >= 3)")
        if self.nt < 1:
            raise ValueError(f"nt must be >= 1, got {self.nt}")
        if not self.x_lo < self.x_hi:
            raise ValueError("x_lo must be < x_hi")
        if not 0.0 <= self.t0 < self.T:
            raise ValueError("need 0 <= t0 < T")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.nx - 1)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.nt

    @property
    def x(self) -> np.ndarray:
        return self.x_lo + np.arange(self.nx) * self.dx

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(self.nt + 1) * self.dt

    def inner_mask(self, fraction: float = 0.6) -> np.ndarray:
        """Nodes inside the central ``fraction`` of the spatial window."""
        mid = 0.5 * (self.x_lo + self.x_hi)
        half = 0.5 * fraction * (self.x_hi - self.x_lo)
        x = self.x
        return (x >= mid - half - 1e-12) & (x <= mid + half + 1e-12)


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        shape = (self.grid.nt + 1, self.grid.nx)
        if vals.shape != shape:
            raise ValueError(f"field shape {vals.shape} != {shape}")
        object.__setattr__(self, "values", vals)

    def at(self, t: float, x):
        """Linear in t between slices, linear in x clamped to the window."""
        g = self.grid
        s = (t - g.t0) / g.dt
        j = int(np.clip(np.floor(s), 0, g.nt - 1))
        w = float(np.clip(s - j, 0.0, 1.0))
        i, a = uniform_weights(x, g.x_lo, g.dx, g.nx)
        lo = (1.0 - a) * self.values[j][i] + a * self.values[j][i + 1]
        if w > 0.0:
            hi = (1.0 - a) * self.values[j + 1][i] + a * self.values[j + 1][i + 1]
            lo = (1.0 - w) * lo + w * hi
        return float(lo) if np.ndim(lo) == 0 else lo

    def to_csv(self, path) -> None:
        write_field_csv(path, self.grid, self.values)


def d1_upwind(w, drift, dx: float):
    """Upwind first derivative along the last axis.

    Forward difference where ``drift >= 0``, backward where negative; the
    first node is always forward and the last always backward.  ``drift``
    broadcasts against ``w``.
    """
    w = np.asarray(w, dtype=float)
    diffs = np.diff(w, axis=-1) / dx
    fwd = np.concatenate([diffs, diffs[..., -1:]], axis=-1)
    bwd = np.concatenate([diffs[..., :1], diffs], axis=-1)
    return np.where(np.asarray(drift) >= 0, fwd, bwd)


def d2_central(w, dx: float):
    """Central second difference; boundary nodes copy their interior neighbour."""
    w = np.asarray(w, dtype=float)
    inner = (w[..., :-2] - 2.0 * w[..., 1:-1] + w[..., 2:]) / (dx * dx)
    return np.concatenate([inner[..., :1], inner, inner[..., -1:]], axis=-1)


def generator(w, mu, sig, dx: float):
    """mu * w_x + 1/2 sig^2 * w_xx with the solver's stencils."""
    return mu * d1_upwind(w, mu, dx) + 0.5 * sig * sig * d2_central(w, dx)


def cfl_number(mu, sig, dt: float, dx: float) -> float:
    return float(np.max(sig * sig * dt / (dx * dx) + np.abs(mu) * dt / dx))


def _check_scalar(spec: ProblemSpec):
    if (spec.n, spec.m, spec.k) != (1, 1, 1):
        raise ValueError("the grid solver handles n = m = k = 1 only")


def _implicit_matrix(mu, sig, dt: float, dx: float) -> np.ndarray:
    """Banded storage (2 sub, 2 super diagonals) of I - dt * L."""
    nx = len(mu)
    ab = np.zeros((5, nx))
    rows, cols, vals = [], [], []
    i = np.arange(nx)
    fwd = mu >= 0
    fwd[0], fwd[-1] = True, False
    # first derivative
    c1 = mu / dx
    left = np.where(fwd, i, i - 1)
    rows += [i, i]
    cols += [left, left + 1]
    vals += [-c1, c1]
    # second derivative (boundary rows borrow the neighbour's stencil)
    r = np.clip(i, 1, nx - 2)
    c2 = 0.5 * sig * sig / (dx * dx)
    rows += [i, i, i]
    cols += [r - 1, r, r + 1]
    vals += [c2, -2.0 * c2, c2]
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    vals = -dt * np.concatenate(vals)
    np.add.at(ab, (2 + rows - cols, cols), vals)
    ab[2] += 1.0
    return ab


def linear_backward(
    spec: ProblemSpec,
    policy: FeedbackPolicy,
    grid: GridSpec,
    terminal,
    source,
    scheme: str = "explicit",
) -> tuple[np.ndarray, np.ndarray]:
    """March w_t + mu* w_x + 1/2 sigma*^2 w_xx + source = 0 backward from ``terminal``.

    ``source(j, t_j, x, w_next, z_next, u_j)`` is evaluated with the slice
    j + 1 values (explicit lag).  Returns ``(w, z)`` with z = sigma* w_x.
    """
    _check_scalar(spec)
    if scheme not in ("explicit", "implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if policy.times[0] > grid.t0 + 1e-12 or policy.times[-1] < grid.T - 1e-12:
        raise ValueError("policy does not cover the grid's time range")
    x, t, dt, dx = grid.x, grid.t, grid.dt, grid.dx
    nt = grid.nt
    w = np.empty((nt + 1, grid.nx))
    z = np.empty_like(w)

    def coefs(j):
        u = policy(t[j], x)
        mu = np.broadcast_to(spec.mu(t[j], x, u), x.shape)
        sig = np.broadcast_to(spec.sigma(t[j], x, u), x.shape)
        return u, mu, sig

    w[nt] = np.broadcast_to(terminal, x.shape)
    _check_finite(w[nt], nt, "terminal value")
    _, mu, sig = coefs(nt)
    z[nt] = sig * d1_upwind(w[nt], mu, dx)
    for j in range(nt - 1, -1, -1):
        u, mu, sig = coefs(j)
        src = source(j, t[j], x, w[j + 1], z[j + 1], u)
        if scheme == "explicit":
            c = cfl_number(mu, sig, dt, dx)
            if c > CFL_LIMIT:
                raise CFLError(
                    f"CFL number {c:.4g} exceeds {CFL_LIMIT} at step {j}; "
                    "refine nt or use scheme='implicit'"
                )
            w[j] = w[j + 1] + dt * (generator(w[j + 1], mu, sig, dx) + src)
        else:
            rhs = w[j + 1] + dt * src
            try:
                w[j] = solve_banded((2, 2), _implicit_matrix(mu, sig, dt, dx), rhs)
            except (LinAlgError, ValueError) as exc:
                raise SingularSystemError(f"implicit system singular at step {j}: {exc}") from exc
        _check_finite(w[j], j, "solution")
        z[j] = sig * d1_upwind(w[j], mu, dx)
        _check_finite(z[j], j, "z")
    return w, z


def solve_g(
    spec: ProblemSpec,
    policy: FeedbackPolicy,
    grid: GridSpec,
    scheme: str = "explicit",
) -> tuple[ScalarField, ScalarField]:
    """Backward march for g and z = sigma* g_x under a frozen policy.

    The driver h is lagged: step j uses (g, z) from slice j + 1.
    ``scheme="implicit"`` treats the advection-diffusion part with backward
    Euler (one banded solve per step); the explicit scheme enforces the CFL
    bound ``sigma^2 dt/dx^2 + |mu| dt/dx <= 0.9``.
    """

    def source(j, tj, x, g_next, z_next, u):
        return spec.h(tj, x, g_next, z_next, u)

    g, z = linear_backward(spec, policy, grid, spec.phi(grid.x), source, scheme)
    return ScalarField(grid, g), ScalarField(grid, z)


def _check_finite(row, j: int, what: str):
    bad = ~np.isfinite(row)
    if np.any(bad):
        raise NonFiniteError(f"non-finite {what}", (j, int(np.argmax(bad))))


# ---------------------------------------------------------------------------
# CSV


def write_field_csv(path, grid: GridSpec, values) -> None:
    tt, xx = np.meshgrid(grid.t, grid.x, indexing="ij")
    data = np.column_stack([tt.ravel(), xx.ravel(), np.asarray(values, dtype=float).ravel()])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header="t,x,value", comments="", newline="\n")


def read_field_csv(path) -> ScalarField:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
    if header != "t,x,value":
        raise ValueError(f"{path}: unexpected header {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ts = np.unique(data[:, 0])
    xs = np.unique(data[:, 1])
    if len(ts) * len(xs) != len(data):
        raise ValueError(f"{path}: rows do not form a full grid")
    grid = GridSpec(float(xs[0]), float(xs[-1]), len(xs), len(ts) - 1, float(ts[0]), float(ts[-1]))
    return ScalarField(grid, data[:, 2].reshape(len(ts), len(xs)))

"""Monte Carlo for the controlled FBSDE.

Forward paths use Euler-Maruyama under a feedback policy.  The backward
pair (Y, Z) comes from least-squares regression on polynomials of X_k,
or is read off solved grid fields.  Random numbers are drawn per block of
``PATH_BLOCK`` paths from a stream keyed by ``(seed, block)``, so any split of
the blocks across workers reproduces the same ensemble.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NonFiniteError
from .grid import ScalarField
from .problem import ProblemSpec

log = logging.getLogger(__name__)

PATH_BLOCK = 4096
RIDGE = 1e-10


def substream_seed(seed: int, purpose: int) -> int:
    """Independent seed for one use of a run seed (simulate, cost check, DPP, ...)."""
    return int(np.random.SeedSequence([seed, purpose]).generate_state(1, dtype=np.uint64)[0] >> 1)


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


@dataclass
class PathEnsemble:
    times: np.ndarray
    X: np.ndarray  # (P, nt+1, n)
    dB: np.ndarray  # (P, nt, m)
    controls: np.ndarray  # (P, nt, k)
    seed: int
    Y: np.ndarray | None = None  # (P, nt+1)
    Z: np.ndarray | None = None  # (P, nt, m)
    warnings: list[str] = field(default_factory=list)

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    @property
    def nt(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return (self.times[-1] - self.times[0]) / self.nt

    def summary_rows(self) -> list[tuple]:
        rows = []
        for k, t in enumerate(self.times):
            x = self.X[:, k, 0]
            my = float(np.mean(self.Y[:, k])) if self.Y is not None else math.nan
            if self.Z is not None and k < self.nt:
                mz = float(np.mean(self.Z[:, k, 0]))
            else:
                mz = math.nan
            rows.append((k, float(t), float(np.mean(x)), float(np.std(x, ddof=1)) if self.paths > 1 else 0.0, my, mz))
        return rows

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("k,t,mean_X,std_X,mean_Y,mean_Z\n")
            for k, *vals in self.summary_rows():
                fh.write(f"{k}," + ",".join(f"{v:.17g}" for v in vals) + "\n")

    def write_paths_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("path,k,t,x,y,z,u\n")
            for p in range(self.paths):
                for k, t in enumerate(self.times):
                    y = self.Y[p, k] if self.Y is not None else math.nan
                    z = self.Z[p, k, 0] if self.Z is not None and k < self.nt else math.nan
                    u = self.controls[p, k, 0] if k < self.nt else math.nan
                    fh.write(f"{p},{k},{t:.17g},{self.X[p, k, 0]:.17g},{y:.17g},{z:.17g},{u:.17g}\n")


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    paths: int
    seed: int

    @classmethod
    def from_samples(cls, samples, seed: int) -> "CostEstimate":
        s = np.asarray(samples, dtype=float)
        se = float(np.std(s, ddof=1) / math.sqrt(len(s))) if len(s) > 1 else math.inf
        return cls(float(np.mean(s)), se, len(s), seed)


def _state_arg(x: np.ndarray, n: int):
    return x[:, 0] if n == 1 else x


def _as_control(u, size: int, k: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.broadcast_to(u, (size,) if k == 1 else (size, k)).reshape(size, k)


def _simulate_block(spec, policy, x0, times, dt, dB, first_path):
    """March one block; arrays are time-major, dB has shape (nt, size, m)."""
    nt, size, m = dB.shape
    n, k = spec.n, spec.k
    X = np.empty((nt + 1, size, n))
    U = np.empty((nt, size, k))
    X[0] = x0
    for j in range(nt):
        x = X[j]
        xa = _state_arg(x, n)
        u = _as_control(policy(times[j], xa), size, k)
        ua = u[:, 0] if k == 1 else u
        mu = np.broadcast_to(spec.mu(times[j], xa, ua), (size,) if n == 1 else (size, n)).reshape(size, n)
        sig = spec.sigma(times[j], xa, ua)
        if n == 1 and m == 1:
            noise = np.broadcast_to(sig, (size,)).reshape(size, 1) * dB[j]
        else:
            sig = np.broadcast_to(sig, (size, n, m))
            noise = np.einsum("pnm,pm->pn", sig, dB[j])
        X[j + 1] = x + mu * dt + noise
        U[j] = u
        bad = ~np.isfinite(X[j + 1]).all(axis=1)
        if np.any(bad):
            raise NonFiniteError("non-finite state", (first_path + int(np.argmax(bad)), j + 1))
    return X, U


def simulate_forward(
    spec: ProblemSpec,
    policy,
    t0: float,
    x0,
    nt: int,
    paths: int,
    seed: int,
    t_end: float | None = None,
    workers: int = 1,
) -> PathEnsemble:
    """Euler-Maruyama paths of dX = mu dt + sigma dB under u(t, X_t).

    ``policy`` is any callable ``(t, x) -> u``; a :class:`FeedbackPolicy`
    clamps x to its node range.  ``t_end`` defaults to the horizon.
    """
    if paths < 1 or nt < 1:
        raise ValueError("need paths >= 1 and nt >= 1")
    t_end = spec.T if t_end is None else float(t_end)
    if not t0 < t_end:
        raise ValueError("need t0 < t_end")
    dt = (t_end - t0) / nt
    times = t0 + np.arange(nt + 1) * dt
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (spec.n,))
    blocks = [(b, b * PATH_BLOCK, min(paths, (b + 1) * PATH_BLOCK)) for b in range(-(-paths // PATH_BLOCK))]
    sq = math.sqrt(dt)

    def run(block):
        b, lo, hi = block
        # drawn path-major so a path's increments do not depend on the block size
        dB = block_rng(seed, b).standard_normal((hi - lo, nt, spec.m)) * sq
        dB = np.ascontiguousarray(dB.transpose(1, 0, 2))
        X, U = _simulate_block(spec, policy, x0, times, dt, dB, lo)
        return X, dB, U

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    # stored time-major; the public arrays are path-major views
    X = np.concatenate([p[0] for p in parts], axis=1)
    dB = np.concatenate([p[1] for p in parts], axis=1)
    U = np.concatenate([p[2] for p in parts], axis=1)
    return PathEnsemble(times, _path_major(X), _path_major(dB), _path_major(U), seed)


def _path_major(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, 0, 1)


def _basis(x: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= ``degree`` in the standardised state."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    s = (x - mean) / np.where(std > 0, std, 1.0)
    cols = [np.ones(len(x))]
    n = x.shape[1]
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), d):
            cols.append(np.prod(s[:, combo], axis=1))
    return np.column_stack(cols)


class _Projector:
    """Least-squares projection onto the column span of a design matrix.

    Normal equations with a Cholesky solve; the standardised monomial basis
    keeps the Gram matrix well conditioned.  A numerically singular Gram
    (e.g. every path at the same state) switches to ridge.
    """

    def __init__(self, A: np.ndarray, step: int, warnings: list[str]):
        self.A = A
        gram = A.T @ A
        d = np.sqrt(np.diag(gram))
        scale = np.where(d > 0, d, 1.0)
        eig = np.linalg.eigvalsh(gram / np.outer(scale, scale))
        rank = int(np.sum(eig > eig.max() * 1e-12))
        if rank < A.shape[1]:
            warnings.append(f"step {step}: rank-deficient regression (rank {rank} < {A.shape[1]}), ridge {RIDGE:g}")
            gram = gram + RIDGE * np.eye(A.shape[1])
        self.factor = cho_factor(gram)

    def __call__(self, b: np.ndarray) -> np.ndarray:
        return self.A @ cho_solve(self.factor, self.A.T @ b)


def backward_regression(spec: ProblemSpec, ensemble: PathEnsemble, degree: int = 3) -> PathEnsemble:
    """Fill Y and Z by regression, explicit in the driver.

        Z_k = E^[(Y_{k+1} - E^[Y_{k+1} | X_k]) dB_k | X_k] / dt
        Y_k = E^[Y_{k+1} | X_k] + h(t_k, X_k, E^[Y_{k+1} | X_k], Z_k, u_k) dt

    Subtracting the conditional mean before multiplying by dB_k leaves the
    target unchanged (E[c(X_k) dB_k | X_k] = 0) and removes most of the
    variance of the Z estimator.
    """
    if degree < 1:
        raise ValueError("basis degree must be >= 1")
    ens = ensemble
    P, nt, n, m, k = ens.paths, ens.nt, spec.n, spec.m, spec.k
    dt = ens.dt
    Y = np.empty((nt + 1, P)).T
    Z = _path_major(np.empty((nt, P, m)))
    Y[:, nt] = np.broadcast_to(spec.phi(_state_arg(ens.X[:, nt, :], n)), (P,))
    ens.warnings.clear()
    for j in range(nt - 1, -1, -1):
        x = ens.X[:, j, :]
        proj = _Projector(_basis(x, degree), j, ens.warnings)
        y_next = Y[:, j + 1]
        y_hat = proj(y_next)
        resid = y_next - y_hat
        for c in range(m):
            Z[:, j, c] = proj(resid * ens.dB[:, j, c]) / dt
        u = ens.controls[:, j, :]
        ua = u[:, 0] if k == 1 else u
        za = Z[:, j, 0] if m == 1 else Z[:, j, :]
        drv = spec.h(ens.times[j], _state_arg(x, n), y_hat, za, ua)
        Y[:, j] = y_hat + np.broadcast_to(drv, (P,)) * dt
    if ens.warnings:
        log.debug("%d rank-deficient regression steps", len(ens.warnings))
    ens.Y, ens.Z = Y, Z
    return ens


def fill_from_fields(ensemble: PathEnsemble, g: ScalarField, z: ScalarField) -> PathEnsemble:
    """Read (Y, Z) along paths from grid fields (scalar state and noise only)."""
    ens = ensemble
    if ens.X.shape[2] != 1 or ens.dB.shape[2] != 1:
        raise ValueError("grid fields cover scalar state and noise only")
    grid = g.grid
    if grid.t0 > ens.times[0] + 1e-12 or grid.T < ens.times[-1] - 1e-12:
        raise ValueError("fields do not cover the simulation time range")
    ens.Y = np.stack([g.at(t, ens.X[:, j, 0]) for j, t in enumerate(ens.times)]).T
    ens.Z = _path_major(np.stack([z.at(t, ens.X[:, j, 0]) for j, t in enumerate(ens.times[:-1])])[:, :, None])
    return ens


def path_costs(spec: ProblemSpec, ensemble: PathEnsemble, terminal=None) -> np.ndarray:
    """Left-rectangle running cost plus terminal value, per path."""
    ens = ensemble
    if ens.Y is None or ens.Z is None:
        raise ValueError("ensemble has no (Y, Z); run backward_regression or fill_from_fields")
    n, m, k, P = spec.n, spec.m, spec.k, ens.paths
    total = np.zeros(P)
    for j in range(ens.nt):
        xa = _state_arg(ens.X[:, j, :], n)
        za = ens.Z[:, j, 0] if m == 1 else ens.Z[:, j, :]
        ua = ens.controls[:, j, 0] if k == 1 else ens.controls[:, j, :]
        total += np.broadcast_to(spec.f(ens.times[j], xa, ens.Y[:, j], za, ua), (P,)) * ens.dt
    xN = _state_arg(ens.X[:, -1, :], n)
    end = spec.g_terminal(xN) if terminal is None else terminal(xN)
    return total + np.broadcast_to(end, (P,))


def estimate_cost(
    spec: ProblemSpec,
    policy,
    t0: float,
    x0,
    nt: int,
    paths: int,
    seed: int,
    source: str = "regression",
    fields=None,
    degree: int = 3,
    workers: int = 1,
) -> CostEstimate:
    """Monte Carlo estimate of J(t0, x0; u) with its standard error.

    ``source="regression"`` computes (Y, Z) by :func:`backward_regression`;
    ``source="fields"`` reads them from ``fields`` (a ``(g, z)`` pair or an
    object with ``.g`` and ``.z``).
    """
    ens = simulate_forward(spec, policy, t0, x0, nt, paths, seed, workers=workers)
    if source == "regression":
        backward_regression(spec, ens, degree)
    elif source == "fields":
        if fields is None:
            raise ValueError("source='fields' needs fields")
        g, z = (fields.g, fields.z) if hasattr(fields, "g") else fields
        fill_from_fields(ens, g, z)
    else:
        raise ValueError(f"unknown source {source!r}")
    return CostEstimate.from_samples(path_costs(spec, ens), seed)


def variance_estimate(samples, seed: int) -> CostEstimate:
    """Sample variance with the standard error of the squared deviations."""
    s = np.asarray(samples, dtype=float)
    dev2 = (s - s.mean()) ** 2
    P = len(s)
    return CostEstimate(float(dev2.sum() / (P - 1)), float(np.std(dev2, ddof=1) / math.sqrt(P)), P, seed)


@dataclass
class DPPReport:
    lhs: float
    rhs: list[CostEstimate]
    min_index: int
    gap: float
    dt: float
    dx: float

    @property
    def min_rhs(self) -> CostEstimate:
        return self.rhs[self.min_index]

    @property
    def gap_se(self) -> float:
        return self.min_rhs.stderr

    @property
    def discretization_ratio(self) -> float:
        """|gap| / (dt + dx^2): the constant the gap would need in a C (dt + dx^2) bound."""
        return abs(self.gap) / (self.dt + self.dx**2)

    def lines(self) -> list[str]:
        out = [f"lhs v(t0,x0): {self.lhs:.17g}", "candidate,rhs_mean,rhs_stderr"]
        for i, r in enumerate(self.rhs):
            out.append(f"{i},{r.mean:.17g},{r.stderr:.17g}")
        out.append(f"min_candidate: {self.min_index}")
        out.append(f"gap: {self.gap:.17g}")
        out.append(f"gap_in_se: {self.gap / self.gap_se if self.gap_se > 0 else math.nan:.6g}")
        out.append(f"gap_over_dt_plus_dx2: {self.discretization_ratio:.6g}")
        return out


def check_dpp(
    spec: ProblemSpec,
    solved,
    t0: float,
    x0: float,
    s: float,
    candidates,
    paths: int,
    seed: int,
    nt: int | None = None,
    workers: int = 1,
) -> DPPReport:
    """Compare v(t0, x0) with E[int_t0^s f dr + v(s, X_s)] for first-stage policies.

    Along each first-stage path (Y, Z) are read from the solved g and z
    fields.  All candidates share the seed, so their rhs estimates use
    common random numbers.
    """
    if not t0 < s < spec.T:
        raise ValueError(f"split s={s} must lie strictly inside ({t0}, {spec.T})")
    grid = solved.grid
    if nt is None:
        nt = max(1, int(round((s - t0) / grid.dt)))
    lhs = float(solved.v.at(t0, x0))
    rhs = []
    for policy in candidates:
        ens = simulate_forward(spec, policy, t0, x0, nt, paths, seed, t_end=s, workers=workers)
        fill_from_fields(ens, solved.g, solved.z)
        costs = path_costs(spec, ens, terminal=lambda x: solved.v.at(s, x))
        rhs.append(CostEstimate.from_samples(costs, seed))
    i = int(np.argmin([r.mean for r in rhs]))
    return DPPReport(lhs, rhs, i, rhs[i].mean - lhs, grid.dt, grid.dx)


def z_identity_gap(spec: ProblemSpec, ensemble: PathEnsemble, fields, fraction: float = 0.6) -> tuple[float, float]:
    """Mean |Z_regression - sigma* g_x| over paths inside the inner window.

    Returns ``(mean_abs_deviation, scale)`` with scale the mean |sigma* g_x|
    over the same points.
    """
    ens = ensemble
    grid = fields.grid
    mid = 0.5 * (grid.x_lo + grid.x_hi)
    half = 0.5 * fraction * (grid.x_hi - grid.x_lo)
    dev, mag, count = 0.0, 0.0, 0
    for j in range(ens.nt):
        x = ens.X[:, j, 0]
        inside = np.abs(x - mid) <= half
        if not np.any(inside):
            continue
        ref = fields.z.at(ens.times[j], x[inside])
        dev += float(np.sum(np.abs(ens.Z[inside, j, 0] - ref)))
        mag += float(np.sum(np.abs(ref)))
        count += int(np.sum(inside))
    if count == 0:
        raise ValueError("no path points inside the inner window")
    return dev / count, mag / count

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative slack for Lipschitz checks; clipping to a +- K*dx band can overshoot by an ulp.
LIP_SLACK = 1e-12


def uniform_weights(x, x_lo: float, dx: float, nx: int):
    """Cell index and weight for linear interpolation on a uniform node set.

    Queries outside the nodes are clamped, matching ``np.interp``.  Much
    faster than ``np.interp`` on unsorted queries.
    """
    s = np.clip((np.asarray(x, dtype=float) - x_lo) / dx, 0.0, nx - 1)
    # snap queries that sit on a node up to rounding, so node values come back exactly
    r = np.rint(s)
    s = np.where(np.abs(s - r) <= 1e-9, r, s)
    i = np.minimum(s.astype(np.intp), nx - 2)
    return i, s - i


def _is_uniform(nodes: np.ndarray) -> bool:
    d = np.diff(nodes)
    return bool(np.all(np.abs(d - d[0]) <= 1e-9 * d[0]))


@dataclass(frozen=True)
class FeedbackPolicy:
    """Markov control u(t, x) sampled on a time x space grid.

    Evaluation is linear in x (clamped to the node range) and right-continuous
    piecewise constant in t: on ``[times[j], times[j+1])`` slice ``j`` applies.
    """

    times: np.ndarray
    nodes: np.ndarray
    values: np.ndarray
    lipschitz_k: float
    lower: float
    upper: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        nodes = np.asarray(self.nodes, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or np.any(np.diff(times) <= 0):
            raise ValueError("policy time knots must be strictly increasing")
        if nodes.ndim != 1 or len(nodes) < 2 or np.any(np.diff(nodes) <= 0):
            raise ValueError("policy nodes must be strictly increasing with at least 2 entries")
        if values.shape != (len(times), len(nodes)):
            raise ValueError(f"policy values shape {values.shape} != {(len(times), len(nodes))}")
        for name, arr in (("times", times), ("nodes", nodes), ("values", values)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_uniform", _is_uniform(nodes))

    @classmethod
    def constant(cls, times, nodes, value: float, lipschitz_k: float, lower: float, upper: float):
        times = np.asarray(times, dtype=float)
        nodes = np.asarray(nodes, dtype=float)
        vals = np.full((len(times), len(nodes)), float(value))
        return cls(times, nodes, vals, lipschitz_k, lower, upper)

    @classmethod
    def from_function(cls, times, nodes, fn, lipschitz_k: float, lower: float, upper: float):
        times = np.asarray(times, dtype=float)
        nodes = np.asarray(nodes, dtype=float)
        vals = np.array([np.broadcast_to(fn(t, nodes), nodes.shape) for t in times], dtype=float)
        return cls(times, nodes, vals, lipschitz_k, lower, upper)

    def slice_index(self, t: float) -> int:
        scale = max(1.0, abs(self.times[-1]))
        j = int(np.searchsorted(self.times, t + 1e-12 * scale, side="right")) - 1
        return min(max(j, 0), len(self.times) - 1)

    def __call__(self, t: float, x):
        row = self.values[self.slice_index(t)]
        if self._uniform and np.ndim(x) > 0:
            n = len(self.nodes)
            i, w = uniform_weights(x, self.nodes[0], (self.nodes[-1] - self.nodes[0]) / (n - 1), n)
            return (1.0 - w) * row[i] + w * row[i + 1]
        return np.interp(x, self.nodes, row)

    def shifted(self, delta: float) -> "FeedbackPolicy":
        """Add a constant and clip into U; the Lipschitz bound is preserved."""
        vals = np.clip(self.values + delta, self.lower, self.upper)
        return FeedbackPolicy(self.times, self.nodes, vals, self.lipschitz_k, self.lower, self.upper)

    def violations(self) -> list[str]:
        out = []
        if np.any(self.values < self.lower) or np.any(self.values > self.upper):
            out.append("samples outside U")
        if not np.all(np.isfinite(self.values)):
            out.append("non-finite samples")
        bound = self.lipschitz_k * np.diff(self.nodes)
        mag = np.maximum(np.abs(self.values[:, 1:]), np.abs(self.values[:, :-1]))
        slack = LIP_SLACK * np.maximum(mag, np.maximum(bound, 1.0))
        if np.any(np.abs(np.diff(self.values, axis=1)) > bound + slack):
            out.append("per-slice Lipschitz bound violated")
        return out

    def is_admissible(self) -> bool:
        return not self.violations()

"""Two-sided Skorokhod map on a time-dependent interval, on a discrete grid.

Paths are arrays whose last axis is time (length ``N + 1``); leading axes are
treated as independent paths, so whole batches are reflected in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBarriersError, NonConvergenceError, NotASolutionError
from .finprob import cond_expect_G

ORACLE_TOL = 1e-13
ORACLE_MAX_ITER = 10_000
DYNAMICS_TOL = 1e-9


@dataclass(frozen=True)
class ReflectedOutput:
    """Reflected path ``y = x + k`` with ``k = k_plus - k_minus``.

    ``k_plus``/``k_minus`` are cumulative and nondecreasing. A push at index 0
    (only when ``x_0`` starts outside the band) is recorded as the first increment.
    """

    y: np.ndarray
    k: np.ndarray
    k_plus: np.ndarray
    k_minus: np.ndarray

    def residuals(self, x, lower, upper):
        """Worst decomposition error, constraint violation and flat-off term."""
        lower, upper = np.broadcast_to(lower, self.y.shape), np.broadcast_to(upper, self.y.shape)
        dkp = np.diff(self.k_plus, axis=-1, prepend=0.0)
        dkm = np.diff(self.k_minus, axis=-1, prepend=0.0)
        return {
            "decomposition": float(np.max(np.abs(self.y - np.asarray(x) - self.k))),
            "constraint": float(max(0.0, np.max(lower - self.y), np.max(self.y - upper))),
            "flat_off": float(max(np.max(np.abs((self.y - lower) * dkp)), np.max(np.abs((upper - self.y) * dkm)))),
            "monotone": float(max(0.0, np.max(-dkp), np.max(-dkm))),
        }


def _prepare(x, lower, upper):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError("path must have at least one time point")
    lower = np.broadcast_to(np.asarray(lower, dtype=float), x.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), x.shape)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("paths and barriers must be finite")
    gap = upper - lower
    if np.min(gap) <= 0:
        idx = np.unravel_index(int(np.argmin(gap)), gap.shape)
        raise InvalidBarriersError(f"barriers not strictly separated at index {idx[-1]} (u - l = {gap[idx]:.3g})")
    return x, lower, upper


def _split(x, k):
    """Attribute increments of the net push: upward moves to ``k_plus``, downward to ``k_minus``."""
    dk = np.diff(k, axis=-1, prepend=0.0)
    k_plus = np.cumsum(np.maximum(dk, 0.0), axis=-1)
    k_minus = np.cumsum(np.maximum(-dk, 0.0), axis=-1)
    return ReflectedOutput(x + k, k, k_plus, k_minus)


def two_sided_map(x, lower, upper):
    """Reflect ``x`` into ``[lower, upper]`` with running-extrema recurrences (O(N))."""
    x, lower, upper = _prepare(x, lower, upper)
    d = x - lower
    e = x - upper
    k = np.empty_like(x)
    inf_d = np.minimum(np.maximum(e[..., 0], 0.0), d[..., 0])
    best = np.minimum(e[..., 0], d[..., 0])
    k[..., 0] = -np.maximum(inf_d, best)
    for t in range(1, x.shape[-1]):
        dt_ = d[..., t]
        inf_d = np.minimum(inf_d, dt_)
        best = np.maximum(np.minimum(best, dt_), np.minimum(e[..., t], dt_))
        k[..., t] = -np.maximum(inf_d, best)
    return _split(x, k)


def two_sided_map_direct(x, lower, upper):
    """Literal O(N^2) evaluation of the max/inf formula at every grid time. Reference only."""
    x, lower, upper = _prepare(x, lower, upper)
    d = x - lower
    e = x - upper
    k = np.empty_like(x)
    for t in range(x.shape[-1]):
        # inner[..., s] = min over r in [s, t] of d_r
        inner = np.minimum.accumulate(d[..., t::-1], axis=-1)[..., ::-1]
        first = np.minimum(np.maximum(e[..., 0], 0.0), inner[..., 0])
        second = np.max(np.minimum(e[..., : t + 1], inner), axis=-1)
        k[..., t] = -np.maximum(first, second)
    return _split(x, k)


def iterative_oracle(x, lower, upper, tol=ORACLE_TOL, max_iter=ORACLE_MAX_ITER):
    """Alternate one-sided lower and upper reflections until the pushes stop changing."""
    x, lower, upper = _prepare(x, lower, upper)
    k_plus = np.zeros_like(x)
    k_minus = np.zeros_like(x)
    for _ in range(max_iter):
        new_plus = np.maximum(np.maximum.accumulate(lower - x + k_minus, axis=-1), 0.0)
        new_minus = np.maximum(np.maximum.accumulate(x + new_plus - upper, axis=-1), 0.0)
        change = max(np.max(np.abs(new_plus - k_plus)), np.max(np.abs(new_minus - k_minus)))
        k_plus, k_minus = new_plus, new_minus
        if change < tol:
            k = k_plus - k_minus
            return ReflectedOutput(x + k, k, k_plus, k_minus)
    raise NonConvergenceError(f"alternating reflections did not settle in {max_iter} sweeps (band too thin?)")


def stability_gap(x1, x2, b1, b2):
    """``(sup|k1 - k2|, sup|x1 - x2| + sup max(|l1 - l2|, |u1 - u2|))`` for two instances."""
    (l1, u1), (l2, u2) = b1, b2
    k1 = two_sided_map(x1, l1, u1).k
    k2 = two_sided_map(x2, l2, u2).k
    x1, x2 = np.asarray(x1, float), np.asarray(x2, float)
    l1, u1, l2, u2 = (np.broadcast_to(np.asarray(a, float), x1.shape) for a in (l1, u1, l2, u2))
    lhs = float(np.max(np.abs(k1 - k2)))
    rhs = float(np.max(np.abs(x1 - x2)) + np.max(np.maximum(np.abs(l1 - l2), np.abs(u1 - u2))))
    return lhs, rhs


@dataclass(frozen=True)
class KRepresentation:
    """Cumulative pushes recovered from a solution, one atom-indexed array per level."""

    k: list
    k_plus: list
    k_minus: list


def _atom_paths(filtration):
    """``paths[g, k]``: the level-``k`` ancestor atom of terminal atom ``g``."""
    n = filtration.num_steps
    paths = np.empty((filtration.n_atoms[n], n + 1), dtype=np.intp)
    paths[:, n] = np.arange(filtration.n_atoms[n])
    for k in range(n, 0, -1):
        paths[:, k - 1] = filtration.atom_parent[k][paths[:, k]]
    return paths


def k_from_solution(Y, Z, f_values, xi, L, U, tree, filtration, tol=DYNAMICS_TOL):
    """Recover the reflection term of a solved problem from the pathwise max/inf formula.

    ``Y``, ``L``, ``U`` are F-processes on levels ``0..N``; ``Z`` and ``f_values``
    (the driver evaluated along the solution) cover levels ``0..N-1``; ``xi`` is
    the terminal leaf array. Along every terminal-atom trajectory the reversed
    conditional means form a Skorokhod problem whose solution gives ``K_N - K_k``.
    """
    n = tree.num_steps
    dt = tree.dt
    scale = 1.0 + max(float(np.max(np.abs(y))) for y in Y)
    if np.max(np.abs(np.asarray(Y[n]) - np.asarray(xi))) > tol * scale:
        raise NotASolutionError("terminal value differs from xi")

    X = [np.zeros(1)]
    for k in range(n):
        par, inc = tree.parent[k + 1], tree.increment[k + 1]
        drift = np.asarray(f_values[k], float) * dt
        # Y_k - f dt - (Y_{k+1} - Z dB) must be the same on every branch and inside every G atom
        gap = (Y[k] - drift)[par] - (Y[k + 1] - Z[k][par] * inc)
        lo = np.full(tree.n_nodes[k], np.inf)
        hi = np.full(tree.n_nodes[k], -np.inf)
        np.minimum.at(lo, par, gap)
        np.maximum.at(hi, par, gap)
        node_gap = lo
        amap = filtration.atoms[k]
        alo = np.full(filtration.n_atoms[k], np.inf)
        ahi = np.full(filtration.n_atoms[k], -np.inf)
        np.minimum.at(alo, amap, node_gap)
        np.maximum.at(ahi, amap, node_gap)
        worst = max(float(np.max(hi - lo)), float(np.max(ahi - alo)))
        if worst > tol * scale:
            raise NotASolutionError(f"level {k}: dynamics residual {worst:.3e} exceeds {tol:g}")
        X.append(X[k][par] + drift[par] - Z[k][par] * inc)

    paths = _atom_paths(filtration)
    cols = range(n + 1)
    x = np.column_stack([cond_expect_G(filtration, X[k], k)[paths[:, k]] for k in cols])
    lo = np.column_stack([cond_expect_G(filtration, L[k], k)[paths[:, k]] for k in cols])
    up = np.column_stack([cond_expect_G(filtration, U[k], k)[paths[:, k]] for k in cols])
    a = cond_expect_G(filtration, xi, n)

    x_rev = a[:, None] + x[:, [n]] - x[:, ::-1]
    out = two_sided_map(x_rev, lo[:, ::-1], up[:, ::-1])
    # k~_s = K_N - K_{N-s}, hence K_k = k~_N - k~_{N-k}
    total = out.k[:, [n]]
    K = total - out.k[:, ::-1]
    Kp = out.k_plus[:, [n]] - out.k_plus[:, ::-1]
    Km = out.k_minus[:, [n]] - out.k_minus[:, ::-1]

    def per_level(arr):
        res = []
        for k in cols:
            vals = np.zeros(filtration.n_atoms[k])
            vals[paths[:, k]] = arr[:, k]
            res.append(vals)
        return res

    return KRepresentation(per_level(K), per_level(Kp), per_level(Km))

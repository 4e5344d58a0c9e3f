"""Linear drivers: stochastic exponential, stopped values, saddle points and comparison."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_f_process
from .errors import DegenerateExponentialError, PreconditionError
from .finprob import atom_spread, cond_expect_F, cond_expect_G, enumerate_stopping_times, is_stopping_time, martingale_coeff
from .solver import Driver, solve_backward

SLACK_TOL = 1e-9
ADAPTED_TOL = 1e-12
COMPARE_TOL = 1e-10


class LinearDriver(Driver):
    """``f(y, z) = a y + b z + c`` with coefficient processes on the tree's levels ``0..N-1``."""

    def __init__(self, tree, a=0.0, b=0.0, c=0.0):
        n = tree.num_steps
        self.tree = tree
        self.a = as_f_process(tree, a, "a", levels=n)
        self.b = as_f_process(tree, b, "b", levels=n)
        self.c = as_f_process(tree, c, "c", levels=n)
        self.a_bound = max(float(np.max(np.abs(v))) for v in self.a)
        self.b_bound = max(float(np.max(np.abs(v))) for v in self.b)
        self.lipschitz = self.a_bound + self.b_bound
        self.state_dependent = self.lipschitz > 0

    def evaluate(self, tree, k, y, z):
        return self.a[k] * y + self.b[k] * z + self.c[k]

    def shares_coefficients(self, other):
        return all(np.array_equal(x, y) for x, y in zip(self.a + self.b, other.a + other.b))


@dataclass
class GammaProcess:
    values: list
    g_adapted: bool
    scheme: str


def gamma_process(ld, tree=None, filtration=None, scheme="euler"):
    """Discrete stochastic exponential with ``Gamma_0 = 1``.

    ``scheme="euler"`` multiplies by ``1 + a dt + b dB`` on each branch;
    ``scheme="implicit"`` by ``(1 + b dB) / (1 - a dt)``, which is the weight
    under which the solver's implicit step turns linear solutions into
    martingales exactly. ``g_adapted`` is evaluated against ``filtration``
    (``True`` when none is given only if ``Gamma`` is deterministic).
    """
    tree = ld.tree if tree is None else tree
    if scheme not in ("euler", "implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    dt = tree.dt
    values = [np.ones(1)]
    for k in range(tree.num_steps):
        par, inc = tree.parent[k + 1], tree.increment[k + 1]
        a, b = ld.a[k][par], ld.b[k][par]
        if scheme == "euler":
            factor = 1 + a * dt + b * inc
        else:
            if np.any(1 - a * dt <= 0):
                raise DegenerateExponentialError(f"level {k}: 1 - a dt is not positive")
            factor = (1 + b * inc) / (1 - a * dt)
        if np.any(factor <= 0):
            node = int(par[np.argmin(factor)])
            raise DegenerateExponentialError(f"level {k}, node {node}: nonpositive exponential factor {factor.min():.3g}")
        values.append(values[k][par] * factor)
    if filtration is None:
        adapted = all(np.ptp(v) <= ADAPTED_TOL * np.max(np.abs(v)) for v in values)
    else:
        adapted = all(atom_spread(filtration, v, k) <= ADAPTED_TOL * np.max(np.abs(v)) for k, v in enumerate(values))
    return GammaProcess(values, bool(adapted), scheme)


def _check_linear(problem):
    if not isinstance(problem.driver, LinearDriver):
        raise PreconditionError("problem driver must be a LinearDriver")
    return problem.driver


def stopped_payoff(problem, tau, sigma):
    """Leaf payoff ``xi 1{tau^sigma=N} + L_tau 1{tau<N, tau<=sigma} + U_sigma 1{sigma<tau}``."""
    tree = problem.tree
    n = tree.num_steps
    leaves = np.arange(tree.n_leaves)
    low = np.stack([problem.lower[k][tree.leaf_ancestors[k]] for k in range(n + 1)])
    up = np.stack([problem.upper[k][tree.leaf_ancestors[k]] for k in range(n + 1)])
    stop = np.minimum(tau, sigma)
    return np.where(
        stop == n,
        problem.terminal,
        np.where(tau <= sigma, low[tau, leaves], up[sigma, leaves]),
    )


def stopped_value(problem, tau, sigma, level=0):
    """Solution of the linear equation stopped at ``tau ^ sigma`` with the frozen payoff.

    Returns an F-process on levels ``level..N`` (earlier levels are NaN).
    """
    ld = _check_linear(problem)
    tree, G = problem.tree, problem.filtration
    n = tree.num_steps
    tau = np.asarray(tau, dtype=np.intp)
    sigma = np.asarray(sigma, dtype=np.intp)
    for name, st in (("tau", tau), ("sigma", sigma)):
        if not is_stopping_time(G, st) or st.min() < level:
            raise PreconditionError(f"{name} is not a G-stopping time with values in [{level}, {n}]")
    stop = np.minimum(tau, sigma)
    payoff = stopped_payoff(problem, tau, sigma)
    dt = tree.dt
    y = [np.full(m, np.nan) for m in tree.n_nodes]
    y[n] = payoff
    for k in range(n - 1, level - 1, -1):
        z = martingale_coeff(tree, y[k + 1], k)
        run = (cond_expect_F(tree, y[k + 1], k) + (ld.b[k] * z + ld.c[k]) * dt) / (1 - ld.a[k] * dt)
        first = tree.first_leaf(k)
        frozen = stop[first] <= k
        y[k] = np.where(frozen, payoff[first], run)
    return y


def saddle_point(problem, solution, level=0, tol=SLACK_TOL):
    """First times from ``level`` at which the conditional slack to ``L`` (resp. ``U``) vanishes."""
    G = problem.filtration
    n = problem.num_steps
    ybar = solution.conditional_value(G)
    tau = np.full(problem.tree.n_leaves, n, dtype=np.intp)
    sigma = tau.copy()
    for k in range(n, level - 1, -1):
        lo_hit = (ybar[k] - problem.lower_bar[k] <= tol)[G.leaf_atoms[k]]
        up_hit = (problem.upper_bar[k] - ybar[k] <= tol)[G.leaf_atoms[k]]
        tau[lo_hit] = k
        sigma[up_hit] = k
    return tau, sigma


@dataclass
class SaddleAudit:
    lower_violation: float
    upper_violation: float
    pairs: int

    @property
    def passed(self):
        return self.lower_violation <= SLACK_TOL and self.upper_violation <= SLACK_TOL


def saddle_audit(problem, solution, level=0, cap=None):
    """Check ``E[y^{tau, sigma*}|G] <= E[Y|G] <= E[y^{tau*, sigma}|G]`` over every stopping time from ``level``."""
    G = problem.filtration
    kwargs = {} if cap is None else {"cap": cap}
    times = enumerate_stopping_times(G, level, **kwargs)
    tau_s, sigma_s = saddle_point(problem, solution, level)
    ybar = solution.conditional_value(G)[level]
    low = up = -np.inf
    for st in times:
        v1 = cond_expect_G(G, stopped_value(problem, st, sigma_s, level)[level], level)
        v2 = cond_expect_G(G, stopped_value(problem, tau_s, st, level)[level], level)
        low = max(low, float(np.max(v1 - ybar)))
        up = max(up, float(np.max(ybar - v2)))
    return SaddleAudit(low, up, 2 * len(times))


@dataclass
class ComparisonReport:
    margin: float
    level_margins: list
    holds: bool
    solutions: tuple


def comparison_violations(p1, p2, tol=0.0):
    """Where the conditional data of ``p1`` fail to dominate those of ``p2``."""
    G = p1.filtration
    n = p1.num_steps
    out = []

    def check(name, k, x1, x2):
        gap = cond_expect_G(G, x1, k) - cond_expect_G(G, x2, k)
        bad = np.flatnonzero(gap < -tol)
        out.extend(f"{name} at level {k}, atom {int(g)} (short by {-gap[g]:.3g})" for g in bad)

    check("xi", n, p1.terminal, p2.terminal)
    for k in range(n):
        check("c", k, p1.driver.c[k], p2.driver.c[k])
    for k in range(n + 1):
        check("L", k, p1.lower[k], p2.lower[k])
        check("U", k, p1.upper[k], p2.upper[k])
    return out


def compare(p1, p2, solver=solve_backward, tol=COMPARE_TOL):
    """Check ``E[Y1|G] >= E[Y2|G]`` for linear problems with shared ``a, b`` and ordered data."""
    d1, d2 = _check_linear(p1), _check_linear(p2)
    if p1.filtration is not p2.filtration:
        raise PreconditionError("problems must share the subfiltration")
    if not d1.shares_coefficients(d2):
        raise PreconditionError("problems must share the coefficients a and b")
    if not gamma_process(d1, p1.tree, p1.filtration, scheme="implicit").g_adapted:
        raise PreconditionError("stochastic exponential is not G-adapted")
    bad = comparison_violations(p1, p2)
    if bad:
        raise PreconditionError("data are not conditionally ordered: " + "; ".join(bad[:10]))
    s1, s2 = solver(p1), solver(p2)
    margins = [float(np.min(a - b)) for a, b in zip(s1.conditional_value(p1.filtration), s2.conditional_value(p2.filtration))]
    margin = min(margins)
    return ComparisonReport(margin, margins, margin >= -tol, (s1, s2))

"""Doubly conditionally reflected BSDEs on a scenario tree.

Discrete scheme, on every edge from a level-``k`` node to a child::

    Y_k = Y_{k+1} + f(k, Y_k, Z_k) dt - Z_k dB + dK_k,    Y_N = xi

with ``dK_k = dK+_k - dK-_k`` constant on the atoms of ``G_k`` and chosen so
that ``L_k <= Y_k <= U_k`` holds for the ``G_k``-conditional means, pushing
only while a conditional barrier is touched. Cumulative pushes are stored per
node (``K_0 = 0``, ``K_{k+1} = K_k + dK_k``), which keeps the adaptedness
audit in :func:`verify_solution` a genuine check.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_f_process, as_leaf_array, path_table
from .errors import NonContractionError, PreconditionError
from .finprob import cond_expect_F, cond_expect_G, lift, martingale_coeff

log = logging.getLogger(__name__)

DYNAMICS_TOL = 1e-9
CONSTRAINT_TOL = 1e-10
FLAT_OFF_TOL = 1e-10
PICARD_TOL = 1e-10
PICARD_MAX_ITER = 200
INNER_TOL = 1e-14
INNER_MAX_ITER = 500


# drivers ----------------------------------------------------------------------


class Driver:
    """Generator ``f(k, y, z)`` evaluated on the level-``k`` nodes."""

    state_dependent = True
    lipschitz = None

    def evaluate(self, tree, k, y, z):
        raise NotImplementedError


class ConstantDriver(Driver):
    """Driver not depending on ``(y, z)``: scalar, ``fn(t, w)`` or per-level arrays."""

    state_dependent = False
    lipschitz = 0.0

    def __init__(self, values):
        self.values = values

    def evaluate(self, tree, k, y=None, z=None):
        v = self.values
        if callable(v):
            out = v(tree.times[k], tree.w[k])
        elif np.isscalar(v):
            out = v
        else:
            out = v[k]
        return np.broadcast_to(np.asarray(out, dtype=float), (tree.n_nodes[k],))


class FunctionDriver(Driver):
    """Driver given by ``fn(t, w, y, z)`` with ``w`` the cumulative noise at each node."""

    def __init__(self, fn, lipschitz=None):
        self.fn = fn
        self.lipschitz = lipschitz

    def evaluate(self, tree, k, y, z):
        out = self.fn(tree.times[k], tree.w[k], y, z)
        return np.broadcast_to(np.asarray(out, dtype=float), (tree.n_nodes[k],))


def as_driver(driver):
    if isinstance(driver, Driver):
        return driver
    if callable(driver):
        return FunctionDriver(driver)
    return ConstantDriver(driver)


# problem ----------------------------------------------------------------------


class DCRBSDEProblem:
    """Terminal value, driver and obstacles on a tree with a subfiltration.

    ``lower``/``upper`` accept anything :func:`as_f_process` does; ``terminal``
    is a leaf array, scalar or ``fn(T, w)``. ``lipschitz`` defaults to the
    driver's own declaration. Hypotheses are checked on construction unless
    ``validate=False``.
    """

    def __init__(self, tree, filtration, terminal, driver=0.0, lower=-1.0, upper=1.0, lipschitz=None, validate=True):
        if filtration.tree is not tree:
            raise ValueError("subfiltration belongs to a different tree")
        self.tree = tree
        self.filtration = filtration
        self.terminal = as_leaf_array(tree, terminal, "terminal")
        self.driver = as_driver(driver)
        self.lower = as_f_process(tree, lower, "lower")
        self.upper = as_f_process(tree, upper, "upper")
        if lipschitz is None:
            lipschitz = self.driver.lipschitz
        if lipschitz is None:
            raise PreconditionError("a Lipschitz constant must be declared for state-dependent drivers")
        self.lipschitz = float(lipschitz)
        self.lower_bar = [cond_expect_G(filtration, self.lower[k], k) for k in range(tree.num_steps + 1)]
        self.upper_bar = [cond_expect_G(filtration, self.upper[k], k) for k in range(tree.num_steps + 1)]
        if validate:
            self.validate()

    @property
    def num_steps(self):
        return self.tree.num_steps

    def validate(self):
        """Check barrier separation, the terminal sandwich and the declared Lipschitz constant."""
        for k, (lo, up) in enumerate(zip(self.lower, self.upper)):
            gap = up - lo
            if np.min(gap) <= 0:
                node = int(np.argmin(gap))
                raise PreconditionError(f"(H2) barriers not separated at level {k}, node {node}: U - L = {gap[node]:.4g}")
        n = self.num_steps
        a = cond_expect_G(self.filtration, self.terminal, n)
        slack = 1e-12 * (1.0 + float(np.max(np.abs(a))))
        bad = np.flatnonzero((a < self.lower_bar[n] - slack) | (a > self.upper_bar[n] + slack))
        if bad.size:
            g = int(bad[0])
            raise PreconditionError(
                f"(H3) terminal sandwich fails on atom {g} of level {n}: "
                f"E[xi|G] = {a[g]:.4g} not in [{self.lower_bar[n][g]:.4g}, {self.upper_bar[n][g]:.4g}]"
            )
        self._probe_lipschitz()

    def _probe_lipschitz(self, probes=8, seed=0):
        if not self.driver.state_dependent:
            return
        rng = np.random.default_rng(seed)
        scale = 1.0 + float(np.max(np.abs(self.terminal)))
        for k in range(self.num_steps):
            m = self.tree.n_nodes[k]
            for _ in range(probes):
                y1, y2, z1, z2 = (rng.normal(0.0, scale, m) for _ in range(4))
                df = np.abs(self.driver.evaluate(self.tree, k, y1, z1) - self.driver.evaluate(self.tree, k, y2, z2))
                bound = self.lipschitz * (np.abs(y1 - y2) + np.abs(z1 - z2))
                if np.any(df > bound * (1 + 1e-9) + 1e-12):
                    raise PreconditionError(f"(H1) driver exceeds declared Lipschitz constant {self.lipschitz:g} at level {k}")

    def driver_values(self, Y, Z):
        return [np.array(self.driver.evaluate(self.tree, k, Y[k], Z[k])) for k in range(self.num_steps)]

    def conditional(self, process):
        """``E[X_k | G_k]`` for every level of an F-process."""
        return [cond_expect_G(self.filtration, process[k], k) for k in range(len(process))]


# solutions --------------------------------------------------------------------


@dataclass
class SolutionTriple:
    """Solution ``(Y, Z, K+, K-)``; ``K+``/``K-`` are cumulative and stored per node."""

    Y: list
    Z: list
    K_plus: list
    K_minus: list
    driver_values: list
    method: str = "backward"
    iterations: int = 1
    history: list = field(default_factory=list)
    penalty: float | None = None
    diagnostics: object = None

    @property
    def K(self):
        return [p - m for p, m in zip(self.K_plus, self.K_minus)]

    def conditional_value(self, filtration):
        return [cond_expect_G(filtration, self.Y[k], k) for k in range(len(self.Y))]

    def k_atoms(self, filtration, which="net"):
        """Cumulative pushes as a G-process (atom-indexed)."""
        src = {"net": self.K, "plus": self.K_plus, "minus": self.K_minus}[which]
        return [cond_expect_G(filtration, src[k], k) for k in range(len(src))]


def _level_step(problem, k, y_next, drive, state_dependent, penalty=None):
    tree, G = problem.tree, problem.filtration
    dt = tree.dt
    cont = cond_expect_F(tree, y_next, k)
    z = martingale_coeff(tree, y_next, k)
    lo, up = problem.lower_bar[k], problem.upper_bar[k]
    y = cont
    for _ in range(INNER_MAX_ITER if state_dependent else 1):
        fv = np.asarray(drive(k, y, z), dtype=float)
        c = cont + fv * dt
        mbar = cond_expect_G(G, c, k)
        if penalty is None:
            m = np.clip(mbar, lo, up)
        else:
            h = penalty * dt
            m = np.where(mbar < lo, (mbar + h * lo) / (1 + h), np.where(mbar > up, (mbar + h * up) / (1 + h), mbar))
        push = m - mbar
        y_new = c + lift(G, push, k)
        if not state_dependent:
            return y_new, z, fv, push
        if np.max(np.abs(y_new - y)) <= INNER_TOL * (1.0 + np.max(np.abs(y_new))):
            return y_new, z, np.asarray(drive(k, y_new, z), dtype=float), push
        y = y_new
    raise NonContractionError(
        f"implicit driver step did not converge at level {k}; lambda*dt = {problem.lipschitz * dt:.3g} is too large, refine the grid"
    )


def _sweep(problem, drive, state_dependent, penalty=None):
    tree, G = problem.tree, problem.filtration
    n = tree.num_steps
    Y = [None] * (n + 1)
    Z = [None] * n
    fvals = [None] * n
    pushes = [None] * n
    Y[n] = problem.terminal.copy()
    for k in range(n - 1, -1, -1):
        Y[k], Z[k], fvals[k], pushes[k] = _level_step(problem, k, Y[k + 1], drive, state_dependent, penalty)
    K_plus, K_minus = [np.zeros(1)], [np.zeros(1)]
    for k in range(n):
        par = tree.parent[k + 1]
        step = lift(G, pushes[k], k)
        K_plus.append((K_plus[k] + np.maximum(step, 0.0))[par])
        K_minus.append((K_minus[k] + np.maximum(-step, 0.0))[par])
    return SolutionTriple(Y, Z, K_plus, K_minus, fvals)


def _finish(problem, sol, method):
    sol.method = method
    sol.diagnostics = verify_solution(problem, sol)
    if not sol.diagnostics.passed:
        log.warning("%s solution failed verification: %s", method, sol.diagnostics.summary())
    return sol


def solve_constant_driver(problem):
    """One backward sweep for a driver that ignores ``(y, z)``."""
    if problem.driver.state_dependent:
        raise PreconditionError("driver depends on (y, z); use solve_backward or solve_picard")
    drive = lambda k, y, z: problem.driver.evaluate(problem.tree, k, y, z)  # noqa: E731
    return _finish(problem, _sweep(problem, drive, False), "constant")


def _check_step(problem):
    if problem.lipschitz * problem.tree.dt >= 1:
        raise PreconditionError(
            f"lambda*dt = {problem.lipschitz * problem.tree.dt:.3g} must be below 1; refine the grid"
        )


def solve_backward(problem):
    """Backward sweep with an inner fixed point for the implicit ``y``-dependence at each level."""
    _check_step(problem)
    drive = lambda k, y, z: problem.driver.evaluate(problem.tree, k, y, z)  # noqa: E731
    return _finish(problem, _sweep(problem, drive, problem.driver.state_dependent), "backward")


def beta_norm(problem, dY, dZ, beta=None):
    """``sqrt(sum_{k<N} exp(beta t_k) E[|dY_k|^2 + |dZ_k|^2] dt)`` with ``beta = 4 lambda^2 + 1``."""
    tree = problem.tree
    beta = 4 * problem.lipschitz**2 + 1 if beta is None else beta
    total = 0.0
    for k in range(tree.num_steps):
        mass = np.dot(tree.path_prob[k], dY[k] ** 2 + dZ[k] ** 2)
        total += np.exp(beta * tree.times[k]) * mass * tree.dt
    return float(np.sqrt(total))


def solve_picard(problem, tol=PICARD_TOL, max_iter=PICARD_MAX_ITER):
    """Fixed point of the map freezing the driver at the previous iterate.

    Every iterate is a constant-driver solve. ``history`` holds the weighted
    norms of successive differences.
    """
    _check_step(problem)
    tree = problem.tree
    if not problem.driver.state_dependent:
        sol = _sweep(problem, lambda k, y, z: problem.driver.evaluate(tree, k, y, z), False)
        return _finish(problem, sol, "picard")
    Y = tree.constant(0.0)
    Z = [np.zeros(tree.n_nodes[k]) for k in range(tree.num_steps)]
    history = []
    for it in range(1, max_iter + 1):
        frozen = problem.driver_values(Y, Z)
        sol = _sweep(problem, lambda k, y, z, fv=frozen: fv[k], False)
        diff = beta_norm(problem, [a - b for a, b in zip(sol.Y, Y)], [a - b for a, b in zip(sol.Z, Z)])
        history.append(diff)
        Y, Z = sol.Y, sol.Z
        if diff < tol:
            sol.driver_values = problem.driver_values(Y, Z)
            sol.iterations = it
            sol.history = history
            return _finish(problem, sol, "picard")
    raise NonContractionError(
        f"Picard iteration not converged after {max_iter} sweeps (last difference {history[-1]:.3e}); "
        "lambda*dt may be too large, refine the grid"
    )


def solve_penalized(problem, penalty):
    """Penalized equation: pushes ``n dt (m - L)^-`` and ``n dt (m - U)^+`` at the atom means.

    The returned triple generally violates the barriers by ``O(1/n)``.
    """
    if penalty <= 0:
        raise ValueError("penalty must be positive")
    _check_step(problem)
    drive = lambda k, y, z: problem.driver.evaluate(problem.tree, k, y, z)  # noqa: E731
    sol = _sweep(problem, drive, problem.driver.state_dependent, penalty=float(penalty))
    sol.penalty = float(penalty)
    sol.method = "penalty"
    return sol


def solve(problem, method="backward", **kwargs):
    if method == "backward":
        return solve_backward(problem)
    if method == "constant":
        return solve_constant_driver(problem)
    if method == "picard":
        return solve_picard(problem, **kwargs)
    if method == "penalty":
        return solve_penalized(problem, **kwargs)
    raise ValueError(f"unknown method {method!r}")


# penalization sweep -----------------------------------------------------------


def default_penalty_grid(tree, exponents=range(4, 13)):
    return [2.0**e / tree.dt for e in exponents]


def constraint_violation(problem, sol):
    """Largest conditional barrier violation over all levels and atoms."""
    worst = 0.0
    for k, ybar in enumerate(sol.conditional_value(problem.filtration)):
        worst = max(worst, float(np.max(problem.lower_bar[k] - ybar)), float(np.max(ybar - problem.upper_bar[k])))
    return worst


@dataclass
class PenaltySweepReport:
    penalties: list
    violation: list
    distance: list
    slope: float | None
    scale: float

    def rows(self):
        return list(zip(self.penalties, self.violation, self.distance))


def penalization_sweep(problem, penalties, reference=None, threads=None):
    """Violation ``v(n)`` and distance ``d(n)`` to the reflected solution for every penalty.

    ``slope`` is the least-squares slope of ``log v`` against ``log n`` over
    the points with ``v > 0`` (``None`` if fewer than two).
    """
    reference = solve_picard(problem) if reference is None else reference

    def one(n):
        sol = solve_penalized(problem, n)
        dist = max(float(np.max(np.abs(a - b))) for a, b in zip(sol.Y, reference.Y))
        return constraint_violation(problem, sol), dist

    penalties = [float(n) for n in penalties]
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, penalties))
    else:
        results = [one(n) for n in penalties]
    v = [max(r[0], 0.0) for r in results]
    d = [r[1] for r in results]
    pts = [(np.log(n), np.log(x)) for n, x in zip(penalties, v) if x > 0]
    slope = float(np.polyfit(*zip(*pts), 1)[0]) if len(pts) >= 2 else None
    scale = max(float(np.max(np.abs(y))) for y in reference.Y)
    return PenaltySweepReport(penalties, v, d, slope, scale)


# verification -----------------------------------------------------------------


@dataclass
class Diagnostics:
    dynamics_residual: float
    flagged_nodes: list
    constraint_slack: float
    flat_off_plus: float
    flat_off_minus: float
    k_monotone: bool
    k_adapted: bool
    k_starts_at_zero: bool
    passed: bool

    def summary(self):
        return (
            f"residual={self.dynamics_residual:.2e} slack={self.constraint_slack:.2e} "
            f"flat_off=({self.flat_off_plus:.2e}, {self.flat_off_minus:.2e}) "
            f"monotone={self.k_monotone} adapted={self.k_adapted} passed={self.passed}"
        )

    def to_dict(self):
        out = dict(self.__dict__)
        out["flagged_nodes"] = [list(map(int, p)) for p in self.flagged_nodes]
        return out


def verify_solution(problem, sol, dynamics_tol=DYNAMICS_TOL, constraint_tol=CONSTRAINT_TOL, flat_off_tol=FLAT_OFF_TOL):
    """Audit every condition of the reflected system; never raises on failure."""
    tree, G = problem.tree, problem.filtration
    n = tree.num_steps
    dt = tree.dt
    Y, Z = sol.Y, sol.Z
    fvals = problem.driver_values(Y, Z)

    edge_bad = []
    worst = 0.0
    adapted = True
    monotone = True
    for k in range(n):
        par, inc = tree.parent[k + 1], tree.increment[k + 1]
        dkp = sol.K_plus[k + 1] - sol.K_plus[k][par]
        dkm = sol.K_minus[k + 1] - sol.K_minus[k][par]
        resid = Y[k][par] - (Y[k + 1] + fvals[k][par] * dt - Z[k][par] * inc + dkp - dkm)
        worst = max(worst, float(np.max(np.abs(resid))))
        edge_bad.append(np.abs(resid) > dynamics_tol)
        monotone &= bool(np.all(dkp >= -1e-12) and np.all(dkm >= -1e-12))
        # increments must be constant on the G_k atom of the parent
        amap = G.atoms[k][par]
        for inc_arr in (dkp, dkm):
            lo = np.full(G.n_atoms[k], np.inf)
            hi = np.full(G.n_atoms[k], -np.inf)
            np.minimum.at(lo, amap, inc_arr)
            np.maximum.at(hi, amap, inc_arr)
            adapted &= bool(np.max(hi - lo) <= 1e-12)
    term = np.abs(Y[n] - problem.terminal)
    worst = max(worst, float(np.max(term)))

    flagged = []
    for k in range(n + 1):
        incoming = np.ones(tree.n_nodes[k], dtype=bool) if k == 0 else edge_bad[k - 1]
        if k == n:
            outgoing = term > dynamics_tol
        else:
            good_children = np.bincount(tree.parent[k + 1], weights=~edge_bad[k], minlength=tree.n_nodes[k])
            outgoing = good_children == 0
        flagged.extend((k, int(i)) for i in np.flatnonzero(incoming & outgoing))

    ybar = sol.conditional_value(G)
    slack = min(
        min(float(np.min(y - lo)), float(np.min(up - y)))
        for y, lo, up in zip(ybar, problem.lower_bar, problem.upper_bar)
    )

    # flat-off along every leaf trajectory
    ytab = np.stack([ybar[k][G.leaf_atoms[k]] for k in range(n + 1)])
    ltab = np.stack([problem.lower_bar[k][G.leaf_atoms[k]] for k in range(n + 1)])
    utab = np.stack([problem.upper_bar[k][G.leaf_atoms[k]] for k in range(n + 1)])
    kp = np.diff(path_table(tree, sol.K_plus), axis=0)
    km = np.diff(path_table(tree, sol.K_minus), axis=0)
    flat_plus = float(np.max(np.abs(np.sum((ytab[:-1] - ltab[:-1]) * kp, axis=0))))
    flat_minus = float(np.max(np.abs(np.sum((utab[:-1] - ytab[:-1]) * km, axis=0))))
    starts = bool(sol.K_plus[0][0] == 0 and sol.K_minus[0][0] == 0)

    passed = (
        worst <= dynamics_tol
        and slack >= -constraint_tol
        and flat_plus <= flat_off_tol
        and flat_minus <= flat_off_tol
        and monotone
        and adapted
        and starts
    )
    return Diagnostics(worst, flagged, slack, flat_plus, flat_minus, monotone, adapted, starts, passed)


# stability --------------------------------------------------------------------


def stability_estimate(p1, p2, s1, s2):
    """``(lhs, rhs)`` of the a priori difference estimate for two problems sharing obstacles."""
    tree = p1.tree
    if p2.tree is not tree:
        raise PreconditionError("problems must live on the same tree")
    for a, b in zip(p1.lower + p1.upper, p2.lower + p2.upper):
        if not np.array_equal(a, b):
            raise PreconditionError("stability estimate requires identical obstacles L and U")
    n = tree.num_steps
    dt = tree.dt
    w = tree.path_prob[n]
    dY = path_table(tree, [a - b for a, b in zip(s1.Y, s2.Y)])
    dZ = path_table(tree, [a - b for a, b in zip(s1.Z, s2.Z)])
    dK = path_table(tree, [a - b for a, b in zip(s1.K, s2.K)])
    lhs = np.max(dY**2, axis=0) + np.sum(dZ**2, axis=0) * dt + np.max(dK**2, axis=0)
    f1 = p1.driver_values(s2.Y, s2.Z)
    f2 = p2.driver_values(s2.Y, s2.Z)
    df = path_table(tree, [a - b for a, b in zip(f1, f2)])
    rhs = (p1.terminal - p2.terminal) ** 2 + np.sum(df**2, axis=0) * dt
    return float(np.dot(w, lhs)), float(np.dot(w, rhs))

"""Two-mode starting/stopping problem observed through ``G``.

A strategy is an int array of shape ``(n_switches, n_leaves)``: row ``i`` is
the level of the ``(i+1)``-th switch on every path, rows nondecreasing. The
project starts open; odd switches close it (cost ``D``), even switches reopen
it (cost ``a``). Switches at the horizon are free and change nothing.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_f_process, path_table
from .errors import EnumerationTooLargeError, PreconditionError
from .finprob import DEFAULT_ENUMERATION_CAP, cond_expect_F, cond_expect_G, is_stopping_time
from .solver import ConstantDriver, DCRBSDEProblem, solve_constant_driver

SLACK_TOL = 1e-9


class SwitchingProblem:
    """Profit rates ``psi1`` (open) and ``psi2`` (closed), stop cost ``D`` and start cost ``a``."""

    def __init__(self, tree, filtration, psi1, psi2, stop_cost, start_cost):
        self.tree = tree
        self.filtration = filtration
        n = tree.num_steps
        self.psi1 = as_f_process(tree, psi1, "psi1", levels=n)
        self.psi2 = as_f_process(tree, psi2, "psi2", levels=n)
        self.stop_cost = as_f_process(tree, stop_cost, "stop_cost")
        self.start_cost = as_f_process(tree, start_cost, "start_cost")
        low = min(min(float(np.min(a)), float(np.min(d))) for a, d in zip(self.start_cost, self.stop_cost))
        if low <= 0:
            raise PreconditionError(f"switching costs must be strictly positive (min a ^ D = {low:.4g})")

    @property
    def num_steps(self):
        return self.tree.num_steps

    def as_problem(self):
        """Reflected equation whose solution is the value difference of the two modes."""
        return DCRBSDEProblem(
            self.tree,
            self.filtration,
            0.0,
            ConstantDriver([a - b for a, b in zip(self.psi1, self.psi2)]),
            [-d for d in self.stop_cost],
            self.start_cost,
        )


def validate_strategy(sp, strategy):
    strategy = np.asarray(strategy, dtype=np.intp)
    if strategy.ndim != 2 or strategy.shape[1] != sp.tree.n_leaves:
        raise ValueError(f"strategy must have shape (n_switches, {sp.tree.n_leaves})")
    if strategy.size and (strategy.min() < 0 or strategy.max() > sp.num_steps):
        raise PreconditionError("switching times must lie in 0..N")
    if np.any(np.diff(strategy, axis=0) < 0):
        raise PreconditionError("switching times must be nondecreasing")
    for i, row in enumerate(strategy):
        if not is_stopping_time(sp.filtration, row):
            raise PreconditionError(f"switch {i + 1} is not a G-stopping time")
    return strategy


def _profit_paths(sp, strategies):
    """Pathwise profit for a batch of strategies, shape ``(S, n_leaves)``."""
    tree = sp.tree
    n = tree.num_steps
    dt = tree.dt
    psi1 = path_table(tree, sp.psi1)
    psi2 = path_table(tree, sp.psi2)
    D = path_table(tree, sp.stop_cost)
    A = path_table(tree, sp.start_cost)
    leaves = np.arange(tree.n_leaves)
    S, r = strategies.shape[:2]
    switches_by = np.zeros((S, n, tree.n_leaves), dtype=np.intp)
    cost = np.zeros((S, tree.n_leaves))
    for i in range(r):
        tau = strategies[:, i, :]
        switches_by += tau[:, None, :] <= np.arange(n)[None, :, None]
        table = D if i % 2 == 0 else A
        cost += np.where(tau < n, table[np.minimum(tau, n), leaves], 0.0)
    is_open = switches_by % 2 == 0
    running = np.where(is_open, psi1[None], psi2[None]).sum(axis=1) * dt
    return running - cost


def profit(sp, strategy):
    """Expected profit of a strategy, net of switching costs."""
    strategy = validate_strategy(sp, strategy)
    paths = _profit_paths(sp, strategy[None])[0]
    return float(np.dot(sp.tree.path_prob[-1], paths))


def profits(sp, strategies):
    """Expected profits for an array of strategies of shape ``(S, n_switches, n_leaves)``."""
    strategies = np.asarray(strategies, dtype=np.intp)
    if strategies.shape[1] == 0:
        strategies = np.full((strategies.shape[0], 1, sp.tree.n_leaves), sp.num_steps)
    return _profit_paths(sp, strategies) @ sp.tree.path_prob[-1]


@dataclass
class Decomposition:
    Y1: list
    Y2: list
    K_plus: list
    K_minus: list
    solution: object

    @property
    def Y(self):
        return [a - b for a, b in zip(self.Y1, self.Y2)]


def decompose(sp):
    """Split the reflected solution into the open-mode and closed-mode values."""
    problem = sp.as_problem()
    sol = solve_constant_driver(problem)
    tree = sp.tree
    n = tree.num_steps
    dt = tree.dt
    Y1 = [None] * (n + 1)
    Y2 = [None] * (n + 1)
    Y1[n] = np.zeros(tree.n_leaves)
    Y2[n] = np.zeros(tree.n_leaves)
    for k in range(n - 1, -1, -1):
        par = tree.parent[k + 1]
        dkp = np.zeros(tree.n_nodes[k])
        dkm = np.zeros(tree.n_nodes[k])
        dkp[par] = sol.K_plus[k + 1] - sol.K_plus[k][par]
        dkm[par] = sol.K_minus[k + 1] - sol.K_minus[k][par]
        Y1[k] = cond_expect_F(tree, Y1[k + 1], k) + sp.psi1[k] * dt + dkp
        Y2[k] = cond_expect_F(tree, Y2[k + 1], k) + sp.psi2[k] * dt + dkm
    return Decomposition(Y1, Y2, sol.K_plus, sol.K_minus, sol)


def verify_decomposition(sp, dec):
    """Residuals of ``Y = Y1 - Y2`` and of the two one-sided systems."""
    G = sp.filtration
    prob = dec.solution
    y_gap = max(float(np.max(np.abs(a - b))) for a, b in zip(dec.Y, prob.Y))
    y1 = [np.asarray(v) for v in _cond(sp, dec.Y1)]
    y2 = [np.asarray(v) for v in _cond(sp, dec.Y2)]
    d = _cond(sp, sp.stop_cost)
    a = _cond(sp, sp.start_cost)
    slack1 = min(float(np.min(u - (v - w))) for u, v, w in zip(y1, y2, d))
    slack2 = min(float(np.min(v - (u - w))) for u, v, w in zip(y1, y2, a))
    n = sp.num_steps
    flat1 = flat2 = 0.0
    kp = prob.k_atoms(G, "plus")
    km = prob.k_atoms(G, "minus")
    for k in range(n):
        up = G.atom_parent[k + 1]
        inc_p = np.zeros(G.n_atoms[k])
        inc_m = np.zeros(G.n_atoms[k])
        inc_p[up] = kp[k + 1] - kp[k][up]
        inc_m[up] = km[k + 1] - km[k][up]
        flat1 = max(flat1, float(np.max(np.abs((y1[k] - y2[k] + d[k]) * inc_p))))
        flat2 = max(flat2, float(np.max(np.abs((y2[k] - y1[k] + a[k]) * inc_m))))
    return {"identity": y_gap, "slack1": slack1, "slack2": slack2, "flat_off1": flat1, "flat_off2": flat2}


def _cond(sp, process):
    return [cond_expect_G(sp.filtration, process[k], k) for k in range(len(process))]


def optimal_strategy(sp, dec=None, tol=SLACK_TOL):
    """Alternating first hits of the conditional switching boundaries."""
    dec = decompose(sp) if dec is None else dec
    G = sp.filtration
    n = sp.num_steps
    ybar = _cond(sp, dec.Y)
    d = _cond(sp, sp.stop_cost)
    a = _cond(sp, sp.start_cost)
    close_hit = np.stack([(ybar[k] + d[k] <= tol)[G.leaf_atoms[k]] for k in range(n + 1)])
    open_hit = np.stack([(a[k] - ybar[k] <= tol)[G.leaf_atoms[k]] for k in range(n + 1)])
    rows = []
    current = np.zeros(sp.tree.n_leaves, dtype=np.intp)
    levels = np.arange(n + 1)[:, None]
    while True:
        hits = close_hit if len(rows) % 2 == 0 else open_hit
        eligible = hits & (levels >= current[None, :])
        nxt = np.where(eligible.any(axis=0), eligible.argmax(axis=0), n)
        if np.all(nxt == n):
            break
        rows.append(nxt)
        current = nxt
    if not rows:
        rows.append(np.full(sp.tree.n_leaves, n, dtype=np.intp))
    return np.stack(rows).astype(np.intp)


# enumeration ------------------------------------------------------------------


def count_strategies(filtration, max_switches, level=0, atom=0):
    memo = {}

    def count(k, g, r):
        if k == filtration.num_steps or r == 0:
            return 1
        key = (k, g, r)
        if key not in memo:
            memo[key] = sum(
                math.prod(count(k + 1, int(c), r - j) for c in filtration.children[k][g]) for j in range(r + 1)
            )
        return memo[key]

    return count(level, atom, max_switches)


def enumerate_strategies(sp, max_switches, cap=DEFAULT_ENUMERATION_CAP):
    """Every nondecreasing tuple of ``max_switches`` G-stopping times (unused switches sit at ``N``).

    Returns an int array of shape ``(count, max_switches, n_leaves)``.
    """
    G = sp.filtration
    n = sp.num_steps
    if max_switches == 0:
        return np.zeros((1, 0, sp.tree.n_leaves), dtype=np.intp)
    count = count_strategies(G, max_switches)
    if count > cap:
        raise EnumerationTooLargeError(count, cap)

    def local(k, g, r):
        """Options for the last ``r`` switches inside atom ``g``: shape ``(m, r, leaves_g)``."""
        leaves = G.atom_leaves(k, g)
        if r == 0:
            return np.zeros((1, 0, leaves.size), dtype=np.intp)
        if k == n:
            return np.full((1, r, leaves.size), n, dtype=np.intp)
        blocks = []
        for j in range(r + 1):
            parts = []
            for c in G.children[k][g]:
                c = int(c)
                pos = np.searchsorted(leaves, G.atom_leaves(k + 1, c))
                parts.append((pos, local(k + 1, c, r - j)))
            total = math.prod(opts.shape[0] for _, opts in parts)
            block = np.empty((total, r, leaves.size), dtype=np.intp)
            block[:, :j, :] = k
            for row, combo in enumerate(itertools.product(*(range(o.shape[0]) for _, o in parts))):
                for (pos, opts), choice in zip(parts, combo):
                    block[row][j:, pos] = opts[choice]
            blocks.append(block)
        return np.concatenate(blocks)

    return local(0, 0, max_switches)


def brute_force_value(sp, max_switches=None, cap=DEFAULT_ENUMERATION_CAP):
    """``(best profit, best strategy)`` over every enumerated strategy."""
    max_switches = sp.num_steps if max_switches is None else max_switches
    strategies = enumerate_strategies(sp, max_switches, cap)
    values = profits(sp, strategies)
    best = int(np.argmax(values))
    return float(values[best]), strategies[best]

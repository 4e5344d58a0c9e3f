"""Finite filtered probability spaces on non-recombining scenario trees.

Conventions used across the package:

* An *F-process* is a list of numpy arrays, one per level ``k``, indexed by the
  level-``k`` nodes of a :class:`ScenarioTree`.
* A *G-process* is a list of numpy arrays, one per level, indexed by the atoms
  of a :class:`SubFiltration` at that level.
* A *stopping time* is an integer array over the leaves (the sample space),
  giving the stopping level on each path.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import (
    EnumerationTooLargeError,
    InvalidFiltrationError,
    InvalidTreeError,
    RepresentationError,
)

PROB_TOL = 1e-12
REPRESENTATION_TOL = 1e-10
DEFAULT_ENUMERATION_CAP = 10**6


class ScenarioTree:
    """Non-recombining event tree with branch probabilities and Brownian increments.

    Parameters
    ----------
    parents, probs, increments : sequences of length ``N``
        Entry ``k - 1`` describes the level-``k`` nodes: index of the parent
        node at level ``k - 1``, probability of the branch leading to the node,
        and the increment of the driving martingale on that branch.
    horizon : float
        Terminal time ``T``; the grid is uniform with ``dt = T / N``.
    """

    def __init__(self, parents, probs, increments, horizon=1.0):
        if not (len(parents) == len(probs) == len(increments)):
            raise InvalidTreeError("parents, probs and increments must have one entry per level")
        if len(parents) < 1:
            raise InvalidTreeError("a scenario tree needs at least one step")
        if not horizon > 0:
            raise InvalidTreeError("horizon must be positive")
        self.num_steps = len(parents)
        self.horizon = float(horizon)
        self.dt = self.horizon / self.num_steps

        self.parent = [np.zeros(0, dtype=np.intp)]
        self.prob = [np.ones(1)]
        self.increment = [np.zeros(1)]
        self.n_nodes = [1]
        for k, (par, pr, inc) in enumerate(zip(parents, probs, increments), start=1):
            par = np.asarray(par, dtype=np.intp)
            pr = np.asarray(pr, dtype=float)
            inc = np.asarray(inc, dtype=float)
            if par.ndim != 1 or par.shape != pr.shape or par.shape != inc.shape:
                raise InvalidTreeError(f"level {k}: parent/prob/increment arrays differ in shape")
            if par.size and (par.min() < 0 or par.max() >= self.n_nodes[-1]):
                raise InvalidTreeError(f"level {k}: parent index out of range")
            self.parent.append(par)
            self.prob.append(pr)
            self.increment.append(inc)
            self.n_nodes.append(par.size)
        self._validate()

        self.path_prob = [np.ones(1)]
        self.w = [np.zeros(1)]
        for k in range(1, self.num_steps + 1):
            self.path_prob.append(self.path_prob[k - 1][self.parent[k]] * self.prob[k])
            self.w.append(self.w[k - 1][self.parent[k]] + self.increment[k])
        self.times = np.arange(self.num_steps + 1) * self.dt
        self._ancestor_cache = {}
        self.leaf_ancestors = [self.ancestors(self.num_steps, k) for k in range(self.num_steps + 1)]

    def _validate(self):
        for k in range(self.num_steps):
            par, pr, inc = self.parent[k + 1], self.prob[k + 1], self.increment[k + 1]
            counts = np.bincount(par, minlength=self.n_nodes[k])
            if np.any(counts == 0):
                node = int(np.flatnonzero(counts == 0)[0])
                raise InvalidTreeError(f"level {k}: node {node} has no children")
            single = counts[par] == 1
            if np.any(pr <= 0) or np.any(pr > 1) or np.any((pr >= 1) & ~single):
                raise InvalidTreeError(f"level {k + 1}: branch probabilities must lie in (0, 1)")
            total = np.bincount(par, weights=pr, minlength=self.n_nodes[k])
            if np.max(np.abs(total - 1.0)) > PROB_TOL:
                raise InvalidTreeError(f"level {k}: branch probabilities do not sum to one")
            drift = np.bincount(par, weights=pr * inc, minlength=self.n_nodes[k])
            if np.max(np.abs(drift)) > PROB_TOL:
                raise InvalidTreeError(f"level {k}: increments are not centred (martingale property)")

    # constructors ------------------------------------------------------------

    @classmethod
    def binary(cls, num_steps, horizon=1.0, up_prob=0.5):
        """Binary tree; with the default ``up_prob`` increments are ``+-sqrt(dt)``."""
        return cls._binary(num_steps, horizon, lambda n: np.full(n, float(up_prob)))

    @classmethod
    def random_binary(cls, num_steps, horizon=1.0, rng=None, prob_range=(0.2, 0.8)):
        """Binary tree with random up-probabilities per node.

        Increments are scaled so each branch pair has mean zero and variance ``dt``.
        """
        rng = np.random.default_rng(rng)
        lo, hi = prob_range
        return cls._binary(num_steps, horizon, lambda n: rng.uniform(lo, hi, size=n))

    @classmethod
    def _binary(cls, num_steps, horizon, draw):
        dt = horizon / num_steps
        parents, probs, increments = [], [], []
        n = 1
        for _ in range(num_steps):
            p = draw(n)
            up = np.sqrt(dt * (1 - p) / p)
            down = -np.sqrt(dt * p / (1 - p))
            parents.append(np.repeat(np.arange(n), 2))
            probs.append(np.column_stack([p, 1 - p]).ravel())
            increments.append(np.column_stack([up, down]).ravel())
            n *= 2
        return cls(parents, probs, increments, horizon)

    @classmethod
    def multinomial(cls, num_steps, branching, horizon=1.0):
        """Symmetric ``branching``-ary tree with equally likely, centred increments of variance ``dt``."""
        if branching < 1:
            raise InvalidTreeError("branching must be at least 1")
        dt = horizon / num_steps
        if branching == 1:
            levels = np.zeros(1)
        else:
            levels = np.arange(branching) - (branching - 1) / 2
            levels = levels * np.sqrt(dt / np.mean(levels**2))
        parents, probs, increments = [], [], []
        n = 1
        for _ in range(num_steps):
            parents.append(np.repeat(np.arange(n), branching))
            probs.append(np.full(n * branching, 1.0 / branching))
            increments.append(np.tile(levels, n))
            n *= branching
        return cls(parents, probs, increments, horizon)

    @classmethod
    def deterministic(cls, num_steps, horizon=1.0):
        """Single-path tree (one child per node, zero increments)."""
        return cls.multinomial(num_steps, 1, horizon)

    @classmethod
    def from_dict(cls, data):
        levels = data["levels"]
        return cls(
            [lv["parent"] for lv in levels],
            [lv["prob"] for lv in levels],
            [lv["increment"] for lv in levels],
            data.get("horizon", 1.0),
        )

    def to_dict(self):
        return {
            "horizon": self.horizon,
            "levels": [
                {
                    "parent": self.parent[k].tolist(),
                    "prob": self.prob[k].tolist(),
                    "increment": self.increment[k].tolist(),
                }
                for k in range(1, self.num_steps + 1)
            ],
        }

    # structure ---------------------------------------------------------------

    @property
    def n_leaves(self):
        return self.n_nodes[-1]

    @property
    def is_binary(self):
        return all(
            np.all(np.bincount(self.parent[k + 1], minlength=self.n_nodes[k]) == 2)
            for k in range(self.num_steps)
        )

    def ancestors(self, level, target):
        """Index of the level-``target`` ancestor of every level-``level`` node."""
        if not 0 <= target <= level <= self.num_steps:
            raise IndexError(f"invalid ancestor query ({level} -> {target})")
        key = (level, target)
        if key not in self._ancestor_cache:
            idx = np.arange(self.n_nodes[level])
            for k in range(level, target, -1):
                idx = self.parent[k][idx]
            self._ancestor_cache[key] = idx
        return self._ancestor_cache[key]

    def first_leaf(self, level):
        """One representative leaf below every level-``level`` node."""
        anc = self.leaf_ancestors[level]
        first = np.full(self.n_nodes[level], -1, dtype=np.intp)
        first[anc[::-1]] = np.arange(anc.size)[::-1]
        return first

    def check_level(self, level, top=None):
        top = self.num_steps if top is None else top
        if not 0 <= level <= top:
            raise IndexError(f"level {level} outside 0..{top}")

    def constant(self, value=0.0):
        """F-process equal to ``value`` everywhere."""
        return [np.full(n, float(value)) for n in self.n_nodes]

    def evaluate(self, fn):
        """F-process ``fn(t, w)`` evaluated at every node (``w`` is the cumulative increment)."""
        return [
            np.broadcast_to(np.asarray(fn(self.times[k], self.w[k]), dtype=float), (n,)).copy()
            for k, n in enumerate(self.n_nodes)
        ]

    def expectation(self, values, level=None):
        """Unconditional mean of a level array (defaults to the leaves)."""
        level = self.num_steps if level is None else level
        return float(np.dot(self.path_prob[level], values))

    def __repr__(self):
        return f"ScenarioTree(num_steps={self.num_steps}, horizon={self.horizon}, leaves={self.n_leaves})"


class SubFiltration:
    """Nondecreasing coarsening ``G`` of the tree filtration.

    ``atoms[k]`` maps every level-``k`` node to the id of the ``G_k`` atom that
    contains it. Atom ids at each level must be ``0..m_k - 1`` with no gaps.
    """

    def __init__(self, tree, atoms):
        self.tree = tree
        if len(atoms) != tree.num_steps + 1:
            raise InvalidFiltrationError("need one atom map per level 0..N")
        self.atoms = []
        self.n_atoms = []
        for k, amap in enumerate(atoms):
            amap = np.asarray(amap, dtype=np.intp)
            if amap.shape != (tree.n_nodes[k],):
                raise InvalidFiltrationError(f"level {k}: atom map must cover the {tree.n_nodes[k]} nodes")
            m = int(amap.max()) + 1 if amap.size else 0
            if amap.min() < 0 or np.any(np.bincount(amap, minlength=m) == 0):
                raise InvalidFiltrationError(f"level {k}: atom ids must be 0..m-1 with no empty atom")
            self.atoms.append(amap)
            self.n_atoms.append(m)

        self.atom_prob = [
            np.bincount(self.atoms[k], weights=tree.path_prob[k], minlength=self.n_atoms[k])
            for k in range(tree.num_steps + 1)
        ]
        self.atom_parent = [np.zeros(0, dtype=np.intp)]
        for k in range(1, tree.num_steps + 1):
            self.atom_parent.append(self._parent_atoms(k))
        self.leaf_atoms = [self.atoms[k][tree.leaf_ancestors[k]] for k in range(tree.num_steps + 1)]
        self._children = None
        self._leaves = {}

    def _parent_atoms(self, k):
        up = self.atoms[k - 1][self.tree.parent[k]]
        m = self.n_atoms[k]
        lo = np.full(m, np.iinfo(np.intp).max)
        hi = np.full(m, -1)
        np.minimum.at(lo, self.atoms[k], up)
        np.maximum.at(hi, self.atoms[k], up)
        bad = np.flatnonzero(lo != hi)
        if bad.size:
            raise InvalidFiltrationError(
                f"level {k}: atom {int(bad[0])} merges paths that were separated at level {k - 1}"
            )
        return lo

    @classmethod
    def full(cls, tree):
        """``G = F``: every node is its own atom."""
        return cls(tree, [np.arange(n) for n in tree.n_nodes])

    @classmethod
    def trivial(cls, tree):
        """Deterministic scenario: one atom per level."""
        return cls(tree, [np.zeros(n, dtype=np.intp) for n in tree.n_nodes])

    @classmethod
    def delayed(cls, tree, delay):
        """``G_k = F_{max(k - delay, 0)}``."""
        if delay < 0:
            raise InvalidFiltrationError("delay must be nonnegative")
        return cls(tree, [tree.ancestors(k, max(k - delay, 0)) for k in range(tree.num_steps + 1)])

    @classmethod
    def from_dict(cls, tree, data):
        return cls(tree, data["atoms"])

    def to_dict(self):
        return {"atoms": [a.tolist() for a in self.atoms]}

    @property
    def num_steps(self):
        return self.tree.num_steps

    @property
    def children(self):
        """``children[k][g]``: ids of the level-``k+1`` atoms refining atom ``g``."""
        if self._children is None:
            self._children = []
            for k in range(self.num_steps):
                order = np.argsort(self.atom_parent[k + 1], kind="stable")
                split = np.cumsum(np.bincount(self.atom_parent[k + 1], minlength=self.n_atoms[k]))[:-1]
                self._children.append(np.split(order, split))
        return self._children

    def atom_leaves(self, level, atom):
        """Sorted leaf indices inside an atom."""
        key = (level, atom)
        if key not in self._leaves:
            self._leaves[key] = np.flatnonzero(self.leaf_atoms[level] == atom)
        return self._leaves[key]

    def __repr__(self):
        return f"SubFiltration(atoms per level={self.n_atoms})"


# conditional expectations -----------------------------------------------------


def cond_expect_F(tree, values, level):
    """``E[X | F_level]`` for ``X`` given on the level ``level + 1`` nodes."""
    tree.check_level(level, tree.num_steps - 1)
    values = np.asarray(values, dtype=float)
    return np.bincount(
        tree.parent[level + 1], weights=tree.prob[level + 1] * values, minlength=tree.n_nodes[level]
    )


def cond_expect_G(filtration, values, level):
    """``E[X | G_level]`` for ``X`` given on the level-``level`` nodes; one value per atom."""
    filtration.tree.check_level(level)
    weighted = filtration.tree.path_prob[level] * np.asarray(values, dtype=float)
    sums = np.bincount(filtration.atoms[level], weights=weighted, minlength=filtration.n_atoms[level])
    return sums / filtration.atom_prob[level]


def lift(filtration, atom_values, level):
    """View a ``G_level``-measurable atom array node by node."""
    return np.asarray(atom_values, dtype=float)[filtration.atoms[level]]


def atom_expect_next(filtration, values, level):
    """``E[R | G_level]`` for ``R`` given on the atoms of ``G_{level+1}``."""
    filtration.tree.check_level(level, filtration.num_steps - 1)
    weighted = filtration.atom_prob[level + 1] * np.asarray(values, dtype=float)
    sums = np.bincount(filtration.atom_parent[level + 1], weights=weighted, minlength=filtration.n_atoms[level])
    return sums / filtration.atom_prob[level]


def project(filtration, process):
    """Project a whole F-process onto ``G`` level by level."""
    return [cond_expect_G(filtration, process[k], k) for k in range(len(process))]


def group_spread(labels, values, m=None):
    """Largest range of ``values`` within groups sharing a label."""
    m = int(labels.max()) + 1 if m is None else m
    lo = np.full(m, np.inf)
    hi = np.full(m, -np.inf)
    np.minimum.at(lo, labels, values)
    np.maximum.at(hi, labels, values)
    seen = np.isfinite(lo)
    return float(np.max(hi[seen] - lo[seen]))


def atom_spread(filtration, values, level):
    """Largest within-atom range of a node array (0 iff ``G_level``-measurable)."""
    amap = filtration.atoms[level]
    m = filtration.n_atoms[level]
    lo = np.full(m, np.inf)
    hi = np.full(m, -np.inf)
    np.minimum.at(lo, amap, values)
    np.maximum.at(hi, amap, values)
    return float(np.max(hi - lo))


def martingale_coeff(tree, values, level):
    """Integrand ``Z`` at level ``level`` representing ``X`` on level ``level + 1``.

    Solves ``X(child) = E[X | F_level] + Z * dB(child)`` node by node. Exact on
    binary nodes; single-child nodes get ``Z = 0``. Wider nodes must be exactly
    representable or :class:`RepresentationError` is raised.
    """
    values = np.asarray(values, dtype=float)
    mean = cond_expect_F(tree, values, level)
    par, pr, inc = tree.parent[level + 1], tree.prob[level + 1], tree.increment[level + 1]
    dev = values - mean[par]
    num = np.bincount(par, weights=pr * inc * dev, minlength=tree.n_nodes[level])
    den = np.bincount(par, weights=pr * inc * inc, minlength=tree.n_nodes[level])
    z = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    resid = np.abs(dev - z[par] * inc)
    if resid.size and resid.max() > REPRESENTATION_TOL * (1.0 + np.abs(values).max()):
        node = int(par[np.argmax(resid)])
        raise RepresentationError(
            f"level {level}, node {node}: martingale increment not representable by the driving noise "
            f"(residual {resid.max():.3e})"
        )
    return z


# stopping times ---------------------------------------------------------------


def is_stopping_time(filtration, tau):
    """True iff ``tau`` (levels per leaf) is a ``G``-stopping time."""
    tau = np.asarray(tau)
    n = filtration.num_steps
    if tau.shape != (filtration.tree.n_leaves,) or tau.min() < 0 or tau.max() > n:
        return False
    for k in range(n + 1):
        if group_spread(filtration.leaf_atoms[k], (tau <= k).astype(float), filtration.n_atoms[k]) != 0.0:
            return False
    return True


def _count_local(filtration, level, atom, memo):
    key = (level, atom)
    if key not in memo:
        if level == filtration.num_steps:
            memo[key] = 1
        else:
            memo[key] = 1 + math.prod(
                _count_local(filtration, level + 1, int(c), memo) for c in filtration.children[level][atom]
            )
    return memo[key]


def count_stopping_times(filtration, from_level=0, atom=None):
    """Number of ``G``-stopping times ``>= from_level`` (globally, or inside one atom)."""
    filtration.tree.check_level(from_level)
    memo = {}
    if atom is not None:
        return _count_local(filtration, from_level, atom, memo)
    return math.prod(_count_local(filtration, from_level, g, memo) for g in range(filtration.n_atoms[from_level]))


def local_stopping_times(filtration, level, atom, cap=DEFAULT_ENUMERATION_CAP):
    """All stopping times started inside one ``G_level`` atom.

    Returns an int array of shape ``(count, len(atom_leaves))`` whose columns
    follow ``filtration.atom_leaves(level, atom)``.
    """
    count = count_stopping_times(filtration, level, atom)
    if count > cap:
        raise EnumerationTooLargeError(count, cap)
    return _local(filtration, level, atom)


def _local(filtration, level, atom):
    leaves = filtration.atom_leaves(level, atom)
    stop_now = np.full((1, leaves.size), level, dtype=np.int16)
    if level == filtration.num_steps:
        return stop_now
    parts = []
    for child in filtration.children[level][atom]:
        child = int(child)
        pos = np.searchsorted(leaves, filtration.atom_leaves(level + 1, child))
        parts.append((pos, _local(filtration, level + 1, child)))
    total = math.prod(opts.shape[0] for _, opts in parts)
    deferred = np.empty((total, leaves.size), dtype=np.int16)
    for row, combo in enumerate(itertools.product(*(range(opts.shape[0]) for _, opts in parts))):
        for (pos, opts), choice in zip(parts, combo):
            deferred[row, pos] = opts[choice]
    return np.vstack([stop_now, deferred])


def enumerate_stopping_times(filtration, from_level=0, cap=DEFAULT_ENUMERATION_CAP):
    """Every ``G``-stopping time with values in ``from_level..N``.

    Each atom at ``from_level`` either stops there or defers independently to
    the atoms refining it. Returns an int array of shape ``(count, n_leaves)``.
    """
    count = count_stopping_times(filtration, from_level)
    if count > cap:
        raise EnumerationTooLargeError(count, cap)
    n_leaves = filtration.tree.n_leaves
    parts = [
        (filtration.atom_leaves(from_level, g), _local(filtration, from_level, g))
        for g in range(filtration.n_atoms[from_level])
    ]
    out = np.empty((count, n_leaves), dtype=np.int16)
    for row, combo in enumerate(itertools.product(*(range(opts.shape[0]) for _, opts in parts))):
        for (leaves, opts), choice in zip(parts, combo):
            out[row, leaves] = opts[choice]
    return out

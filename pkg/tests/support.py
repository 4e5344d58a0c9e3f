"""Instance generators and independent reference implementations for the tests.

The oracles here walk the tree node by node with plain Python loops so they
share no code path with the vectorised package internals.
"""

from __future__ import annotations

import numpy as np

from crbsde import ConstantDriver, DCRBSDEProblem, FunctionDriver, ScenarioTree, SubFiltration

KINDS = ("full", "trivial", "delayed")


def make_filtration(tree, kind):
    if kind == "full":
        return SubFiltration.full(tree)
    if kind == "trivial":
        return SubFiltration.trivial(tree)
    if kind == "delayed":
        return SubFiltration.delayed(tree, 1)
    raise ValueError(kind)


def random_process(tree, rng, scale=1.0, levels=None, loc=0.0):
    levels = tree.num_steps + 1 if levels is None else levels
    return [loc + scale * rng.normal(size=tree.n_nodes[k]) for k in range(levels)]


def random_band(tree, rng, width=(0.15, 0.6), center=0.25):
    lower = [rng.uniform(-center - 0.3, -center + 0.1, size=m) for m in tree.n_nodes]
    upper = [lo + rng.uniform(*width, size=lo.size) for lo in lower]
    return lower, upper


def inside(rng, lower, upper, margin=0.0):
    """Leaf values strictly inside ``[lower + margin, upper - margin]``."""
    theta = rng.uniform(0, 1, size=lower.size)
    return lower + margin + theta * (upper - lower - 2 * margin)


def random_problem(rng, n=3, kind="full", driver="constant", tree=None, lam=0.5, drift=1.0):
    """Random conditional problem satisfying separation and the terminal sandwich pointwise."""
    tree = ScenarioTree.random_binary(n, 1.0, rng) if tree is None else tree
    G = make_filtration(tree, kind)
    lower, upper = random_band(tree, rng)
    xi = inside(rng, lower[-1], upper[-1])
    c = random_process(tree, rng, drift, levels=n)
    if driver == "constant":
        f = ConstantDriver(c)
        return DCRBSDEProblem(tree, G, xi, f, lower, upper)
    if driver == "lipschitz":
        l1, l2 = rng.uniform(0.1, 1.0, size=2)
        l1, l2 = lam * l1 / (l1 + l2), lam * l2 / (l1 + l2)
        cc = [arr.copy() for arr in c]
        lookup = {float(t): k for k, t in enumerate(tree.times)}

        def fn(t, w, y, z):
            return cc[lookup[float(t)]] + l1 * np.sin(3 * y) / 3 + l2 * z * np.cos(w)

        return DCRBSDEProblem(tree, G, xi, FunctionDriver(fn, lipschitz=l1 + l2), lower, upper)
    raise ValueError(driver)


# ------------------------------------------------------------------ oracles


def children_lists(tree):
    out = []
    for k in range(tree.num_steps):
        kids = [[] for _ in range(tree.n_nodes[k])]
        for j, p in enumerate(tree.parent[k + 1]):
            kids[int(p)].append(j)
        out.append(kids)
    return out


def leaf_owner(tree, level):
    """Ancestor at ``level`` of every leaf, by walking parent pointers one leaf at a time."""
    n = tree.num_steps
    owner = []
    for leaf in range(tree.n_leaves):
        node = leaf
        for k in range(n, level, -1):
            node = int(tree.parent[k][node])
        owner.append(node)
    return owner


def path_measure_expectation(tree, leaf_values, level):
    """``E[X | F_level]`` by summing path probabilities over each subtree."""
    owner = leaf_owner(tree, level)
    num = [0.0] * tree.n_nodes[level]
    den = [0.0] * tree.n_nodes[level]
    for leaf, node in enumerate(owner):
        p = float(tree.path_prob[-1][leaf])
        num[node] += p * float(leaf_values[leaf])
        den[node] += p
    return np.array([a / b for a, b in zip(num, den)])


def atom_mean(tree, G, values, level):
    m = G.n_atoms[level]
    num = [0.0] * m
    den = [0.0] * m
    for node in range(tree.n_nodes[level]):
        g = int(G.atoms[level][node])
        p = float(tree.path_prob[level][node])
        num[g] += p * float(values[node])
        den[g] += p
    return [a / b for a, b in zip(num, den)]


def reflected_recursion(tree, G, f, xi, lower, upper, sides="both"):
    """Conditionally reflected recursion for a driver independent of ``(y, z)``.

    With ``G = F`` this is the classical nodewise doubly reflected scheme; with
    trivial ``G`` it is the mean-reflected one. ``sides="lower"`` keeps only
    the lower barrier.
    """
    kids = children_lists(tree)
    n = tree.num_steps
    dt = tree.dt
    Y = [None] * (n + 1)
    Y[n] = [float(v) for v in xi]
    for k in range(n - 1, -1, -1):
        cont = []
        for node in range(tree.n_nodes[k]):
            s = sum(float(tree.prob[k + 1][j]) * Y[k + 1][j] for j in kids[k][node])
            cont.append(s + float(f[k][node]) * dt)
        mbar = atom_mean(tree, G, cont, k)
        lbar = atom_mean(tree, G, lower[k], k)
        ubar = atom_mean(tree, G, upper[k], k)
        row = []
        for node in range(tree.n_nodes[k]):
            g = int(G.atoms[k][node])
            target = max(mbar[g], lbar[g])
            if sides == "both":
                target = min(target, ubar[g])
            row.append(cont[node] + target - mbar[g])
        Y[k] = row
    return [np.array(r) for r in Y]


def snell_bruteforce(G, phi, level):
    """``max_tau E[phi_tau | G_level]`` atomwise by listing every leaf map and filtering."""
    import itertools

    tree = G.tree
    n = tree.num_steps
    out = []
    for g in range(G.n_atoms[level]):
        leaves = [int(x) for x in np.flatnonzero(G.leaf_atoms[level] == g)]
        best = -np.inf
        for assign in itertools.product(range(level, n + 1), repeat=len(leaves)):
            tau = dict(zip(leaves, assign))
            if not _measurable(G, tau):
                continue
            tot = sum(float(tree.path_prob[-1][l]) * float(phi[tau[l]][G.leaf_atoms[tau[l]][l]]) for l in leaves)
            mass = sum(float(tree.path_prob[-1][l]) for l in leaves)
            best = max(best, tot / mass)
        out.append(best)
    return np.array(out)


def _measurable(G, tau):
    for k in range(G.num_steps + 1):
        seen = {}
        for leaf, t in tau.items():
            g = int(G.leaf_atoms[k][leaf])
            flag = t <= k
            if seen.setdefault(g, flag) != flag:
                return False
    return True


def switching_simulator(sp, strategy):
    """Expected profit by walking every leaf path and toggling the mode by hand."""
    tree = sp.tree
    n = tree.num_steps
    dt = tree.dt
    total = 0.0
    for leaf in range(tree.n_leaves):
        nodes = [0] * (n + 1)
        node = leaf
        for k in range(n, -1, -1):
            nodes[k] = node
            if k:
                node = int(tree.parent[k][node])
        times = sorted(int(t) for t in np.asarray(strategy)[:, leaf])
        value = 0.0
        open_ = True
        idx = 0
        for k in range(n + 1):
            while idx < len(times) and times[idx] == k:
                if k < n:
                    value -= float((sp.stop_cost if open_ else sp.start_cost)[k][nodes[k]])
                    open_ = not open_
                idx += 1
            if k < n:
                value += float((sp.psi1 if open_ else sp.psi2)[k][nodes[k]]) * dt
        total += float(tree.path_prob[-1][leaf]) * value
    return total


def ordered_pair(rng, n=2, kind="trivial", a=0.0, wiggle=False):
    """Two linear problems whose data are ordered, ``p1`` above ``p2``.

    The perturbations are pointwise nonnegative; with ``wiggle`` the second
    driver also gets noise with zero conditional mean, so only the
    conditional ordering survives.
    """
    from crbsde.analysis import LinearDriver
    from crbsde.finprob import cond_expect_G, lift

    tree = ScenarioTree.random_binary(n, 1.0, rng)
    G = make_filtration(tree, kind)
    lo, up = random_band(tree, rng)
    xi = inside(rng, lo[-1], up[-1])
    c = random_process(tree, rng, 1.0, levels=n)
    p1 = DCRBSDEProblem(tree, G, xi, LinearDriver(tree, a, 0.0, c), lo, up)
    dl = [rng.uniform(0, 0.2, m) for m in tree.n_nodes]
    lo2 = [x - d for x, d in zip(lo, dl)]
    up2 = [x - d * rng.uniform(0, 1) for x, d in zip(up, dl)]
    xi2 = np.minimum(np.maximum(xi - rng.uniform(0, 0.2, xi.size), lo2[-1]), up2[-1])
    c2 = [x - rng.uniform(0, 0.3, x.size) for x in c]
    if wiggle:
        for k in range(n):
            noise = rng.normal(0, 0.5, tree.n_nodes[k])
            c2[k] = c2[k] + noise - lift(G, cond_expect_G(G, noise, k), k)
    p2 = DCRBSDEProblem(tree, G, xi2, LinearDriver(tree, a, 0.0, c2), lo2, up2)
    return p1, p2

"""Input coercion helpers shared by the public modules."""

from __future__ import annotations

import numpy as np


def as_f_process(tree, value, name, levels=None):
    """Coerce ``value`` into a list of node arrays.

    Accepts a scalar, a callable ``fn(t, w)`` evaluated at every node, or a
    sequence of per-level arrays (scalars broadcast).
    """
    levels = tree.num_steps + 1 if levels is None else levels
    if callable(value):
        proc = tree.evaluate(value)[:levels]
    elif np.isscalar(value):
        proc = [np.full(n, float(value)) for n in tree.n_nodes[:levels]]
    else:
        if len(value) < levels:
            raise ValueError(f"{name}: expected {levels} levels, got {len(value)}")
        proc = []
        for k in range(levels):
            arr = np.asarray(value[k], dtype=float)
            try:
                arr = np.broadcast_to(arr, (tree.n_nodes[k],)).copy()
            except ValueError:
                raise ValueError(f"{name}: level {k} has shape {arr.shape}, expected ({tree.n_nodes[k]},)") from None
            proc.append(arr)
    for k, arr in enumerate(proc):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: non-finite value at level {k}")
    return proc


def as_leaf_array(tree, value, name):
    """Terminal values on the leaves: scalar, callable ``fn(T, w)`` or array."""
    if callable(value):
        arr = np.asarray(value(tree.horizon, tree.w[-1]), dtype=float)
    else:
        arr = np.asarray(value, dtype=float)
    try:
        arr = np.broadcast_to(arr, (tree.n_leaves,)).copy()
    except ValueError:
        raise ValueError(f"{name}: expected {tree.n_leaves} leaf values, got shape {arr.shape}") from None
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite terminal value")
    return arr


def path_table(tree, process):
    """``table[k, leaf]`` for an F-process given on levels ``0..len(process)-1``."""
    return np.stack([np.asarray(process[k])[tree.leaf_ancestors[k]] for k in range(len(process))])


def sup_diff(a, b):
    return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))

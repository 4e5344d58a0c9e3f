"""Snell envelopes and Dynkin games where both players observe only ``G``.

Rewards are G-processes: one array per level, indexed by the atoms of the
subfiltration. ``xi`` is paid when the maximiser stops first, ``zeta`` when
the minimiser does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, NumericalError, PreconditionError
from .finprob import DEFAULT_ENUMERATION_CAP, atom_expect_next, local_stopping_times

FIXED_POINT_TOL = 1e-12
FAIRNESS_TOL = 1e-10
TIES = ("lower", "upper")


def _as_g_process(filtration, values, name):
    if len(values) != filtration.num_steps + 1:
        raise ValueError(f"{name} must have one array per level 0..{filtration.num_steps}")
    out = []
    for k, v in enumerate(values):
        v = np.broadcast_to(np.asarray(v, dtype=float), (filtration.n_atoms[k],)).copy()
        out.append(v)
    return out


def _check_ties(ties):
    if ties not in TIES:
        raise ValueError(f"ties must be one of {TIES}, got {ties!r}")


def _require_zero_terminal(xi, zeta):
    if np.any(xi[-1] != 0) or np.any(zeta[-1] != 0):
        raise PreconditionError("rewards must vanish at the terminal level (use reward_shift)")


def snell_envelope(filtration, phi):
    """Smallest G-supermartingale dominating ``phi``."""
    phi = _as_g_process(filtration, phi, "phi")
    n = filtration.num_steps
    R = [None] * (n + 1)
    R[n] = phi[n].copy()
    for k in range(n - 1, -1, -1):
        R[k] = np.maximum(phi[k], atom_expect_next(filtration, R[k + 1], k))
    return R


def coupled_families(filtration, xi, zeta, tol=FIXED_POINT_TOL, max_iter=None):
    """Minimal nonnegative pair with ``J = R(J' + xi)`` and ``J' = R(J - zeta)``.

    Built by monotone iteration from zero. Raises :class:`DivergenceError`
    if the iteration does not settle, which happens exactly when the rewards
    cross (``xi > zeta`` somewhere before the horizon).
    """
    xi = _as_g_process(filtration, xi, "xi")
    zeta = _as_g_process(filtration, zeta, "zeta")
    _require_zero_terminal(xi, zeta)
    n = filtration.num_steps
    max_iter = 10 * n if max_iter is None else max_iter
    J = [np.zeros(m) for m in filtration.n_atoms]
    Jp = [np.zeros(m) for m in filtration.n_atoms]
    for _ in range(max_iter):
        J_new = snell_envelope(filtration, [a + b for a, b in zip(Jp, xi)])
        Jp_new = snell_envelope(filtration, [a - b for a, b in zip(J, zeta)])
        change = max(
            max(float(np.max(np.abs(a - b))) for a, b in zip(J_new, J)),
            max(float(np.max(np.abs(a - b))) for a, b in zip(Jp_new, Jp)),
        )
        J, Jp = J_new, Jp_new
        if change < tol:
            return J, Jp
    raise DivergenceError(f"coupled supermartingale iteration did not settle within {max_iter} sweeps")


@dataclass
class ValueProfile:
    """Lower/upper game values per level and atom, plus the common value when fair."""

    lower: list
    upper: list
    value: list | None
    difference: list | None = None

    @property
    def gap(self):
        return max(float(np.max(u - l)) for l, u in zip(self.lower, self.upper))

    @property
    def fair(self):
        return self.gap <= FAIRNESS_TOL


def game_value_recursive(filtration, xi, zeta, ties="lower"):
    """Backward value of the Dynkin game.

    With ``ties="lower"`` simultaneous stops pay ``xi``, giving
    ``Y_k = max(xi_k, min(zeta_k, E[Y_{k+1} | G_k]))``; ``ties="upper"`` pays
    ``zeta`` and swaps the order. Both agree when ``xi <= zeta``, in which case
    the value is also cross-checked against ``J - J'``.
    """
    _check_ties(ties)
    xi = _as_g_process(filtration, xi, "xi")
    zeta = _as_g_process(filtration, zeta, "zeta")
    _require_zero_terminal(xi, zeta)
    n = filtration.num_steps
    Y = [None] * (n + 1)
    Y[n] = np.zeros(filtration.n_atoms[n])
    for k in range(n - 1, -1, -1):
        cont = atom_expect_next(filtration, Y[k + 1], k)
        if ties == "lower":
            Y[k] = np.maximum(xi[k], np.minimum(zeta[k], cont))
        else:
            Y[k] = np.minimum(zeta[k], np.maximum(xi[k], cont))

    difference = None
    if all(np.all(a <= b) for a, b in zip(xi, zeta)):
        J, Jp = coupled_families(filtration, xi, zeta)
        difference = [a - b for a, b in zip(J, Jp)]
        err = max(float(np.max(np.abs(d - y))) for d, y in zip(difference, Y))
        if err > FAIRNESS_TOL * (1.0 + max(float(np.max(np.abs(y))) for y in Y)):
            raise NumericalError(f"J - J' disagrees with the backward value by {err:.3e}")
    return ValueProfile([y.copy() for y in Y], [y.copy() for y in Y], Y, difference)


def _leaf_table(filtration, process):
    """``table[k, leaf]``: value of a G-process at level ``k`` along every leaf."""
    return np.stack([process[k][filtration.leaf_atoms[k]] for k in range(filtration.num_steps + 1)])


def game_value_bruteforce(filtration, xi, zeta, ties="lower", levels=None, cap=DEFAULT_ENUMERATION_CAP):
    """Lower and upper values by exhausting all pairs of G-stopping times.

    Terminal rewards may be nonzero as long as they agree. Returns two
    G-processes ``(lower, upper)``; entries for levels not in ``levels`` are NaN.
    """
    _check_ties(ties)
    xi = _as_g_process(filtration, xi, "xi")
    zeta = _as_g_process(filtration, zeta, "zeta")
    if np.any(xi[-1] != zeta[-1]):
        raise PreconditionError("terminal rewards must coincide")
    tree = filtration.tree
    n = filtration.num_steps
    levels = range(n + 1) if levels is None else levels
    xi_tab = _leaf_table(filtration, xi)
    zeta_tab = _leaf_table(filtration, zeta)
    lower = [np.full(m, np.nan) for m in filtration.n_atoms]
    upper = [np.full(m, np.nan) for m in filtration.n_atoms]
    for k in levels:
        for g in range(filtration.n_atoms[k]):
            leaves = filtration.atom_leaves(k, g)
            times = local_stopping_times(filtration, k, g, cap=cap).astype(np.intp)
            w = tree.path_prob[n][leaves]
            w = w / w.sum()
            pay_xi = xi_tab[times, leaves]
            pay_zeta = zeta_tab[times, leaves]
            tau = times[:, None, :]
            sigma = times[None, :, :]
            first = tau <= sigma if ties == "lower" else tau < sigma
            payoff = np.where(first, pay_xi[:, None, :], pay_zeta[None, :, :])
            table = payoff @ w
            lower[k][g] = table.min(axis=1).max()
            upper[k][g] = table.max(axis=0).min()
    return lower, upper


def reward_shift(filtration, xi, zeta):
    """Remove a common terminal reward.

    Returns ``(xi', zeta', shift)`` with ``shift_k = E[xi_N | G_k]`` subtracted
    from both rewards; game values of the original pair equal those of the
    shifted pair plus ``shift``.
    """
    xi = _as_g_process(filtration, xi, "xi")
    zeta = _as_g_process(filtration, zeta, "zeta")
    if np.any(xi[-1] != zeta[-1]):
        raise PreconditionError("reward_shift needs equal terminal rewards")
    n = filtration.num_steps
    shift = [None] * (n + 1)
    shift[n] = xi[n].copy()
    for k in range(n - 1, -1, -1):
        shift[k] = atom_expect_next(filtration, shift[k + 1], k)
    xi_s = [a - s for a, s in zip(xi, shift)]
    zeta_s = [a - s for a, s in zip(zeta, shift)]
    xi_s[n] = np.zeros_like(xi_s[n])
    zeta_s[n] = np.zeros_like(zeta_s[n])
    return xi_s, zeta_s, shift

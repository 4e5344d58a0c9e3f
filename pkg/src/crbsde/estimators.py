"""scikit-learn style wrappers around the solvers.

The "data" passed to ``fit`` is a problem object rather than a feature
matrix, except for :class:`SkorokhodReflector`, which maps path matrices.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import skorokhod, solver, switching


class ConditionalReflectedBSDE(BaseEstimator):
    """Solve a :class:`~crbsde.solver.DCRBSDEProblem`.

    Parameters
    ----------
    method : {"backward", "constant", "picard", "penalty"}
    penalty : float, optional
        Penalty level for ``method="penalty"`` (default ``1e4 / dt``).
    tol, max_iter : Picard stopping rule.
    """

    def __init__(self, method="backward", penalty=None, tol=solver.PICARD_TOL, max_iter=solver.PICARD_MAX_ITER):
        self.method = method
        self.penalty = penalty
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, problem, y=None):
        if not isinstance(problem, solver.DCRBSDEProblem):
            raise TypeError("fit expects a DCRBSDEProblem")
        if self.method == "picard":
            sol = solver.solve_picard(problem, tol=self.tol, max_iter=self.max_iter)
        elif self.method == "penalty":
            pen = self.penalty if self.penalty is not None else 1e4 / problem.tree.dt
            sol = solver.solve_penalized(problem, pen)
        else:
            sol = solver.solve(problem, self.method)
        self.problem_ = problem
        self.solution_ = sol
        self.Y_ = sol.Y
        self.Z_ = sol.Z
        self.K_plus_ = sol.K_plus
        self.K_minus_ = sol.K_minus
        self.conditional_value_ = sol.conditional_value(problem.filtration)
        self.diagnostics_ = sol.diagnostics or solver.verify_solution(problem, sol)
        return self

    def predict(self, level=0):
        """``E[Y_level | G_level]`` on every atom."""
        check_is_fitted(self, "solution_")
        return self.conditional_value_[level]

    def score(self, problem=None, y=None):
        """Negative worst dynamics residual (0 is perfect)."""
        check_is_fitted(self, "solution_")
        return -self.diagnostics_.dynamics_residual


class SkorokhodReflector(TransformerMixin, BaseEstimator):
    """Reflect each row of a path matrix into ``[lower, upper]``.

    ``lower``/``upper`` are scalars or arrays of length ``n_times``.
    ``transform`` returns the reflected paths; ``push`` the net push ``k``.
    """

    def __init__(self, lower=0.0, upper=1.0, method="streaming"):
        self.lower = lower
        self.upper = upper
        self.method = method

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.lower_ = np.broadcast_to(np.asarray(self.lower, dtype=float), (X.shape[1],)).copy()
        self.upper_ = np.broadcast_to(np.asarray(self.upper, dtype=float), (X.shape[1],)).copy()
        if np.min(self.upper_ - self.lower_) <= 0:
            raise skorokhod.InvalidBarriersError("upper must exceed lower at every time")
        return self

    def _reflect(self, X):
        check_is_fitted(self, "lower_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} time points, got {X.shape[1]}")
        if self.method == "streaming":
            return skorokhod.two_sided_map(X, self.lower_, self.upper_)
        if self.method == "iterative":
            return skorokhod.iterative_oracle(X, self.lower_, self.upper_)
        if self.method == "direct":
            return skorokhod.two_sided_map_direct(X, self.lower_, self.upper_)
        raise ValueError(f"unknown method {self.method!r}")

    def transform(self, X):
        return self._reflect(X).y

    def push(self, X):
        return self._reflect(X).k


class SwitchingStrategy(BaseEstimator):
    """Optimal starting/stopping schedule for a :class:`~crbsde.switching.SwitchingProblem`."""

    def __init__(self, tol=switching.SLACK_TOL):
        self.tol = tol

    def fit(self, problem, y=None):
        dec = switching.decompose(problem)
        self.problem_ = problem
        self.decomposition_ = dec
        self.Y1_ = dec.Y1
        self.Y2_ = dec.Y2
        self.strategy_ = switching.optimal_strategy(problem, dec, tol=self.tol)
        self.value_ = switching.profit(problem, self.strategy_)
        return self

    def predict(self, problem=None):
        check_is_fitted(self, "strategy_")
        return self.strategy_

import numpy as np
import pytest

from crbsde.errors import NonContractionError, PreconditionError
from crbsde.finprob import ScenarioTree, SubFiltration, cond_expect_F
from crbsde.solver import (
    ConstantDriver,
    DCRBSDEProblem,
    FunctionDriver,
    constraint_violation,
    default_penalty_grid,
    penalization_sweep,
    solve,
    solve_backward,
    solve_constant_driver,
    solve_penalized,
    solve_picard,
    stability_estimate,
    verify_solution,
)
from support import KINDS, make_filtration, random_problem, reflected_recursion


def deterministic_problem(tree):
    return DCRBSDEProblem(tree, SubFiltration.trivial(tree), 0.0, 1.0, -0.2, 0.2)


class TestProblem:
    def test_unconstrained_is_conditional_expectation(self):
        rng = np.random.default_rng(0)
        tree = ScenarioTree.random_binary(3, 1.0, rng)
        xi = rng.uniform(-0.5, 0.5, tree.n_leaves)
        for kind in KINDS:
            p = DCRBSDEProblem(tree, make_filtration(tree, kind), xi, 0.0, -1.0, 1.0)
            s = solve_constant_driver(p)
            expect = xi
            for k in range(2, -1, -1):
                expect = cond_expect_F(tree, expect, k)
                np.testing.assert_allclose(s.Y[k], expect, atol=1e-14)
            assert all(np.all(v == 0) for v in s.K_plus + s.K_minus)
            assert s.diagnostics.passed

    def test_terminal_sandwich(self):
        tree = ScenarioTree.binary(2)
        with pytest.raises(PreconditionError, match="H3"):
            DCRBSDEProblem(tree, SubFiltration.full(tree), 2.0, 0.0, -1.0, 1.0)

    def test_terminal_sandwich_is_conditional(self):
        tree = ScenarioTree.binary(1)
        # pointwise outside on one leaf, inside on average
        DCRBSDEProblem(tree, SubFiltration.trivial(tree), [1.5, -1.3], 0.0, -1.0, 1.0)
        with pytest.raises(PreconditionError, match="atom 0"):
            DCRBSDEProblem(tree, SubFiltration.full(tree), [1.5, -1.3], 0.0, -1.0, 1.0)

    def test_separation(self):
        tree = ScenarioTree.binary(2)
        lower = [np.zeros(1), np.array([0.0, 0.5]), np.zeros(4)]
        with pytest.raises(PreconditionError, match="H2.*level 1, node 1"):
            DCRBSDEProblem(tree, SubFiltration.full(tree), 0.2, 0.0, lower, 0.5)

    def test_lipschitz_declaration(self):
        tree = ScenarioTree.binary(2)
        G = SubFiltration.full(tree)
        with pytest.raises(PreconditionError, match="Lipschitz"):
            DCRBSDEProblem(tree, G, 0.0, FunctionDriver(lambda t, w, y, z: y))
        with pytest.raises(PreconditionError, match="H1"):
            DCRBSDEProblem(tree, G, 0.0, FunctionDriver(lambda t, w, y, z: 3 * y, lipschitz=1.0))
        DCRBSDEProblem(tree, G, 0.0, FunctionDriver(lambda t, w, y, z: 3 * y, lipschitz=3.0))

    def test_foreign_filtration(self):
        t1, t2 = ScenarioTree.binary(2), ScenarioTree.binary(2)
        with pytest.raises(ValueError):
            DCRBSDEProblem(t1, SubFiltration.full(t2), 0.0)

    def test_constant_solver_refuses_state_dependence(self):
        tree = ScenarioTree.binary(2)
        p = DCRBSDEProblem(tree, SubFiltration.full(tree), 0.0, FunctionDriver(lambda t, w, y, z: -y, 1.0))
        with pytest.raises(PreconditionError):
            solve_constant_driver(p)


class TestDeterministicReduction:
    def test_binary_tree(self):
        tree = ScenarioTree.binary(10)
        p = deterministic_problem(tree)
        s = solve(p, "constant")
        ey = np.array([tree.expectation(y, k) for k, y in enumerate(s.Y)])
        assert np.max(np.abs(ey - np.minimum(1 - tree.times, 0.2))) <= 2 * tree.dt
        km = np.array([tree.expectation(v, k) for k, v in enumerate(s.K_minus)])
        assert np.max(np.abs(km - np.minimum(tree.times, 0.8))) <= 2 * tree.dt
        assert all(np.all(v == 0) for v in s.K_plus)
        # trivial G: the pushes are deterministic
        assert all(np.ptp(v) == 0 for v in s.K_minus)

    def test_chain_is_exact_at_grid_points(self):
        tree = ScenarioTree.deterministic(1000)
        s = solve(deterministic_problem(tree))
        assert s.Y[0][0] == pytest.approx(0.2, abs=1e-12)
        assert s.K_minus[-1][0] == pytest.approx(0.8, abs=1e-9)


class TestPicard:
    def test_constant_driver_one_iteration(self):
        rng = np.random.default_rng(1)
        p = random_problem(rng, n=3, kind="delayed")
        a = solve_picard(p)
        b = solve_constant_driver(p)
        assert a.iterations == 1
        for x, y in zip(a.Y, b.Y):
            np.testing.assert_array_equal(x, y)

    def test_linear_decay(self):
        n = 50
        tree = ScenarioTree.deterministic(n)
        p = DCRBSDEProblem(tree, SubFiltration.trivial(tree), 1.0, FunctionDriver(lambda t, w, y, z: -y, 1.0), -5, 5)
        s = solve_picard(p)
        # y' = y backwards from 1: Y_0 = e^{-T}
        assert abs(s.Y[0][0] - np.exp(-1.0)) <= 2 * tree.dt
        assert s.Y[0][0] == pytest.approx((1 + tree.dt) ** -n, rel=1e-9)
        assert s.diagnostics.passed

    @pytest.mark.parametrize("seed", range(5))
    def test_geometric_decay(self, seed):
        rng = np.random.default_rng(seed)
        p = random_problem(rng, n=6, kind=KINDS[seed % 3], driver="lipschitz", lam=0.6)
        s = solve_picard(p)
        h = np.array(s.history)
        h = h[h > 1e-12]
        ratios = h[2:] / h[1:-1]
        assert np.all(ratios <= 0.5 + 2 * p.tree.dt)
        assert s.diagnostics.passed

    def test_agrees_with_backward_sweep(self):
        rng = np.random.default_rng(3)
        for kind in KINDS:
            p = random_problem(rng, n=5, kind=kind, driver="lipschitz")
            a, b = solve_picard(p), solve_backward(p)
            assert max(np.max(np.abs(x - y)) for x, y in zip(a.Y, b.Y)) <= 1e-9

    def test_step_condition(self):
        tree = ScenarioTree.binary(2)
        p = DCRBSDEProblem(tree, SubFiltration.full(tree), 0.0, FunctionDriver(lambda t, w, y, z: 2 * y, 2.0))
        with pytest.raises(PreconditionError, match="refine"):
            solve_picard(p)
        with pytest.raises(PreconditionError):
            solve_backward(p)

    def test_iteration_cap(self):
        rng = np.random.default_rng(4)
        p = random_problem(rng, n=4, driver="lipschitz")
        with pytest.raises(NonContractionError, match="refine"):
            solve_picard(p, max_iter=2)


class TestPenalization:
    def test_inactive_barriers_exact(self):
        rng = np.random.default_rng(0)
        tree = ScenarioTree.random_binary(3, 1.0, rng)
        p = DCRBSDEProblem(tree, SubFiltration.delayed(tree, 1), rng.uniform(-1, 1, 8), 0.3, -10.0, 10.0)
        ref = solve(p)
        for n in (1.0, 10.0, 1e6):
            s = solve_penalized(p, n)
            for a, b in zip(s.Y, ref.Y):
                np.testing.assert_array_equal(a, b)

    def test_one_step_hand_formula(self):
        tree = ScenarioTree.binary(1)
        lower = [np.array([0.5]), np.full(2, -1.0)]
        p = DCRBSDEProblem(tree, SubFiltration.trivial(tree), 0.0, 0.0, lower, 1.0)
        for n in (1.0, 3.0, 100.0):
            s = solve_penalized(p, n)
            h = n * tree.dt
            assert s.Y[0][0] == pytest.approx((0.0 + h * 0.5) / (1 + h))
        assert solve(p).Y[0][0] == pytest.approx(0.5)

    def test_monotone_approach_on_deterministic_reduction(self):
        tree = ScenarioTree.binary(8)
        p = deterministic_problem(tree)
        errors = [abs(solve_penalized(p, n).Y[0][0] - 0.2) for n in default_penalty_grid(tree, range(0, 11))]
        assert all(b < a for a, b in zip(errors, errors[1:]))
        assert errors[-1] < 1e-3

    def test_sweep_inactive(self):
        tree = ScenarioTree.binary(3)
        p = DCRBSDEProblem(tree, SubFiltration.full(tree), 0.0, 0.1, -5.0, 5.0)
        rep = penalization_sweep(p, default_penalty_grid(tree, range(4, 8)))
        assert rep.violation == [0.0] * 4
        assert rep.slope is None

    def test_sweep_rate_and_threads(self):
        tree = ScenarioTree.binary(6)
        p = deterministic_problem(tree)
        grid = default_penalty_grid(tree)
        rep = penalization_sweep(p, grid)
        assert -1.3 <= rep.slope <= -0.7
        assert all(b <= a for a, b in zip(rep.distance, rep.distance[1:]))
        assert rep.distance[-1] <= 1e-3 * rep.scale
        again = penalization_sweep(p, grid, threads=4)
        assert again.rows() == rep.rows()

    def test_rejects_bad_penalty(self):
        tree = ScenarioTree.binary(1)
        with pytest.raises(ValueError):
            solve_penalized(deterministic_problem(tree), 0.0)


class TestVerification:
    @pytest.mark.parametrize("kind", KINDS)
    def test_solver_output_passes(self, kind):
        rng = np.random.default_rng(8)
        p = random_problem(rng, n=4, kind=kind, driver="lipschitz")
        d = verify_solution(p, solve(p))
        assert d.passed, d.summary()
        assert d.flagged_nodes == []
        assert d.constraint_slack >= -1e-10

    @pytest.mark.parametrize("level, node", [(0, 0), (1, 1), (2, 3), (3, 5), (4, 9)])
    def test_localised_corruption(self, level, node):
        rng = np.random.default_rng(9)
        p = random_problem(rng, n=4, kind="delayed")
        s = solve(p)
        s.Y[level] = s.Y[level].copy()
        s.Y[level][node] += 1e-3
        d = verify_solution(p, s)
        assert not d.passed
        assert d.flagged_nodes == [(level, node)]
        assert d.dynamics_residual == pytest.approx(1e-3, rel=1e-6)

    def test_redistributed_pushes_break_adaptedness(self):
        tree = ScenarioTree.binary(4)
        p = deterministic_problem(tree)
        s = solve(p)
        assert s.diagnostics.k_adapted
        # move part of the level-0 -> 1 push from one path to the other; the mean is unchanged
        km = [v.copy() for v in s.K_minus]
        delta = np.array([0.05, -0.05])
        for k in range(1, 5):
            km[k] = km[k] + delta[tree.ancestors(k, 1)]
        s.K_minus = km
        d = verify_solution(p, s)
        assert not d.k_adapted
        assert not d.passed

    def test_constraint_violation_is_reported(self):
        tree = ScenarioTree.binary(6)
        p = deterministic_problem(tree)
        pen = solve_penalized(p, 10.0)
        assert constraint_violation(p, pen) > 0
        assert verify_solution(p, pen).constraint_slack < 0


class TestReductions:
    @pytest.mark.parametrize("seed", range(4))
    def test_full_filtration_is_classical(self, seed):
        rng = np.random.default_rng(seed)
        p = random_problem(rng, n=4, kind="full")
        s = solve(p)
        f = [p.driver.evaluate(p.tree, k) for k in range(4)]
        ref = reflected_recursion(p.tree, p.filtration, f, p.terminal, p.lower, p.upper)
        for a, b in zip(s.Y, ref):
            np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_trivial_filtration_is_mean_reflected(self, seed):
        rng = np.random.default_rng(10 + seed)
        p = random_problem(rng, n=4, kind="trivial")
        s = solve(p)
        f = [p.driver.evaluate(p.tree, k) for k in range(4)]
        ref = reflected_recursion(p.tree, p.filtration, f, p.terminal, p.lower, p.upper)
        for a, b in zip(s.Y, ref):
            np.testing.assert_allclose(a, b, atol=1e-12)
        assert all(np.ptp(v) == 0 for v in s.K_plus + s.K_minus)

    def test_far_upper_barrier(self):
        rng = np.random.default_rng(20)
        p0 = random_problem(rng, n=4, kind="delayed")
        p = DCRBSDEProblem(p0.tree, p0.filtration, p0.terminal, p0.driver, p0.lower, 1e6)
        s = solve(p)
        assert all(np.all(v == 0) for v in s.K_minus)
        f = [p.driver.evaluate(p.tree, k) for k in range(4)]
        ref = reflected_recursion(p.tree, p.filtration, f, p.terminal, p.lower, p.upper, sides="lower")
        for a, b in zip(s.Y, ref):
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_methods_agree():
    rng = np.random.default_rng(30)
    p = random_problem(rng, n=4, kind="delayed")
    base = solve(p, "constant")
    for other in (solve(p, "backward"), solve(p, "picard")):
        for a, b in zip(base.Y, other.Y):
            np.testing.assert_allclose(a, b, atol=1e-12)
    pen = solve(p, "penalty", penalty=1e9)
    for a, b in zip(base.Y, pen.Y):
        np.testing.assert_allclose(a, b, atol=1e-7)
    with pytest.raises(ValueError):
        solve(p, "magic")


class TestStability:
    def _pair(self, rng, eps=None):
        p1 = random_problem(rng, n=4, kind="delayed", driver="lipschitz")
        if eps is None:
            xi2 = p1.terminal + rng.normal(0, 0.05, p1.terminal.size)
            shift = rng.normal(0, 0.3)
            drv = FunctionDriver(lambda t, w, y, z, f=p1.driver: f.fn(t, w, y, z) + shift, p1.lipschitz)
        else:
            xi2, drv = p1.terminal + eps, p1.driver
        p2 = DCRBSDEProblem(p1.tree, p1.filtration, xi2, drv, p1.lower, p1.upper, validate=False)
        return p1, p2

    def test_identical(self):
        rng = np.random.default_rng(0)
        p, _ = self._pair(rng)
        s = solve(p)
        assert stability_estimate(p, p, s, s) == (0.0, 0.0)

    def test_obstacle_mismatch(self):
        rng = np.random.default_rng(1)
        p1, _ = self._pair(rng)
        p2 = DCRBSDEProblem(p1.tree, p1.filtration, p1.terminal, p1.driver, [v - 0.1 for v in p1.lower], p1.upper)
        with pytest.raises(PreconditionError, match="obstacles"):
            stability_estimate(p1, p2, solve(p1), solve(p2))

    def test_ratio_bounded(self):
        rng = np.random.default_rng(2)
        ratios = []
        for _ in range(20):
            p1, p2 = self._pair(rng)
            lhs, rhs = stability_estimate(p1, p2, solve(p1), solve(p2))
            ratios.append(lhs / rhs)
        assert max(ratios) < 10.0

    def test_constant_driver_shift(self):
        tree = ScenarioTree.binary(3)
        G = SubFiltration.full(tree)
        p1 = DCRBSDEProblem(tree, G, 0.0, ConstantDriver(0.0), -5.0, 5.0)
        p2 = DCRBSDEProblem(tree, G, 0.0, ConstantDriver(0.5), -5.0, 5.0)
        lhs, rhs = stability_estimate(p1, p2, solve(p1), solve(p2))
        # Y1 - Y2 = -0.5 (T - t): sup is 0.25, Z and K vanish
        assert lhs == pytest.approx(0.25)
        assert rhs == pytest.approx(0.25)

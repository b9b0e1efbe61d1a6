import itertools

import numpy as np
import pytest

from esbstack.acceptance import unprioritized_qp
from esbstack.priority import StackSpec, Weights, assemble_fixed_stack_qp, solve_controller
from esbstack.qp import (
    QpProblem,
    QpSolution,
    SolverConfig,
    SolverError,
    analytic_unprioritized_solution,
    kkt_residual,
    prioritized_kkt_oracle,
    solve_qp,
)
from esbstack.manipulator import LinkChain, Selector
from esbstack.tasks import goal_point_task


def enumerate_active_sets(H, c, A, b):
    """Minimum objective over every active subset whose KKT point is feasible and dual feasible."""
    n, p = H.shape[0], b.size
    best = np.inf
    for k in range(0, min(n, p) + 1):
        for S in itertools.combinations(range(p), k):
            S = list(S)
            KKT = np.block([[H, -A[S].T], [A[S], np.zeros((k, k))]]) if k else H
            rhs = np.r_[-c, b[S]]
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            z, lam = sol[:n], sol[n:]
            if np.all(A @ z - b >= -1e-9) and np.all(lam >= -1e-9):
                best = min(best, 0.5 * z @ H @ z + c @ z)
    return best


class TestSolver:
    def test_one_dimensional(self):
        sol = solve_qp(QpProblem([[2.0]], [0.0], [[1.0]], [1.0]))
        assert sol.status == "optimal"
        assert sol.z_star[0] == pytest.approx(1.0) and sol.multipliers[0] == pytest.approx(2.0)
        assert sol.active_set == (0,)

    def test_unconstrained(self):
        sol = solve_qp(QpProblem([[2.0]], [0.0], np.zeros((0, 1)), []))
        assert sol.z_star[0] == 0.0 and sol.status == "optimal"

    def test_matches_active_set_enumeration(self, rng):
        solved = 0
        for _ in range(100):
            M = rng.standard_normal((4, 4))
            H = M @ M.T + 0.5 * np.eye(4)
            c = rng.standard_normal(4)
            A = rng.standard_normal((6, 4))
            b = rng.standard_normal(6) - 1.0
            sol = solve_qp(QpProblem(H, c, A, b))
            brute = enumerate_active_sets(H, c, A, b)
            if sol.status == "infeasible":
                assert brute == np.inf
                continue
            assert sol.status == "optimal"
            assert sol.objective == pytest.approx(brute, abs=1e-6)
            solved += 1
        assert solved >= 50

    def test_infeasibility_agrees_with_lp(self, rng):
        from scipy.optimize import linprog

        for _ in range(300):
            A = rng.standard_normal((6, 4))
            b = rng.standard_normal(6) - 1.0
            lp = linprog(np.zeros(4), A_ub=-A, b_ub=-b, bounds=[(None, None)] * 4, method="highs")
            sol = solve_qp(QpProblem(np.eye(4), rng.standard_normal(4), A, b))
            assert (sol.status == "optimal") == (lp.status == 0)

    def test_infeasible_detected(self):
        prob = QpProblem(np.eye(1), [0.0], [[1.0], [-1.0]], [1.0, 0.0])
        assert solve_qp(prob).status == "infeasible"
        with pytest.raises(SolverError) as exc:
            solve_qp(prob, SolverConfig(raise_on_failure=True))
        assert exc.value.status == "infeasible"

    def test_deterministic(self, rng):
        H = np.diag([2.0, 2.0, 4.0])
        A = rng.standard_normal((5, 3))
        b = rng.standard_normal(5)
        s1, s2 = solve_qp(QpProblem(H, np.zeros(3), A, b)), solve_qp(QpProblem(H, np.zeros(3), A, b))
        assert s1.z_star.tobytes() == s2.z_star.tobytes() and s1.active_set == s2.active_set

    @pytest.mark.parametrize("H", [[[1.0, 2.0], [0.0, 1.0]], [[np.nan, 0.0], [0.0, 1.0]]])
    def test_rejects_bad_data(self, H):
        with pytest.raises(ValueError):
            QpProblem(H, [0.0, 0.0], np.zeros((0, 2)), [])


class TestKktResidual:
    def test_exact_solution(self):
        prob = QpProblem([[2.0]], [0.0], [[1.0]], [1.0])
        res = kkt_residual(prob, QpSolution(np.array([1.0]), np.array([2.0]), (0,), "optimal", None))
        assert max(abs(x) for x in res) <= 1e-12

    def test_perturbation_visible(self):
        prob = QpProblem([[2.0]], [0.0], [[1.0]], [1.0])
        res = kkt_residual(prob, QpSolution(np.array([1.0 + 1e-3]), np.array([2.0]), (0,), "optimal", None))
        assert res.stationarity > 1e-4

    def test_primal_equals_violation(self):
        prob = QpProblem([[2.0]], [0.0], [[1.0]], [1.0])
        res = kkt_residual(prob, QpSolution(np.array([0.25]), np.array([0.0]), (), "optimal", None))
        assert res.primal == pytest.approx(0.75)


class TestUnprioritizedOracle:
    def test_single_task(self):
        qdot, delta = analytic_unprioritized_solution([[1.0, 0.0, 0.0]], [-0.5], 1.0)
        assert delta[0] == pytest.approx(-0.25)
        np.testing.assert_allclose(qdot, [0.25, 0.0, 0.0])
        sol = solve_qp(unprioritized_qp(np.array([[1.0, 0.0, 0.0]]), np.array([-0.5]), 1.0))
        np.testing.assert_allclose(sol.z_star, [0.25, 0.0, 0.0, 0.25], atol=1e-12)

    def test_satisfied_tasks(self, rng):
        qdot, delta = analytic_unprioritized_solution(rng.standard_normal((2, 3)), [0.0, 0.0], 1.0)
        np.testing.assert_array_equal(delta, 0.0)
        np.testing.assert_array_equal(qdot, 0.0)

    def test_orthogonal_unit_gradients(self):
        gamma = np.array([-0.4, -1.0])
        _, delta = analytic_unprioritized_solution(np.eye(3)[:2], gamma, 1.0)
        np.testing.assert_allclose(delta, gamma / 2)

    def test_rejects_nonpositive_weight(self):
        with pytest.raises(ValueError):
            analytic_unprioritized_solution([[1.0]], [-1.0], 0.0)


class TestPrioritizedOracle:
    def test_no_priority_rows_reduces(self, rng):
        G = rng.standard_normal((2, 3))
        gamma = -rng.uniform(0.1, 1.0, 2)
        _, qdot = prioritized_kkt_oracle(G, gamma, np.zeros((0, 2)), 2.0)
        np.testing.assert_allclose(qdot, analytic_unprioritized_solution(G, gamma, 2.0)[0], atol=1e-12)

    def test_agrees_with_solver_on_matching_active_set(self, rng):
        chain = LinkChain([0.5, 0.5, 0.5])
        compared = 0
        for _ in range(100):
            tasks = [goal_point_task(f"T{i}", Selector("position", 3 - i), rng.uniform(-0.8, 0.8, 2)) for i in range(2)]
            stack = StackSpec.chain(["T0", "T1"])
            prob = assemble_fixed_stack_qp(tasks, chain, rng.uniform(-2, 2, 3), stack, Weights(l=1.0))
            sol = solve_qp(prob)
            if len(sol.active_set) != prob.p:
                continue
            _, qdot = prioritized_kkt_oracle(prob.meta["grad_h"], prob.meta["gamma_h"], prob.meta["K"], 1.0)
            np.testing.assert_allclose(prob.block(sol.z_star, "u"), qdot, atol=1e-5)
            compared += 1
        assert compared >= 10

    def test_linear_in_gamma(self, rng):
        G = rng.standard_normal((2, 3))
        gamma = -rng.uniform(0.1, 1.0, 2)
        K = np.array([[1.0, -1e-3]])
        lam1, _ = prioritized_kkt_oracle(G, gamma, K, 1.0)
        lam3, _ = prioritized_kkt_oracle(G, 3.0 * gamma, K, 1.0)
        np.testing.assert_allclose(lam3, 3.0 * lam1)

    def test_singular_block_raises(self):
        G = np.array([[1.0, 0.0], [1.0, 0.0]])
        K = np.array([[1.0, -1.0]])
        with pytest.raises(np.linalg.LinAlgError):
            prioritized_kkt_oracle(G, [-1.0, -1.0], K, 1.0)


def test_controller_reports_zero_slack_for_safety_tasks():
    from esbstack.tasks import joint_limit_tasks

    chain = LinkChain([0.5, 0.5])
    tasks = joint_limit_tasks("lim", [1.0, 1.0], [-1.0, -1.0]) + [goal_point_task("g", Selector("configuration"), [0.5, 0.5])]
    stack = StackSpec(((t.id for t in tasks[:4]), ("g",)))
    out = solve_controller(assemble_fixed_stack_qp(tasks, chain, np.zeros(2), stack))
    assert all(out.delta[t.id] == 0.0 for t in tasks[:4])
    assert out.qp_solution.status == "optimal"

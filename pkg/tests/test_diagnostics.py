import math

import numpy as np
import pytest

from esbstack.diagnostics import (
    active_set_diagnostics,
    baseline_matrices,
    continuity_checker,
    jacobian_baseline_controllers,
    rank_monitor,
    step_jumps,
)
from esbstack.manipulator import LinkChain, Selector, endpoint, forward_kinematics, task_jacobian
from esbstack.priority import StackSpec, assemble_fixed_stack_qp
from esbstack.qp import QpSolution, solve_qp
from esbstack.tasks import DEFAULT_RANK_TOL, goal_point_task


def three_goals():
    return [goal_point_task(f"T{i}", endpoint(3), t) for i, t in
            enumerate([[0.5, 1.0], [-0.2, -1.2], [-0.25, 0.0]], start=1)]


class TestActiveSet:
    def test_all_active(self, planar3):
        prob = assemble_fixed_stack_qp(three_goals(), planar3, [1.2, -0.5, 0.5], StackSpec.chain(["T1", "T2", "T3"]))
        sol = solve_qp(prob)
        all_active = QpSolution(sol.z_star, sol.multipliers, tuple(range(prob.p)), "optimal", sol.kkt_residuals)
        d = active_set_diagnostics(prob, all_active)
        np.testing.assert_array_equal(d.Sigma, np.eye(3))
        np.testing.assert_allclose(d.z, prob.meta["K"] @ prob.meta["gamma_h"])
        assert d.V_z == pytest.approx(0.5 * float(d.z @ d.z))
        assert d.active_tasks == ("T1", "T2", "T3")

    def test_none_active(self, planar3):
        prob = assemble_fixed_stack_qp(three_goals(), planar3, [1.2, -0.5, 0.5], StackSpec.chain(["T1", "T2", "T3"]))
        sol = solve_qp(prob)
        none_active = QpSolution(sol.z_star, sol.multipliers, (), "optimal", sol.kkt_residuals)
        d = active_set_diagnostics(prob, none_active)
        assert d.Sigma.shape == (3, 0) and d.K_bar.size == 0
        np.testing.assert_array_equal(d.z, 0.0)
        assert d.V_z == 0.0 and d.grad_active.shape == (0, 3)

    def test_steady_state_of_dependent_stack(self, builtin_run):
        # the priority residual vanishes although lower tasks stay unfinished
        _, trace, summary = builtin_run("sim2_dependent")
        assert trace[-1].V_z < 1e-4
        assert summary["final_h"]["T2"] < -0.05 and summary["final_h"]["T3"] < -0.05


class TestRankMonitor:
    def test_default_tolerance(self):
        assert DEFAULT_RANK_TOL == 5e-3

    def test_full_rank(self, rng):
        K = np.array([[1.0, -1e-3, 0.0], [0.0, 1.0, -1e-3]])
        rank, drop = rank_monitor(K, np.eye(3), rng.standard_normal((3, 4)))
        assert rank == 2 and not drop

    def test_aligned_gradients_drop(self):
        K = np.array([[1.0, -1e-3]])
        g = np.array([[1.0, 0.0], [-1.0, 0.0]])
        # K applied to aligned rows leaves (1 + 1e-3) e1: still rank one, no drop
        assert rank_monitor(K, np.eye(2), g) == (1, False)
        g = np.array([[1e-3, 0.0], [1.0, 0.0]])
        assert rank_monitor(K, np.eye(2), g) == (0, True)

    def test_no_priority_rows(self):
        assert rank_monitor(np.zeros((0, 2)), np.eye(2), np.eye(2)) == (0, False)

    def test_flag_near_reported_point(self, builtin_run):
        _, trace, _ = builtin_run("ex5_rank_loss")
        flagged = [r for r in trace if r.rank_drop]
        assert flagged
        assert min(np.linalg.norm(r.q - [-1.0004, 0.0]) for r in flagged) < 0.05


class TestContinuity:
    def test_constant_channel(self):
        assert continuity_checker(np.ones((10, 3)), 0.0) == (0.0, True)

    def test_step_height(self):
        values = np.r_[np.zeros(5), 0.7 * np.ones(5)]
        jump, ok = continuity_checker(values, 0.5)
        assert jump == pytest.approx(0.7) and not ok

    def test_mask_restricts_steps(self):
        values = np.r_[np.zeros(5), np.ones(5)]
        mask = np.zeros(10, dtype=bool)
        mask[7:] = True
        assert continuity_checker(values, 0.1, mask) == (0.0, True)

    def test_single_sample(self):
        assert step_jumps([1.0]).size == 0
        with pytest.raises(ValueError):
            step_jumps([])

    def test_switching_trace(self, builtin_run):
        from esbstack.acceptance import switch_continuity

        sc, trace, _ = builtin_run("sim3_switching")
        windows = switch_continuity(sc, trace, "u")
        assert [w["segment"] for w in windows] == [1, 2]
        assert all(w["max_jump"] <= 2 * w["baseline_p95"] for w in windows)


class TestBaselines:
    def test_zero_error_zero_velocity(self, planar3):
        q = np.array([0.3, 0.5, -0.2])
        tasks = [goal_point_task(f"T{k}", endpoint(k), forward_kinematics(planar3, q, endpoint(k))) for k in (1, 3)]
        for mode in ("superposition", "null_space"):
            np.testing.assert_allclose(jacobian_baseline_controllers(tasks, planar3, q, mode), 0.0, atol=1e-15)

    def test_orthogonal_tasks_identity(self, rng):
        chain = LinkChain(np.full(4, 0.5))
        q = rng.uniform(-3, 3, 4)
        jac = [task_jacobian(chain, q, Selector("joint", j)) for j in (1, 2, 3, 4)]
        for mode in ("superposition", "null_space"):
            J, J_bar = baseline_matrices(jac, mode)
            np.testing.assert_allclose(J @ J_bar, np.eye(4), atol=1e-12)

    def test_independent_tasks_nonnegative_spectrum(self, rng):
        chain = LinkChain(np.full(5, 0.5))
        sels = [Selector("position", 5), Selector("orientation", 2), Selector("position", 3)]
        for _ in range(20):
            q = rng.uniform(-math.pi, math.pi, 5)
            J, J_bar = baseline_matrices([task_jacobian(chain, q, s) for s in sels])
            assert np.linalg.eigvals(J @ J_bar).real.min() >= -1e-9

    def test_null_space_protects_first_task(self, planar3, rng):
        q = rng.uniform(-2, 2, 3)
        J1 = task_jacobian(planar3, q, Selector("joint", 1))
        J2 = task_jacobian(planar3, q, endpoint(3))
        _, J_bar = baseline_matrices([J1, J2], "null_space")
        # the second block acts in the null space of the first task
        np.testing.assert_allclose(J1 @ J_bar[:, 1:], 0.0, atol=1e-12)

    def test_unknown_mode(self, planar3):
        with pytest.raises(ValueError):
            baseline_matrices([np.eye(3)], "weighted")

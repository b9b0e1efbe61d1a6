import math

import numpy as np
import pytest

from esbstack.gammas import GammaSampling, barrier_row, gamma_grid, select_gammas, torque_margin
from esbstack.manipulator import LinkChain, RobotState, Selector, forward_dynamics
from esbstack.scenario import builtin_scenario
from esbstack.tasks import goal_point_task, joint_limit_tasks

M, L, F, U = 1.0, 1.0, 0.1, 1.0
INERTIA = M * L**2 / 3


def one_dof_feasible(gain: float, points: int = 20001) -> bool:
    """Dense-grid check of the single-joint limit pair |q| <= 1 with |tau| <= U.

    On the upper boundary ``qdot = gain (1 - q)`` the upper barrier needs
    ``tau <= f qdot - I gain qdot`` and the lower one
    ``tau >= f qdot - I gain qdot - I gain h'_lower``; symmetrically below.
    """
    for q in np.linspace(-1.0, 1.0, points):
        qd = gain * (1 - q)
        h_lower = qd + gain * (q + 1)
        hi = F * qd - INERTIA * gain * qd
        lo = hi - INERTIA * gain * h_lower
        if max(lo, -U) > min(hi, U) + 1e-12:
            return False
        qd = -gain * (q + 1)
        h_upper = -qd + gain * (1 - q)
        lo = F * qd - INERTIA * gain * qd
        hi = lo + INERTIA * gain * h_upper
        if max(lo, -U) > min(hi, U) + 1e-12:
            return False
    return True


@pytest.fixture
def one_dof():
    return LinkChain([L], [M], [F]), joint_limit_tasks("lim", [1.0], [-1.0])


def test_grid():
    grid = gamma_grid(20.0, 4, 3.0)
    np.testing.assert_allclose(grid, [0.02, 0.2, 2.0, 20.0])
    assert gamma_grid(1.0, 1).tolist() == [1.0]
    with pytest.raises(ValueError):
        gamma_grid(0.0, 3)


def test_margin_lp():
    # rows tau >= 0.5 and -tau >= -0.8 over |tau| <= 1: best margin 0.15 at tau = 0.65
    assert torque_margin(np.array([[1.0], [-1.0]]), np.array([-0.5, 0.8]), 1.0) == pytest.approx(0.15)


def test_barrier_row_matches_dynamics(rng):
    chain = LinkChain([0.5, 0.5, 0.5], gravity_accel=[0.0, -9.81])
    task = goal_point_task("g", Selector("position", 3), [0.3, 0.8])
    state = RobotState(rng.uniform(-2, 2, 3), rng.standard_normal(3))
    tau = rng.standard_normal(3)
    a, b, h, hp = barrier_row(task, chain, state, 2.0)
    # d/dt (hdot + 2 h) + 2 (hdot + 2 h) by finite differences along the flow
    eps = 1e-6
    qdd = forward_dynamics(chain, state, tau)

    def h_prime(q, qd):
        val = task.evaluate(chain, q)
        return float(val.grad @ qd) + 2.0 * val.h

    rate = (h_prime(state.q + eps * state.qdot, state.qdot + eps * qdd)
            - h_prime(state.q - eps * state.qdot, state.qdot - eps * qdd)) / (2 * eps)
    assert a @ tau + b == pytest.approx(rate + 2.0 * hp, rel=1e-6, abs=1e-8)


def test_goal_only_is_unbounded():
    chain = LinkChain([0.5, 0.5])
    tasks = [goal_point_task("g", Selector("position", 2), [0.5, 0.5], relative_degree=2)]
    res = select_gammas(tasks, chain, 60.0, GammaSampling(cap=20.0))
    assert res.note == "unbounded" and res.gammas == {"g": 20.0}


def test_one_dof_limits_match_dense_oracle(one_dof):
    chain, tasks = one_dof
    sampling = GammaSampling(samples=200, grid_points=12, cap=20.0)
    res = select_gammas(tasks, chain, U, sampling)
    grid = gamma_grid(20.0, 12)
    expected = max(g for g in grid if one_dof_feasible(g))
    assert expected < 20.0
    assert list(res.gammas.values()) == pytest.approx([expected, expected])
    assert res.min_margin >= 0.0 and res.note == ""


@pytest.mark.parametrize("cap", [1.0, 20.0])
def test_single_grid_point(one_dof, cap):
    chain, tasks = one_dof
    res = select_gammas(tasks, chain, U, GammaSampling(samples=100, grid_points=1, cap=cap))
    if one_dof_feasible(cap):
        assert res.note == "capped" and set(res.gammas.values()) == {cap}
    else:
        assert res.note == "infeasible"


def test_relaxed_tasks_get_cap(one_dof):
    chain, tasks = one_dof
    goal = goal_point_task("g", Selector("joint", 1), [0.2], relative_degree=2)
    res = select_gammas(tasks + [goal], chain, U, GammaSampling(samples=100, grid_points=12, cap=20.0))
    assert res.gammas["g"] == 20.0 and res.gammas["lim_upper_1"] < 20.0


def test_dynamic_builtin_selection():
    sc = builtin_scenario("sim5_dynamic")
    res = select_gammas(sc.tasks, sc.chain, sc.dynamic.u_max, GammaSampling(cap=2.0))
    assert res.gammas == {"T1": 2.0, "T2": 2.0} and res.note == "unbounded"
    assert all(t.gamma.gain == 2.0 for t in sc.tasks)

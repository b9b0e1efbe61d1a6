import math

import numpy as np
import pytest

from esbstack.manipulator import (
    LinkChain,
    RobotState,
    Selector,
    control_affine,
    dynamics_terms,
    endpoint,
    forward_dynamics,
    forward_kinematics,
    inertia_matrix,
    kinetic_energy,
    orientation,
    task_jacobian,
)
from esbstack.sim import step_dynamic


def fd_jacobian(chain, q, sel, eps=1e-6):
    cols = []
    for j in range(chain.n):
        e = np.zeros(chain.n)
        e[j] = eps
        cols.append((forward_kinematics(chain, q + e, sel) - forward_kinematics(chain, q - e, sel)) / (2 * eps))
    return np.column_stack(cols)


class TestForwardKinematics:
    def test_zero_configuration_is_collinear(self, planar3):
        np.testing.assert_allclose(forward_kinematics(planar3, [0, 0, 0], endpoint(3)), [1.5, 0.0], atol=1e-15)

    def test_base_rotation(self, planar3):
        np.testing.assert_allclose(forward_kinematics(planar3, [math.pi / 2, 0, 0], endpoint(3)), [0.0, 1.5], atol=1e-15)

    def test_two_link_elbow(self, planar3):
        # first link straight up to (0, 0.5), second link turns back to horizontal
        np.testing.assert_allclose(forward_kinematics(planar3, [math.pi / 2, -math.pi / 2, 0], endpoint(2)), [0.5, 0.5], atol=1e-15)

    def test_orientation_is_angle_sum(self, planar3):
        assert forward_kinematics(planar3, [0.3, -0.2, 0.4], orientation(3))[0] == pytest.approx(0.5)
        assert forward_kinematics(planar3, [0.3, -0.2, 0.4], orientation(2))[0] == pytest.approx(0.1)

    def test_bad_inputs(self, planar3):
        with pytest.raises(ValueError):
            forward_kinematics(planar3, [0, 0], endpoint(3))
        with pytest.raises(IndexError):
            forward_kinematics(planar3, [0, 0, 0], endpoint(4))


class TestJacobian:
    def test_zero_configuration(self, planar3):
        np.testing.assert_allclose(task_jacobian(planar3, [0, 0, 0], endpoint(3)), [[0, 0, 0], [1.5, 1.0, 0.5]], atol=1e-15)

    def test_orientation_row(self, planar3, rng):
        for _ in range(5):
            np.testing.assert_array_equal(task_jacobian(planar3, rng.uniform(-3, 3, 3), orientation(3)), [[1.0, 1.0, 1.0]])

    @pytest.mark.parametrize("sel", [endpoint(1), endpoint(2), endpoint(3), Selector("position", 2, 0.5),
                                     orientation(2), Selector("joint", 3), Selector("configuration")])
    def test_matches_finite_differences(self, planar3, rng, sel):
        for _ in range(20):
            q = rng.uniform(-math.pi, math.pi, 3)
            J = task_jacobian(planar3, q, sel)
            assert np.max(np.abs(J - fd_jacobian(planar3, q, sel))) / (1 + np.max(np.abs(J))) < 1e-6

    def test_distal_columns_are_exactly_zero(self, rng):
        chain = LinkChain(np.full(5, 0.5))
        q = rng.uniform(-3, 3, 5)
        for k in range(1, 6):
            assert np.all(task_jacobian(chain, q, endpoint(k))[:, k:] == 0.0)


class TestDynamics:
    def test_inertia_symmetric_positive_definite(self, planar3, rng):
        for _ in range(20):
            D = inertia_matrix(planar3, rng.uniform(-math.pi, math.pi, 3))
            assert np.max(np.abs(D - D.T)) <= 1e-12
            assert np.linalg.eigvalsh(D).min() > 0

    def test_single_rod_inertia_about_joint(self):
        chain = LinkChain([2.0], [3.0])
        assert inertia_matrix(chain, [0.7])[0, 0] == pytest.approx(3.0 * 4.0 / 3.0)

    def test_rest_has_no_velocity_terms(self, planar3):
        terms = dynamics_terms(planar3, RobotState([0.2, 0.4, -0.1], np.zeros(3)))
        np.testing.assert_array_equal(terms.C @ np.zeros(3), 0.0)
        np.testing.assert_array_equal(terms.friction, 0.0)
        np.testing.assert_array_equal(terms.g_vec, 0.0)

    def test_christoffel_coriolis_is_skew_compatible(self, planar3, rng):
        dt = 1e-6
        for _ in range(10):
            q, qd = rng.uniform(-3, 3, 3), rng.standard_normal(3)
            D_dot = (inertia_matrix(planar3, q + dt * qd) - inertia_matrix(planar3, q - dt * qd)) / (2 * dt)
            S = D_dot - 2 * dynamics_terms(planar3, RobotState(q, qd)).C
            assert np.max(np.abs(S + S.T)) < 1e-4

    def test_kinetic_energy_conserved_without_losses(self, rng):
        chain = LinkChain([0.5, 0.5, 0.5], joint_viscous_friction=[0.0, 0.0, 0.0])
        state = RobotState(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3))
        e0 = kinetic_energy(chain, state)
        for _ in range(1000):
            state = step_dynamic(chain, state, np.zeros(3), 1e-3)
        assert abs(kinetic_energy(chain, state) - e0) < 1e-6

    def test_gravity_compensation_holds_still(self, rng):
        chain = LinkChain([0.5, 0.5, 0.5], gravity_accel=[0.0, -9.81])
        state = RobotState(rng.uniform(-2, 2, 3), np.zeros(3))
        tau = dynamics_terms(chain, state).g_vec
        np.testing.assert_allclose(forward_dynamics(chain, state, tau), 0.0, atol=1e-12)

    def test_pendulum_closed_form(self, rng):
        m, L, f, g = 1.3, 0.8, 0.2, 9.81
        chain = LinkChain([L], [m], [f], [0.0, -g])
        for _ in range(20):
            q, qd, tau = rng.uniform(-3, 3, 3)
            expected = (tau - m * g * (L / 2) * math.cos(q) - f * qd) / (m * L**2 / 3)
            assert forward_dynamics(chain, RobotState([q], [qd]), [tau])[0] == pytest.approx(expected, abs=1e-10)


class TestControlAffine:
    def test_rest_drift_vanishes(self, planar3):
        form = control_affine(planar3, RobotState([0.3, 0.1, -0.6], np.zeros(3)))
        np.testing.assert_array_equal(form.f, 0.0)
        np.testing.assert_array_equal(form.g_mat[:3], 0.0)

    def test_matches_forward_dynamics(self, rng):
        chain = LinkChain([0.5, 0.4, 0.3], [1.0, 0.7, 0.4], [0.1, 0.2, 0.05], [0.0, -9.81])
        for _ in range(20):
            state = RobotState(rng.uniform(-3, 3, 3), rng.standard_normal(3))
            tau = rng.standard_normal(3) * 5
            form = control_affine(chain, state)
            xdot = form.f + form.g_mat @ tau
            np.testing.assert_allclose(xdot[:3], state.qdot, atol=1e-10)
            np.testing.assert_allclose(xdot[3:], forward_dynamics(chain, state, tau), atol=1e-10)


class TestChainValidation:
    @pytest.mark.parametrize("kwargs", [
        {"link_lengths": []},
        {"link_lengths": [0.5, -0.1]},
        {"link_lengths": [0.5], "link_masses": [0.0]},
        {"link_lengths": [0.5], "joint_viscous_friction": [-1.0]},
        {"link_lengths": [0.5, 0.5], "link_masses": [1.0]},
        {"link_lengths": [0.5], "gravity_accel": [0.0]},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LinkChain(**kwargs)

    def test_state_dimension_mismatch(self):
        with pytest.raises(ValueError):
            RobotState([0.0, 1.0], [0.0])

"""Deterministic closed-loop simulation of prioritised ESB task stacks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from esbstack.diagnostics import active_set_diagnostics, rank_monitor
from esbstack.manipulator import LinkChain, RobotState, forward_dynamics, inertia_matrix
from esbstack.priority import (
    ControllerOutput,
    DynamicConfig,
    StackSpec,
    SwitchSchedule,
    Weights,
    assemble_dynamic_qp,
    assemble_stack_qp,
    solve_controller,
)
from esbstack.qp import SolverError
from esbstack.tasks import DEFAULT_RANK_TOL, EsbTask, auxiliary_cbf

log = logging.getLogger(__name__)

MODEL_KINDS = ("kinematic", "dynamic", "dynamic_with_velocity_tracking")


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class Segment:
    until_iteration: int
    stack: StackSpec


@dataclass(frozen=True)
class SwitchConfig:
    duration_s: float
    profile: str = "linear"


@dataclass(frozen=True)
class Integrator:
    method: str = "rk4"
    dt: float = 0.01

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.method!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass
class Scenario:
    name: str
    chain: LinkChain
    tasks: list
    timeline: list
    q0: np.ndarray
    model_kind: str = "kinematic"
    integrator: Integrator = Integrator()
    switch: SwitchConfig | None = None
    qdot0: np.ndarray | None = None
    tau0: np.ndarray | None = None
    weights: Weights = Weights()
    dynamic: DynamicConfig | None = None
    tracking_gains: tuple = (100.0, 36.0)
    rank_tol: float = DEFAULT_RANK_TOL
    description: str = ""

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        self.q0 = np.asarray(self.q0, dtype=float)
        n = self.chain.n
        self.qdot0 = np.zeros(n) if self.qdot0 is None else np.asarray(self.qdot0, dtype=float)
        self.tau0 = np.zeros(n) if self.tau0 is None else np.asarray(self.tau0, dtype=float)
        if self.q0.shape != (n,) or self.qdot0.shape != (n,) or self.tau0.shape != (n,):
            raise ValueError("initial state dimension does not match the chain")
        ends = [seg.until_iteration for seg in self.timeline]
        if not ends or ends[0] <= 0 or any(b <= a for a, b in zip(ends, ends[1:])):
            raise ValueError("timeline spans must be contiguous, non-empty and increasing")
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task ids")
        for seg in self.timeline:
            unknown = set(seg.stack.task_ids) - set(ids)
            if unknown:
                raise ValueError(f"stack references unknown tasks {sorted(unknown)}")
        if self.model_kind == "dynamic" and self.dynamic is None:
            self.dynamic = DynamicConfig(dt=self.integrator.dt)

    @property
    def n_iterations(self) -> int:
        return self.timeline[-1].until_iteration

    def segment_index(self, k: int) -> int:
        for i, seg in enumerate(self.timeline):
            if k < seg.until_iteration:
                return i
        return len(self.timeline) - 1

    def segment_start(self, i: int) -> int:
        return 0 if i == 0 else self.timeline[i - 1].until_iteration

    def max_stack_rows(self) -> int:
        """Widest auto-mode slack vector over the timeline (for fixed-width logs)."""
        safety = {t.id for t in self.tasks if t.safety_critical}
        widths = [len([i for i in s.stack.task_ids if i not in safety]) - 1 for s in self.timeline if s.stack.mode == "auto"]
        return max(widths + [0])


@dataclass
class TraceRecord:
    t: float
    iteration: int
    q: np.ndarray
    qdot: np.ndarray
    u: np.ndarray
    tau: np.ndarray | None
    qd: np.ndarray | None
    h: dict
    h_prime: dict
    delta: dict
    v: np.ndarray
    V_gamma: float
    V_z: float
    z: np.ndarray
    active_set: tuple
    rank_value: int
    rank_drop: bool
    du_inf: float
    segment: int = 0
    in_switch: bool = False


def step_kinematic(q, u, dt: float, method: str = "rk4") -> np.ndarray:
    """Integrate ``qdot = u`` over one step with ``u`` held constant.

    For a held input Euler and RK4 coincide; both are kept for interface symmetry.
    """
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    if q.shape != u.shape:
        raise ValueError("q and u differ in dimension")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown integrator {method!r}")
    # every RK4 stage sees the same held input, so the update is exact
    return q + dt * u


def step_dynamic(chain: LinkChain, state: RobotState, tau, dt: float, tau_rate=None):
    """RK4 step of the rigid-body dynamics.

    With ``tau_rate`` the torque is part of the state and ramps linearly
    over the step; returns ``(state, tau_next)`` in that case, else ``state``.
    """
    tau = np.asarray(tau, dtype=float)
    w = np.zeros_like(tau) if tau_rate is None else np.asarray(tau_rate, dtype=float)

    def f(q, qd, s):
        return qd, forward_dynamics(chain, RobotState(q, qd), tau + s * w)

    q, qd = state.q, state.qdot
    k1q, k1v = f(q, qd, 0.0)
    k2q, k2v = f(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v, 0.5 * dt)
    k3q, k3v = f(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v, 0.5 * dt)
    k4q, k4v = f(q + dt * k3q, qd + dt * k3v, dt)
    nxt = RobotState(
        q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q),
        qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v),
    )
    if tau_rate is None:
        return nxt
    return nxt, tau + dt * w


def velocity_tracking_torque(u_des, q_d, state: RobotState, gains=(100.0, 36.0)) -> np.ndarray:
    """``k_u (u_des - qdot) + k_q (q_d - q)``."""
    k_u, k_q = gains
    u_des = np.asarray(u_des, dtype=float)
    q_d = np.asarray(q_d, dtype=float)
    if u_des.shape != state.q.shape or q_d.shape != state.q.shape:
        raise ValueError("dimension mismatch in tracking law")
    return k_u * (u_des - state.qdot) + k_q * (q_d - state.q)


def _controller(sc: Scenario, stack: StackSpec, state: RobotState, tau, t: float) -> ControllerOutput:
    if sc.model_kind == "dynamic":
        problem = assemble_dynamic_qp(sc.tasks, sc.chain, state, tau, stack, sc.dynamic, sc.weights, t)
    else:
        problem = assemble_stack_qp(sc.tasks, sc.chain, state.q, stack, sc.weights, t)
    return solve_controller(problem)


def run_scenario(sc: Scenario, n_iterations: int | None = None) -> list[TraceRecord]:
    """Simulate the scenario and return one record per step.

    Inside a switch window both stacks are solved and their inputs blended;
    diagnostics are taken from the stack being switched to.

    Raises:
        SimulationError: carrying the failing step index.
    """
    dt = sc.integrator.dt
    n_iter = sc.n_iterations if n_iterations is None else n_iterations
    if sc.model_kind == "dynamic_with_velocity_tracking":
        _warn_if_stiff(sc)
    n_v = sc.max_stack_rows()
    state = RobotState(sc.q0, sc.qdot0)
    tau = sc.tau0.copy()
    q_d = sc.q0.copy()
    prev_u = None
    trace: list[TraceRecord] = []

    for k in range(n_iter):
        t = k * dt
        seg = sc.segment_index(k)
        stack = sc.timeline[seg].stack
        try:
            out = _controller(sc, stack, state, tau, t)
            u = out.u
            in_switch = False
            if seg > 0 and sc.switch is not None:
                t_rel = (k - sc.segment_start(seg)) * dt
                if t_rel < sc.switch.duration_s:
                    in_switch = True
                    schedule = SwitchSchedule(sc.timeline[seg - 1].stack, stack, sc.switch.duration_s, sc.switch.profile)
                    prev = _controller(sc, schedule.stack_a, state, tau, t)
                    s = schedule.s(t_rel)
                    u = s * prev.u + (1.0 - s) * out.u
        except (SolverError, np.linalg.LinAlgError, ValueError) as exc:
            raise SimulationError(str(exc), k) from exc

        problem = out.problem
        diag = active_set_diagnostics(problem, out.qp_solution)
        slacked = problem.meta["slacked_ids"]
        grads = dict(zip(problem.meta["task_ids"], problem.meta["grad_h"]))
        grad_slacked = np.array([grads[i] for i in slacked]).reshape(len(slacked), sc.chain.n)
        # rank condition evaluated as if every task and priority row were active
        K_full = problem.meta["K"]
        rank, drop = rank_monitor(K_full, np.eye(len(slacked)), grad_slacked, sc.rank_tol) if K_full.shape[0] else (0, False)
        gam = dict(zip(problem.meta["task_ids"], problem.meta["gamma_h"]))
        g_neg = np.minimum(np.array([gam[i] for i in slacked]), 0.0)

        h, h_prime = {}, {}
        known = {} if sc.model_kind == "dynamic" else dict(zip(problem.meta["task_ids"], problem.meta["h"]))
        for task in sc.tasks:
            if sc.model_kind == "dynamic":
                aux = auxiliary_cbf(task, sc.chain, state, t)
                h[task.id], h_prime[task.id] = aux.h, aux.h_prime
            elif task.id in known:
                h[task.id] = float(known[task.id])
            else:
                h[task.id] = float(task.value(sc.chain, state.q, t))
        delta = {task.id: out.delta.get(task.id, np.nan) for task in sc.tasks}
        v = np.full(n_v, np.nan)
        v[: out.v.size] = out.v
        du = 0.0 if prev_u is None else float(np.max(np.abs(u - prev_u), initial=0.0))
        labels = tuple(_label(problem.row_labels[i]) for i in out.qp_solution.active_set)

        applied_tau = None
        if sc.model_kind == "dynamic":
            applied_tau = tau.copy()
        elif sc.model_kind == "dynamic_with_velocity_tracking":
            applied_tau = velocity_tracking_torque(u, q_d, state, sc.tracking_gains)

        trace.append(TraceRecord(
            t, k, state.q.copy(), state.qdot.copy(), u.copy(), applied_tau,
            q_d.copy() if sc.model_kind == "dynamic_with_velocity_tracking" else None,
            h, h_prime, delta, v, 0.5 * float(g_neg @ g_neg), diag.V_z, diag.z, labels,
            rank, bool(drop), du, seg, in_switch,
        ))
        prev_u = u

        if sc.model_kind == "kinematic":
            state = RobotState(step_kinematic(state.q, u, dt, sc.integrator.method), np.asarray(u, dtype=float))
        elif sc.model_kind == "dynamic":
            state, tau = step_dynamic(sc.chain, state, tau, dt, tau_rate=u)
        else:
            state = step_dynamic(sc.chain, state, applied_tau, dt)
            q_d = q_d + dt * u
        if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qdot))):
            raise SimulationError("state diverged", k)
    return trace


RK4_STABILITY_LIMIT = 2.78


def _warn_if_stiff(sc: Scenario) -> None:
    """Log when the velocity-tracking loop is too stiff for explicit RK4 at the start state."""
    D = inertia_matrix(sc.chain, sc.q0)
    fastest = float(np.max(np.abs(np.linalg.eigvals(np.linalg.solve(D, sc.tracking_gains[0] * np.eye(sc.chain.n))))))
    if fastest * sc.integrator.dt > RK4_STABILITY_LIMIT:
        log.warning("velocity-tracking loop is stiff: dt * rate = %.2f exceeds %.2f; reduce dt below %.2e",
                    fastest * sc.integrator.dt, RK4_STABILITY_LIMIT, RK4_STABILITY_LIMIT / fastest)


def _label(row_label) -> str:
    kind = row_label[0]
    if kind == "task":
        return row_label[1]
    if kind == "priority":
        return f"{row_label[1]}<{row_label[2]}"
    return ":".join(str(x) for x in row_label)


def trace_channel(trace: Sequence[TraceRecord], name: str, key: str | None = None) -> np.ndarray:
    """Stack one field of every record; ``key`` picks an entry of dict-valued fields."""
    if key is not None:
        return np.array([getattr(r, name)[key] for r in trace])
    return np.array([getattr(r, name) for r in trace])

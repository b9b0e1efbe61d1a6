"""Prioritised task stacks: K/V matrices, controller QP assembly and stack switching.

Decision vector layout is ``z = [u, delta, v]`` where ``u`` is the joint
velocity (kinematic model) or the torque rate (dynamically extended model),
``delta`` holds one slack per non-safety-critical task and ``v`` relaxes the
priority chain in ``auto`` mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from esbstack.manipulator import LinkChain, RobotState, dynamics_terms
from esbstack.qp import QpProblem, QpSolution, SolverConfig, SolverError, solve_qp
from esbstack.tasks import ClassKFunction, EsbTask

DEFAULT_KAPPA = 1e3


@dataclass(frozen=True)
class StackSpec:
    """Task groups from highest to lowest priority; members of a group share a level."""

    order: tuple = ()
    kappa: float = DEFAULT_KAPPA
    mode: str = "fixed"

    def __post_init__(self):
        order = tuple(tuple(str(t) for t in ([g] if isinstance(g, str) else g)) for g in self.order)
        order = tuple(g for g in order if g)
        object.__setattr__(self, "order", order)
        ids = [t for g in order for t in g]
        if len(set(ids)) != len(ids):
            raise ValueError("a task id appears more than once in the stack")
        if not self.kappa > 1:
            raise ValueError("kappa must be greater than 1")
        if self.mode not in ("fixed", "auto"):
            raise ValueError(f"unknown stack mode {self.mode!r}")

    @property
    def task_ids(self) -> tuple:
        return tuple(t for g in self.order for t in g)

    @classmethod
    def chain(cls, ids: Sequence[str], kappa: float = DEFAULT_KAPPA, mode: str = "fixed") -> "StackSpec":
        return cls(tuple((i,) for i in ids), kappa, mode)


@dataclass(frozen=True)
class PrioritizationMatrix:
    K: np.ndarray
    columns: tuple  # task id of each column
    relations: tuple  # (higher, lower) per row


@dataclass(frozen=True)
class Weights:
    l: float = 1e2
    l_delta: float = 1e2
    l_v: float = 1e2

    def __post_init__(self):
        if min(self.l, self.l_delta, self.l_v) <= 0:
            raise ValueError("cost weights must be positive")


def _restrict(stack: StackSpec, keep) -> list:
    groups = [tuple(t for t in g if t in keep) for g in stack.order]
    return [g for g in groups if g]


def build_prioritization_matrix(
    stack: StackSpec,
    columns: Sequence[str] | None = None,
    chain_only: bool = False,
) -> PrioritizationMatrix:
    """Rows ``delta_i - delta_j / kappa <= 0`` for every task ``i`` one level above ``j``.

    Columns default to the stack's own order. Stack entries missing from
    ``columns`` (e.g. safety-critical tasks without slack) are skipped.
    ``chain_only`` flattens the groups into a strict chain first.

    Raises:
        ValueError: on an empty stack.
    """
    if not stack.order:
        raise ValueError("cannot build a prioritization matrix for an empty stack")
    columns = tuple(stack.task_ids if columns is None else columns)
    col = {t: k for k, t in enumerate(columns)}
    groups = _restrict(stack, col)
    if chain_only:
        groups = [(t,) for g in groups for t in g]
    relations = [(hi, lo) for upper, lower in zip(groups, groups[1:]) for hi in upper for lo in lower]
    K = np.zeros((len(relations), len(columns)))
    for r, (hi, lo) in enumerate(relations):
        K[r, col[hi]] = 1.0
        K[r, col[lo]] = -1.0 / stack.kappa
    return PrioritizationMatrix(K, columns, tuple(relations))


def build_v_matrix(M: int, kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    """``diag(kappa^-1, kappa^0, ..., kappa^(M-3))`` scaling the stack slacks."""
    if M < 2:
        raise ValueError("the relaxation matrix needs at least two tasks")
    return np.diag(kappa ** np.arange(-1.0, M - 2.0))


@dataclass
class TaskRow:
    """One barrier constraint ``a . u + delta >= rhs`` plus bookkeeping."""

    task_id: str
    coeff: np.ndarray
    rhs: float
    h: float
    gamma_h: float
    grad: np.ndarray
    slacked: bool


def _select_tasks(tasks: Sequence[EsbTask], stack: StackSpec) -> list[EsbTask]:
    by_id = {t.id: t for t in tasks}
    missing = [i for i in stack.task_ids if i not in by_id]
    if missing:
        raise KeyError(f"stack references unknown task ids {missing}")
    wanted = set(stack.task_ids)
    return [t for t in tasks if t.id in wanted]


def kinematic_task_rows(tasks, chain: LinkChain, q, stack: StackSpec, t: float = 0.0) -> list[TaskRow]:
    rows = []
    for task in _select_tasks(tasks, stack):
        val = task.evaluate(chain, q, t)
        gh = float(task.gamma(val.h))
        rows.append(TaskRow(task.id, val.grad, -(val.dh_dt + gh), val.h, gh, val.grad, not task.safety_critical))
    return rows


def _assemble(rows: list[TaskRow], n_u: int, H_u, c_u, stack: StackSpec, weights: Weights,
              extra_A=None, extra_b=None, extra_labels=()) -> QpProblem:
    slacked = [r.task_id for r in rows if r.slacked]
    m = len(slacked)
    auto = stack.mode == "auto"
    if rows and slacked and len(_restrict(stack, set(slacked))) > 1:
        P = build_prioritization_matrix(stack, slacked, chain_only=auto)
    else:
        P = PrioritizationMatrix(np.zeros((0, m)), tuple(slacked), ())
    K = P.K
    n_v = K.shape[0] if auto else 0
    n = n_u + m + n_v
    l_delta = weights.l_delta if auto else weights.l

    H = np.zeros((n, n))
    H[:n_u, :n_u] = H_u
    H[n_u : n_u + m, n_u : n_u + m] = 2.0 * l_delta * np.eye(m)
    H[n_u + m :, n_u + m :] = 2.0 * weights.l_v * np.eye(n_v)
    c = np.zeros(n)
    c[:n_u] = c_u

    A_rows, b, labels = [], [], []
    slot = {tid: k for k, tid in enumerate(slacked)}
    for r in rows:
        a = np.zeros(n)
        a[:n_u] = r.coeff
        if r.slacked:
            a[n_u + slot[r.task_id]] = 1.0
        A_rows.append(a)
        b.append(r.rhs)
        labels.append(("task", r.task_id))
    for k, rel in enumerate(P.relations):
        a = np.zeros(n)
        a[n_u : n_u + m] = -K[k]
        if auto:
            a[n_u + m + k] = build_v_matrix(m, stack.kappa)[k, k]
        A_rows.append(a)
        b.append(0.0)
        labels.append(("priority",) + rel)
    if extra_A is not None:
        for a_u, bb, lab in zip(extra_A, extra_b, extra_labels):
            a = np.zeros(n)
            a[:n_u] = a_u
            A_rows.append(a)
            b.append(bb)
            labels.append(lab)

    layout = {"u": slice(0, n_u), "delta": slice(n_u, n_u + m), "v": slice(n_u + m, n)}
    meta = {
        "task_ids": [r.task_id for r in rows],
        "slacked_ids": slacked,
        "K": K,
        "relations": P.relations,
        "h": np.array([r.h for r in rows]),
        "gamma_h": np.array([r.gamma_h for r in rows]),
        "grad_h": np.array([r.grad for r in rows]).reshape(len(rows), n_u),
        "mode": stack.mode,
    }
    return QpProblem(H, c, np.array(A_rows).reshape(len(A_rows), n), np.array(b), layout, labels, meta)


def assemble_fixed_stack_qp(tasks, chain: LinkChain, q, stack: StackSpec, weights: Weights = Weights(), t: float = 0.0) -> QpProblem:
    """Cost ``||u||^2 + l ||delta||^2`` with task rows and ``K delta <= 0``."""
    if stack.mode != "fixed":
        stack = StackSpec(stack.order, stack.kappa, "fixed")
    n = chain.n
    rows = kinematic_task_rows(tasks, chain, np.asarray(q, dtype=float), stack, t)
    return _assemble(rows, n, 2.0 * np.eye(n), np.zeros(n), stack, weights)


def assemble_auto_stack_qp(tasks, chain: LinkChain, q, stack: StackSpec, weights: Weights = Weights(), t: float = 0.0) -> QpProblem:
    """Cost ``||u||^2 + l_delta ||delta||^2 + l_v ||v||^2`` with ``K delta <= V v``."""
    if stack.mode != "auto":
        stack = StackSpec(stack.order, stack.kappa, "auto")
    n = chain.n
    rows = kinematic_task_rows(tasks, chain, np.asarray(q, dtype=float), stack, t)
    return _assemble(rows, n, 2.0 * np.eye(n), np.zeros(n), stack, weights)


def assemble_stack_qp(tasks, chain, q, stack: StackSpec, weights: Weights = Weights(), t: float = 0.0) -> QpProblem:
    if stack.mode == "auto":
        return assemble_auto_stack_qp(tasks, chain, q, stack, weights, t)
    return assemble_fixed_stack_qp(tasks, chain, q, stack, weights, t)


@dataclass(frozen=True)
class DynamicConfig:
    """Torque-bound settings for the dynamically extended model.

    ``torque_preview`` is the horizon over which the commanded torque rate
    is assumed to act when evaluating task rows and the torque cost.
    """

    u_max: float = 60.0
    gamma_u: ClassKFunction = ClassKFunction("linear", 10.0)
    torque_rate_max: float = 500.0
    torque_preview: float = 0.02
    dt: float = 1e-3

    def __post_init__(self):
        if self.u_max <= 0 or self.torque_rate_max <= 0 or self.torque_preview <= 0 or self.dt <= 0:
            raise ValueError("dynamic settings must be positive")


def torque_barrier(tau, u_max: float) -> float:
    """Integral CBF ``u_max^2 - ||tau||^2``."""
    tau = np.asarray(tau, dtype=float)
    return float(u_max**2 - tau @ tau)


def assemble_dynamic_qp(
    tasks,
    chain: LinkChain,
    state: RobotState,
    tau,
    stack: StackSpec,
    config: DynamicConfig = DynamicConfig(),
    weights: Weights = Weights(),
    t: float = 0.0,
) -> QpProblem:
    """QP over the torque rate ``w`` for relative-degree-2 tasks and a torque bound.

    Each task row enforces ``dh'/dt + gamma(h') >= -delta`` where ``h' = hdot + gamma(h)``
    and the joint acceleration is evaluated at the previewed torque
    ``tau + torque_preview * w``. The torque row
    ``-2 tau.w + gamma_u(h_u) >= dt N w_max^2`` is never slacked; the right-hand
    margin makes the sampled torque stay inside the bound exactly.

    Raises:
        ValueError: if the current torque already violates the bound or a
            task is not of relative degree 2.
    """
    tau = np.asarray(tau, dtype=float)
    n = chain.n
    h_u = torque_barrier(tau, config.u_max)
    if h_u < 0:
        raise ValueError(f"initial torque {tau.tolist()} is outside the bound u_max={config.u_max}")
    D, C, g_vec, friction = dynamics_terms(chain, state)
    Dinv = np.linalg.inv(D)
    qdot = state.qdot
    drift_acc = Dinv @ (tau - C @ qdot - friction - g_vec)
    Tp = config.torque_preview

    rows = []
    for task in _select_tasks(tasks, stack):
        if task.relative_degree != 2:
            raise ValueError(f"task {task.id} must have relative degree 2 in the dynamic model")
        val = task.evaluate(chain, state.q, t)
        Hq = task.hessian(chain, state.q, t)
        hdot = float(val.grad @ qdot) + val.dh_dt
        h_prime = hdot + float(task.gamma(val.h))
        dgam = float(task.gamma.derivative(val.h))
        drift = float(qdot @ Hq @ qdot) + dgam * float(val.grad @ qdot) + float(val.grad @ drift_acc)
        gp = float(task.gamma(h_prime))
        coeff = Tp * (val.grad @ Dinv)
        rows.append(TaskRow(task.id, coeff, -(drift + gp), h_prime, gp, val.grad, not task.safety_critical))

    H_u = 2.0 * Tp**2 * np.eye(n)
    c_u = 2.0 * Tp * tau
    w_max = config.torque_rate_max
    extra_A = [-2.0 * tau]
    extra_b = [-float(config.gamma_u(h_u)) + config.dt * n * w_max**2]
    labels = [("torque",)]
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        extra_A += [e, -e]
        extra_b += [-w_max, -w_max]
        labels += [("rate_lower", j), ("rate_upper", j)]
    problem = _assemble(rows, n, H_u, c_u, stack, weights, extra_A, extra_b, labels)
    problem.meta.update(h_u=h_u, tau=tau.copy())
    return problem


@dataclass
class ControllerOutput:
    u: np.ndarray
    delta: dict
    v: np.ndarray
    qp_solution: QpSolution
    problem: QpProblem = field(repr=False, default=None)


def solve_controller(problem: QpProblem, config: SolverConfig | None = None) -> ControllerOutput:
    """Solve an assembled controller QP; safety-critical tasks report a zero slack.

    Raises:
        SolverError: if the QP is not solved to optimality.
    """
    sol = solve_qp(problem, config)
    if sol.status != "optimal":
        raise SolverError(f"controller QP ended with status {sol.status}", sol.status)
    z = sol.z_star
    slacks = dict(zip(problem.meta["slacked_ids"], problem.block(z, "delta")))
    delta = {tid: float(slacks.get(tid, 0.0)) for tid in problem.meta["task_ids"]}
    return ControllerOutput(problem.block(z, "u").copy(), delta, problem.block(z, "v").copy(), sol, problem)


@dataclass(frozen=True)
class SwitchSchedule:
    """Blend from ``stack_a`` to ``stack_b`` over ``duration`` seconds."""

    stack_a: StackSpec
    stack_b: StackSpec
    duration: float
    profile: str = "linear"

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("switch duration must be positive")
        if self.profile not in ("linear", "smoothstep"):
            raise ValueError(f"unknown switch profile {self.profile!r}")

    def s(self, t: float) -> float:
        """Weight of ``stack_a``: 1 before the switch, 0 after it."""
        x = min(max(t / self.duration, 0.0), 1.0)
        if self.profile == "smoothstep":
            x = x * x * (3.0 - 2.0 * x)
        return 1.0 - x


def switching_controller(u1, u2, t: float, schedule: SwitchSchedule) -> np.ndarray:
    """``s(t) u1 + (1 - s(t)) u2``."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    if u1.shape != u2.shape:
        raise ValueError("inputs to blend differ in shape")
    s = schedule.s(t)
    return s * u1 + (1.0 - s) * u2


def ordering_precondition(delta1, delta2, i: int, j: int) -> bool:
    return bool(delta1[i] < delta1[j] and delta2[i] < delta2[j])


def delta_ordering_preserved(delta1, delta2, i: int, j: int, grid: int = 1000) -> bool:
    """Check that blended slacks keep ``Delta_i < Delta_j`` for every ``s`` on a grid.

    Indices are 0-based. When the two slack vectors disagree on the order of
    ``i`` and ``j`` nothing is claimed and the predicate is vacuously true.
    """
    delta1 = np.asarray(delta1, dtype=float)
    delta2 = np.asarray(delta2, dtype=float)
    if not ordering_precondition(delta1, delta2, i, j):
        return True
    s = np.linspace(0.0, 1.0, grid)[:, None]
    blend = s * delta1 + (1.0 - s) * delta2
    return bool(np.all(blend[:, i] < blend[:, j]))

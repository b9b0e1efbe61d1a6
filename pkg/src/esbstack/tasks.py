"""Extended set-based tasks encoded as control barrier functions.

Every task exposes a CBF ``h(q, t)`` whose zero superlevel set is the set to
render forward invariant / asymptotically stable, together with the
derivatives needed by the QP controllers: ``dh/dq``, ``dh/dt`` and the
configuration Hessian (used by the relative-degree-2 auxiliary CBF).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from esbstack.manipulator import (
    LinkChain,
    RobotState,
    Selector,
    forward_kinematics,
    task_hessian,
    task_jacobian,
)

DEFAULT_RANK_TOL = 5e-3


@dataclass(frozen=True)
class ClassKFunction:
    """Extended class-K function, ``gain * s`` or ``gain * s**3``."""

    kind: str = "linear"
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "cubic"):
            raise ValueError(f"unknown class-K kind {self.kind!r}")
        if not self.gain > 0:
            raise ValueError("class-K gain must be positive")

    def __call__(self, s):
        if self.kind == "linear":
            return self.gain * s
        return self.gain * s**3

    def derivative(self, s):
        if self.kind == "linear":
            return self.gain * np.ones_like(s) if np.ndim(s) else self.gain
        return 3.0 * self.gain * s**2

    @property
    def lipschitz(self) -> float | None:
        """Global Lipschitz constant (``None`` for the cubic kind)."""
        return self.gain if self.kind == "linear" else None


LINEAR = ClassKFunction()


class TaskValue(NamedTuple):
    h: float
    grad: np.ndarray  # dh/dq, shape (N,)
    dh_dt: float


@dataclass(frozen=True)
class EsbTask:
    """Base class. Subclasses implement :meth:`evaluate` and :meth:`hessian`."""

    id: str
    selector: Selector
    gamma: ClassKFunction = LINEAR
    relative_degree: int = 1
    safety_critical: bool = False

    def evaluate(self, chain: LinkChain, q, t: float = 0.0) -> TaskValue:
        raise NotImplementedError

    def hessian(self, chain: LinkChain, q, t: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def value(self, chain: LinkChain, q, t: float = 0.0) -> float:
        return self.evaluate(chain, q, t).h

    def with_options(self, **changes) -> "EsbTask":
        return replace(self, **changes)


class SigmaTask(EsbTask):
    """Task whose CBF depends on ``q`` only through ``sigma = k(q)``."""

    def cbf(self, sigma: np.ndarray, t: float):
        """Return ``(h, dh/dsigma, dh/dt)``."""
        raise NotImplementedError

    def cbf_hessian(self, sigma: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, chain, q, t=0.0):
        q = np.asarray(q, dtype=float)
        sigma = forward_kinematics(chain, q, self.selector)
        h, dh_ds, dh_dt = self.cbf(sigma, t)
        grad = dh_ds @ task_jacobian(chain, q, self.selector)
        return TaskValue(float(h), grad, float(dh_dt))

    def hessian(self, chain, q, t=0.0):
        q = np.asarray(q, dtype=float)
        sigma = forward_kinematics(chain, q, self.selector)
        _, dh_ds, _ = self.cbf(sigma, t)
        J = task_jacobian(chain, q, self.selector)
        H = J.T @ self.cbf_hessian(sigma, t) @ J
        H += np.einsum("a,aij->ij", dh_ds, task_hessian(chain, q, self.selector))
        return H


@dataclass(frozen=True)
class ConstantTarget:
    """Time-invariant goal ``sigma_d`` with zero rate."""

    value: tuple

    def __call__(self, t: float):
        v = np.asarray(self.value, dtype=float)
        return v, np.zeros_like(v)


@dataclass(frozen=True)
class GoalPointTask(SigmaTask):
    """``h = -1/2 ||sigma - sigma_d(t)||^2``.

    ``trajectory`` maps time to ``(sigma_d, sigma_d_dot)``.
    """

    trajectory: Callable[[float], tuple] = None
    target: tuple = ()

    def cbf(self, sigma, t):
        sigma_d, sigma_d_dot = self.trajectory(t)
        err = sigma - sigma_d
        return -0.5 * float(err @ err), -err, float(err @ sigma_d_dot)

    def cbf_hessian(self, sigma, t):
        return -np.eye(sigma.size)


@dataclass(frozen=True)
class JointLimitTask(SigmaTask):
    """Linear joint-limit barrier ``q+ - q_i`` (``upper``) or ``q_i - q-``."""

    bound: float = 0.0
    upper: bool = True

    def cbf(self, sigma, t):
        if self.upper:
            return self.bound - sigma[0], np.array([-1.0]), 0.0
        return sigma[0] - self.bound, np.array([1.0]), 0.0

    def cbf_hessian(self, sigma, t):
        return np.zeros((1, 1))


@dataclass(frozen=True)
class LookAtPointTask(EsbTask):
    """Align link ``k`` with the bearing from its proximal joint to ``target``.

    The desired bearing is recomputed from ``q`` at every evaluation and
    unwrapped to the branch nearest the current link orientation.
    """

    target: tuple = (0.0, 0.0)

    def _bearing(self, chain, q):
        k = self.selector.link
        target = np.asarray(self.target, dtype=float)
        if k > 1:
            base_sel = Selector("position", k - 1)
            base = forward_kinematics(chain, q, base_sel)
            J_base = task_jacobian(chain, q, base_sel)
        else:
            base = np.zeros(2)
            J_base = np.zeros((2, chain.n))
        d = target - base
        r2 = float(d @ d)
        if r2 < 1e-18:
            raise ValueError(f"task {self.id}: target coincides with the base of link {k}")
        beta = np.arctan2(d[1], d[0])
        dbeta_dq = -(np.array([-d[1], d[0]]) / r2) @ J_base
        return beta, dbeta_dq

    def evaluate(self, chain, q, t=0.0):
        q = np.asarray(q, dtype=float)
        sigma = forward_kinematics(chain, q, self.selector)[0]
        beta, dbeta_dq = self._bearing(chain, q)
        beta += 2.0 * np.pi * np.round((sigma - beta) / (2.0 * np.pi))
        err = sigma - beta
        grad = -err * (task_jacobian(chain, q, self.selector)[0] - dbeta_dq)
        return TaskValue(-0.5 * err * err, grad, 0.0)

    def hessian(self, chain, q, t=0.0, eps: float = 1e-6):
        # central differences of the analytic gradient
        q = np.asarray(q, dtype=float)
        n = q.size
        H = np.empty((n, n))
        for i in range(n):
            dq = np.zeros(n)
            dq[i] = eps
            H[:, i] = (self.evaluate(chain, q + dq, t).grad - self.evaluate(chain, q - dq, t).grad) / (2 * eps)
        return 0.5 * (H + H.T)


def goal_point_task(
    task_id: str,
    selector: Selector,
    sigma_d,
    gamma: ClassKFunction = LINEAR,
    **options,
) -> GoalPointTask:
    """Goal-point task; ``sigma_d`` is a constant vector or a callable ``t -> (sigma_d, sigma_d_dot)``."""
    if callable(sigma_d):
        trajectory, target = sigma_d, ()
    else:
        value = np.atleast_1d(np.asarray(sigma_d, dtype=float))
        if selector.dim > 0 and value.size != selector.dim:
            raise ValueError(f"target dimension {value.size} does not match selector dimension {selector.dim}")
        trajectory, target = ConstantTarget(tuple(value.tolist())), tuple(value.tolist())
    return GoalPointTask(task_id, selector, gamma, trajectory=trajectory, target=target, **options)


def orientation_task(task_id: str, link: int, theta_d: float, gamma: ClassKFunction = LINEAR, **options) -> GoalPointTask:
    return goal_point_task(task_id, Selector("orientation", link), [theta_d], gamma, **options)


def look_at_point_task(task_id: str, link: int, target, gamma: ClassKFunction = LINEAR, **options) -> LookAtPointTask:
    target = tuple(float(x) for x in np.asarray(target, dtype=float).ravel())
    if len(target) != 2:
        raise ValueError("look-at target must be a planar point")
    return LookAtPointTask(task_id, Selector("orientation", link), gamma, target=target, **options)


def joint_limit_tasks(
    prefix: str,
    q_plus: Sequence[float],
    q_minus: Sequence[float],
    gamma: ClassKFunction = LINEAR,
    **options,
) -> list[JointLimitTask]:
    """Upper and lower barrier for every joint, all safety critical.

    Ids are ``{prefix}_upper_{i}`` and ``{prefix}_lower_{i}`` (1-based).
    """
    q_plus = np.asarray(q_plus, dtype=float)
    q_minus = np.asarray(q_minus, dtype=float)
    if q_plus.shape != q_minus.shape:
        raise ValueError("joint bound vectors differ in length")
    if np.any(q_minus >= q_plus):
        raise ValueError("lower joint bound must be below the upper bound")
    options.setdefault("safety_critical", True)
    tasks = []
    for i, (hi, lo) in enumerate(zip(q_plus, q_minus), start=1):
        sel = Selector("joint", i)
        tasks.append(JointLimitTask(f"{prefix}_upper_{i}", sel, gamma, bound=float(hi), upper=True, **options))
        tasks.append(JointLimitTask(f"{prefix}_lower_{i}", sel, gamma, bound=float(lo), upper=False, **options))
    return tasks


def grad_wrt_q(task: EsbTask, chain: LinkChain, q, t: float = 0.0) -> np.ndarray:
    """``dh/dq = dh/dsigma J(q)``."""
    return task.evaluate(chain, q, t).grad


@dataclass(frozen=True)
class RelationshipReport:
    pair: tuple
    classification: str  # orthogonal | independent | dependent
    gradient_angle: float
    rank_tol: float


def _classify_vectors(a: np.ndarray, b: np.ndarray, rank_tol: float) -> tuple[str, float]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero gradient: relationship undefined")
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    angle = float(np.arccos(cos))
    if abs(cos) <= rank_tol:
        return "orthogonal", angle
    # columns normalised so the rank test does not depend on the scale of h
    s = np.linalg.svd(np.column_stack([a / na, b / nb]), compute_uv=False)
    if s[1] <= rank_tol * s[0]:
        return "dependent", angle
    return "independent", angle


def classify_pair(
    task_i: EsbTask,
    task_j: EsbTask,
    chain: LinkChain,
    q,
    t: float = 0.0,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> RelationshipReport:
    """Classify two ESB tasks at ``q`` from their CBF gradients.

    Raises:
        ValueError: if either gradient vanishes at ``q``.
    """
    gi = grad_wrt_q(task_i, chain, q, t)
    gj = grad_wrt_q(task_j, chain, q, t)
    try:
        label, angle = _classify_vectors(gi, gj, rank_tol)
    except ValueError:
        raise ValueError(f"zero CBF gradient for pair ({task_i.id}, {task_j.id}) at q={np.asarray(q).tolist()}") from None
    return RelationshipReport((task_i.id, task_j.id), label, angle, rank_tol)


def _rank(A: np.ndarray, tol: float) -> int:
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def classify_pair_jacobian(J_i, J_j, rank_tol: float = DEFAULT_RANK_TOL, pair=("i", "j")) -> RelationshipReport:
    """Orthogonal / independent / dependent test for two Jacobian-based tasks."""
    J_i = np.atleast_2d(np.asarray(J_i, dtype=float))
    J_j = np.atleast_2d(np.asarray(J_j, dtype=float))
    ni, nj = np.linalg.norm(J_i, 2), np.linalg.norm(J_j, 2)
    if ni == 0.0 or nj == 0.0:
        raise ValueError("zero Jacobian")
    Ji, Jj = J_i / ni, J_j / nj
    cross = np.linalg.norm(Ji @ Jj.T, 2)
    angle = float(np.arccos(np.clip(cross, 0.0, 1.0)))  # smallest principal angle between row spaces
    if cross <= rank_tol:
        label = "orthogonal"
    elif _rank(Ji.T, rank_tol) + _rank(Jj.T, rank_tol) == _rank(np.hstack([Ji.T, Jj.T]), rank_tol):
        label = "independent"
    else:
        label = "dependent"
    return RelationshipReport(tuple(pair), label, angle, rank_tol)


@dataclass(frozen=True)
class AuxiliaryCbf:
    task_id: str
    h: float
    h_prime: float
    grad_x: np.ndarray  # dh'/dx over x = (q, qdot), shape (2N,)
    gamma_prime: ClassKFunction


def auxiliary_cbf(
    task: EsbTask,
    chain: LinkChain,
    state: RobotState,
    t: float = 0.0,
    gamma_prime: ClassKFunction | None = None,
) -> AuxiliaryCbf:
    """``h' = h`` for relative degree 1, ``h' = hdot + gamma(h)`` for degree 2.

    The state gradient neglects ``d^2 h / dq dt``; dynamic tasks are
    time invariant.
    """
    val = task.evaluate(chain, state.q, t)
    n = chain.n
    gp = gamma_prime or task.gamma
    if task.relative_degree == 1:
        return AuxiliaryCbf(task.id, val.h, val.h, np.concatenate([val.grad, np.zeros(n)]), gp)
    if task.relative_degree != 2:
        raise ValueError("only relative degree 1 or 2 is supported")
    hdot = float(val.grad @ state.qdot) + val.dh_dt
    h_prime = hdot + float(task.gamma(val.h))
    H = task.hessian(chain, state.q, t)
    d_dq = state.qdot @ H + task.gamma.derivative(val.h) * val.grad
    return AuxiliaryCbf(task.id, val.h, h_prime, np.concatenate([d_dq, val.grad]), gp)

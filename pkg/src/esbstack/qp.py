"""Dense convex QP solver and closed-form KKT references.

Problems are written as::

    minimize    1/2 z^T H z + c^T z
    subject to  A z >= b

with multipliers ``lam >= 0`` satisfying ``H z + c - A^T lam = 0``.
The solver is the Goldfarb-Idnani dual active-set method: it starts from the
unconstrained minimiser and adds violated constraints one at a time, so no
feasible starting point is needed and infeasibility is detected exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class SolverError(RuntimeError):
    """Raised when a QP cannot be solved (infeasible or iteration limit)."""

    def __init__(self, message: str, status: str):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class SolverConfig:
    regularization: float = 1e-10
    activity_tol: float = 1e-8
    feasibility_tol: float = 1e-10
    max_iter: int = 500
    raise_on_failure: bool = False


@dataclass
class QpProblem:
    H: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    var_layout: dict = field(default_factory=dict)
    row_labels: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.c = np.asarray(self.c, dtype=float).reshape(n)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b have inconsistent row counts")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-12 * max(1.0, np.abs(self.H).max()):
            raise ValueError("H is not symmetric")
        for name, arr in (("H", self.H), ("c", self.c), ("A", self.A), ("b", self.b)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"QP data {name} is not finite")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def p(self) -> int:
        return self.b.size

    def block(self, z: np.ndarray, name: str) -> np.ndarray:
        return z[self.var_layout[name]] if name in self.var_layout else np.zeros(0)

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.c @ z)


class KktResiduals(NamedTuple):
    stationarity: float
    primal: float
    dual: float
    complementarity: float


@dataclass
class QpSolution:
    z_star: np.ndarray
    multipliers: np.ndarray
    active_set: tuple
    status: str
    kkt_residuals: KktResiduals
    iterations: int = 0
    objective: float = float("nan")


def kkt_residual(problem: QpProblem, solution: QpSolution) -> KktResiduals:
    """Stationarity, primal violation, most negative multiplier and complementarity."""
    z, lam = solution.z_star, solution.multipliers
    if z.shape != (problem.n,) or lam.shape != (problem.p,):
        raise ValueError("solution dimensions do not match the problem")
    stat = problem.H @ z + problem.c - problem.A.T @ lam
    slack = problem.A @ z - problem.b
    return KktResiduals(
        float(np.max(np.abs(stat), initial=0.0)),
        float(max(0.0, -np.min(slack, initial=0.0))),
        float(min(0.0, np.min(lam, initial=0.0))),
        float(np.max(np.abs(lam * slack), initial=0.0)),
    )


def solve_qp(problem: QpProblem, config: SolverConfig | None = None) -> QpSolution:
    """Goldfarb-Idnani dual active-set solve.

    The most violated constraint enters first; ties go to the lowest index,
    which makes the iteration sequence (and hence the result) deterministic.

    Raises:
        SolverError: only when ``config.raise_on_failure`` is set and the
            status is not ``optimal``.
    """
    cfg = config or SolverConfig()
    n, p = problem.n, problem.p
    A, b = problem.A, problem.b
    # problems are small and dense: one explicit inverse is cheaper than repeated solves
    Hinv = np.linalg.inv(problem.H + cfg.regularization * np.eye(n))
    Hinv = 0.5 * (Hinv + Hinv.T)
    z = -Hinv @ problem.c
    in_working = np.zeros(p, dtype=bool)
    active: list[int] = []
    lam_active = np.zeros(0)
    status = "optimal"
    it = 0
    scale = 1.0 + np.abs(b)

    while True:
        slack = A @ z - b
        violation = np.where(in_working, 0.0, slack / scale)
        if p == 0 or violation.min() >= -cfg.feasibility_tol:
            break
        k_new = int(np.argmin(violation))
        normal = A[k_new]
        lam_new = 0.0
        added = False
        while not added:
            it += 1
            if it > cfg.max_iter:
                status = "max_iter"
                break
            if active:
                N = A[active].T
                HinvN = Hinv @ N
                HinvNp = Hinv @ normal
                G = N.T @ HinvN
                r = np.linalg.solve(G, N.T @ HinvNp)
                d = HinvNp - HinvN @ r
            else:
                r = np.zeros(0)
                HinvNp = Hinv @ normal
                d = HinvNp
            # partial (dual) step length: first active multiplier to hit zero
            t_dual, drop = np.inf, -1
            for idx in range(len(active)):
                if r[idx] > 0:
                    ratio = lam_active[idx] / r[idx]
                    if ratio < t_dual:
                        t_dual, drop = ratio, idx
            curvature = float(normal @ d)
            # d vanishes when the new normal lies in the span of the working set,
            # which is always the case once n constraints are active
            degenerate = len(active) >= n or np.linalg.norm(d) <= 1e-9 * np.linalg.norm(HinvNp)
            t_full = np.inf if degenerate or curvature <= 0 else -(normal @ z - b[k_new]) / curvature
            if not np.isfinite(t_dual) and not np.isfinite(t_full):
                status = "infeasible"
                break
            if not np.isfinite(t_full):
                lam_active = lam_active - t_dual * r
                lam_new += t_dual
                in_working[active.pop(drop)] = False
                lam_active = np.delete(lam_active, drop)
                continue
            t = min(t_dual, t_full)
            z = z + t * d
            lam_active = lam_active - t * r
            lam_new += t
            if t_full <= t_dual:
                active.append(k_new)
                in_working[k_new] = True
                lam_active = np.append(lam_active, lam_new)
                added = True
            else:
                in_working[active.pop(drop)] = False
                lam_active = np.delete(lam_active, drop)
        if status != "optimal":
            break

    if status == "optimal" and active:
        z, lam_active = _polish(problem, Hinv, active, z, lam_active)
    lam = np.zeros(p)
    if active:
        lam[active] = np.maximum(lam_active, 0.0)
    slack = A @ z - b
    act = tuple(int(i) for i in np.flatnonzero(slack <= cfg.activity_tol * scale))
    sol = QpSolution(z, lam, act, status, KktResiduals(0.0, 0.0, 0.0, 0.0), it, problem.objective(z))
    sol.kkt_residuals = kkt_residual(problem, sol)
    if status != "optimal" and cfg.raise_on_failure:
        raise SolverError(f"QP solve failed with status {status}", status)
    return sol


def _polish(problem, Hinv, active, z, lam_active):
    """Re-solve the equality KKT system on the final working set."""
    N = problem.A[active].T
    HinvN = Hinv @ N
    Hinvc = Hinv @ problem.c
    try:
        lam = np.linalg.solve(N.T @ HinvN, problem.b[active] + N.T @ Hinvc)
    except np.linalg.LinAlgError:
        return z, lam_active
    z_new = HinvN @ lam - Hinvc
    return z_new, lam


def analytic_unprioritized_solution(grad_h, gamma_h, l: float):
    """Closed-form minimiser of the unprioritised multi-task QP.

    Valid when every task constraint is active. Returns ``(qdot, delta)``
    with ``delta = (I + l G G^T)^{-1} gamma(h)`` and ``qdot = -l G^T delta``.
    The QP's own slack at the optimum is ``-delta``.
    """
    if not l > 0:
        raise ValueError("l must be positive")
    G = np.atleast_2d(np.asarray(grad_h, dtype=float))
    gamma_h = np.asarray(gamma_h, dtype=float).reshape(G.shape[0])
    A0 = np.eye(G.shape[0]) + l * G @ G.T
    delta = np.linalg.solve(A0, gamma_h)
    return -l * G.T @ delta, delta


def prioritized_kkt_oracle(grad_h_active, gamma_active, K_active, l: float, cond_limit: float = 1e12):
    """Multipliers and joint velocity from the prioritised KKT block system.

    Solves ``A_K lam = -1/2 [gamma; 0]`` with
    ``A_K = 1/(4l) [[I + l G G^T, K^T], [K, K K^T]]`` and returns
    ``(lam, qdot)`` where ``qdot = 1/2 [G^T 0] lam``.

    Raises:
        np.linalg.LinAlgError: when ``A_K`` is numerically singular (the
            rank-loss configurations).
    """
    if not l > 0:
        raise ValueError("l must be positive")
    G = np.atleast_2d(np.asarray(grad_h_active, dtype=float))
    m = G.shape[0]
    gamma = np.asarray(gamma_active, dtype=float).reshape(m)
    K = np.asarray(K_active, dtype=float).reshape(-1, m)
    r = K.shape[0]
    A0 = np.eye(m) + l * G @ G.T
    A_K = np.block([[A0, K.T], [K, K @ K.T]]) / (4.0 * l)
    if r and np.linalg.cond(A_K) > cond_limit:
        raise np.linalg.LinAlgError("prioritised KKT matrix is singular at this configuration")
    lam = -0.5 * np.linalg.solve(A_K, np.concatenate([gamma, np.zeros(r)]))
    qdot = 0.5 * G.T @ lam[:m]
    return lam, qdot

"""Stability diagnostics for solved controller QPs and Jacobian-based baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from esbstack.manipulator import LinkChain, forward_kinematics, task_jacobian
from esbstack.qp import QpProblem, QpSolution
from esbstack.tasks import DEFAULT_RANK_TOL, GoalPointTask

PINV_RCOND = 1e-8


@dataclass
class StabilityDiagnostics:
    Sigma: np.ndarray  # (M, |I|) selection of active slacked task rows
    Sigma0: np.ndarray  # (M + R, |I0|) selection over task and priority rows
    K_bar: np.ndarray  # active priority rows restricted to active task columns
    z: np.ndarray  # one entry per priority row, zero where the row is inactive
    V_z: float
    convergence_set_residual: float
    active_tasks: tuple
    active_priority_rows: tuple
    grad_active: np.ndarray  # dh/dq rows of the active slacked tasks


def active_set_diagnostics(problem: QpProblem, solution: QpSolution) -> StabilityDiagnostics:
    """Selection matrices and ``z = K_bar Sigma^T gamma(h)`` at a solved step.

    In auto mode each active priority row also carries its relaxation term
    ``V v``, so ``z`` measures the distance to the stack the QP enforces.
    """
    meta = problem.meta
    task_ids = list(meta["task_ids"])
    slacked = list(meta["slacked_ids"])
    K = meta["K"]
    M, R = len(slacked), K.shape[0]
    gamma = dict(zip(task_ids, meta["gamma_h"]))
    grads = dict(zip(task_ids, meta["grad_h"]))
    active = set(solution.active_set)

    task_row = {lab[1]: k for k, lab in enumerate(problem.row_labels) if lab[0] == "task"}
    prio_rows = [k for k, lab in enumerate(problem.row_labels) if lab[0] == "priority"]
    act_tasks = tuple(i for i, tid in enumerate(slacked) if task_row[tid] in active)
    act_prio = tuple(r for r, k in enumerate(prio_rows) if k in active)

    Sigma = np.zeros((M, len(act_tasks)))
    for col, i in enumerate(act_tasks):
        Sigma[i, col] = 1.0
    Sigma0 = np.zeros((M + R, len(act_tasks) + len(act_prio)))
    for col, i in enumerate(act_tasks):
        Sigma0[i, col] = 1.0
    for col, r in enumerate(act_prio, start=len(act_tasks)):
        Sigma0[M + r, col] = 1.0

    gamma_vec = np.array([gamma[t] for t in slacked])
    K_bar = K[list(act_prio)] @ Sigma if R else np.zeros((0, len(act_tasks)))
    z = np.zeros(R)
    if act_prio:
        z[list(act_prio)] = K_bar @ Sigma.T @ gamma_vec
        # auto mode: the stack actually enforced is K delta <= V v
        v_block = problem.var_layout.get("v", slice(0, 0))
        if solution.z_star[v_block].size:
            relax = problem.A[np.array(prio_rows)[list(act_prio)]][:, v_block] @ solution.z_star[v_block]
            z[list(act_prio)] += relax
    width = len(meta["grad_h"][0]) if len(meta["grad_h"]) else 0
    grad_active = np.array([grads[slacked[i]] for i in act_tasks]).reshape(len(act_tasks), width)
    V_z = 0.5 * float(z @ z)
    return StabilityDiagnostics(
        Sigma, Sigma0, K_bar, z, V_z, float(np.linalg.norm(z)),
        tuple(slacked[i] for i in act_tasks), act_prio, grad_active,
    )


def rank_monitor(K_bar, Sigma, grad_h, tol: float = DEFAULT_RANK_TOL, absolute: bool = True):
    """Numerical rank of ``K_bar Sigma^T dh/dq`` and the rank-loss flag.

    ``grad_h`` stacks the gradients of all slacked tasks (one row each). The
    flag is raised when the rank is below the number of active priority rows,
    which for a fully active chain of ``|I|`` tasks is ``|I| - 1``.

    Returns:
        (rank, drop_flag)
    """
    K_bar = np.atleast_2d(np.asarray(K_bar, dtype=float))
    Sigma = np.asarray(Sigma, dtype=float)
    rows = K_bar.shape[0] if K_bar.size else 0
    if rows == 0:
        return 0, False
    Mmat = K_bar @ Sigma.T @ np.asarray(grad_h, dtype=float)
    s = np.linalg.svd(Mmat, compute_uv=False)
    cutoff = tol if absolute else tol * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    return rank, rank < rows


def continuity_checker(values: Sequence, threshold: float, mask: Sequence[bool] | None = None):
    """Largest per-step jump ``||x_k - x_{k-1}||_inf`` and whether it stays within ``threshold``.

    ``mask`` (same length as ``values``) restricts the maximum to steps ``k``
    flagged true.
    """
    jumps = step_jumps(values)
    if mask is not None:
        jumps = jumps[np.asarray(mask, dtype=bool)[1:]]
    max_jump = float(jumps.max()) if jumps.size else 0.0
    return max_jump, max_jump <= threshold


def step_jumps(values: Sequence) -> np.ndarray:
    X = np.asarray(values, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("empty channel")
    if X.shape[0] == 1:
        return np.zeros(0)
    return np.max(np.abs(np.diff(X, axis=0)), axis=1)


def _pinv(J: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(J, rcond=PINV_RCOND)


def baseline_matrices(jacobians: Sequence[np.ndarray], mode: str = "superposition"):
    """Stacked Jacobian ``J`` and the matrix ``J_bar`` of the baseline law ``qdot = -J_bar sigma``."""
    if mode not in ("superposition", "null_space"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    jacobians = [np.atleast_2d(np.asarray(J, dtype=float)) for J in jacobians]
    n = jacobians[0].shape[1]
    blocks = []
    N = np.eye(n)
    for k, Ji in enumerate(jacobians):
        if mode == "superposition":
            blocks.append(_pinv(Ji))
        else:
            blocks.append(N @ _pinv(Ji))
            aug = np.vstack(jacobians[: k + 1])
            N = np.eye(n) - _pinv(aug) @ aug
    return np.vstack(jacobians), np.hstack(blocks)


def jacobian_baseline_controllers(tasks: Sequence[GoalPointTask], chain: LinkChain, q, mode: str = "superposition", t: float = 0.0):
    """Pseudoinverse baselines driving each task error ``sigma - sigma_d`` to zero (identity gains)."""
    q = np.asarray(q, dtype=float)
    errors, jacobians = [], []
    for task in tasks:
        sigma_d, _ = task.trajectory(t)
        errors.append(forward_kinematics(chain, q, task.selector) - sigma_d)
        jacobians.append(task_jacobian(chain, q, task.selector))
    _, J_bar = baseline_matrices(jacobians, mode)
    return -J_bar @ np.concatenate(errors)

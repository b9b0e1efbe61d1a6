"""Planar serial-chain manipulator: kinematics, task Jacobians and Lagrangian dynamics.

Links are modelled as uniform thin rods (mass at the midpoint, inertia
``m L^2 / 12`` about the centre). Joint angles are relative and unwrapped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

DEFAULT_FRICTION = 0.1


@dataclass(frozen=True)
class LinkChain:
    """Geometry and inertial parameters of a planar N-link revolute chain."""

    link_lengths: np.ndarray
    link_masses: np.ndarray = None
    joint_viscous_friction: np.ndarray = None
    gravity_accel: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        lengths = np.asarray(self.link_lengths, dtype=float).ravel()
        n = lengths.size
        masses = np.ones(n) if self.link_masses is None else self.link_masses
        friction = (
            np.full(n, DEFAULT_FRICTION)
            if self.joint_viscous_friction is None
            else self.joint_viscous_friction
        )
        masses = np.asarray(masses, dtype=float).ravel()
        friction = np.asarray(friction, dtype=float).ravel()
        gravity = np.asarray(self.gravity_accel, dtype=float).ravel()
        if n < 1:
            raise ValueError("chain needs at least one link")
        if masses.size != n or friction.size != n:
            raise ValueError("link_masses and joint_viscous_friction must have one entry per link")
        if gravity.size != 2:
            raise ValueError("gravity_accel must be a 2-vector")
        if np.any(lengths <= 0) or np.any(masses <= 0):
            raise ValueError("link lengths and masses must be strictly positive")
        if np.any(friction < 0):
            raise ValueError("friction coefficients must be nonnegative")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "link_masses", masses)
        object.__setattr__(self, "joint_viscous_friction", friction)
        object.__setattr__(self, "gravity_accel", gravity)

    @property
    def n(self) -> int:
        return self.link_lengths.size


@dataclass(frozen=True)
class RobotState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        qdot = np.asarray(self.qdot, dtype=float).ravel()
        if q.shape != qdot.shape:
            raise ValueError("q and qdot dimensions differ")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qdot))):
            raise ValueError("state must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qdot)


@dataclass(frozen=True)
class Selector:
    """Picks a task variable out of the chain.

    kind:
        ``"position"``: planar point on link ``link`` (1-based) at ``fraction``
        of its length (1.0 is the distal endpoint).
        ``"orientation"``: cumulative angle of link ``link``.
        ``"joint"``: the single coordinate ``q[link - 1]``.
        ``"configuration"``: the whole joint vector (identity map).
    """

    kind: str
    link: int = 0
    fraction: float = 1.0

    @property
    def dim(self) -> int:
        return {"position": 2, "orientation": 1, "joint": 1}.get(self.kind, -1)

    def output_dim(self, n: int) -> int:
        return n if self.kind == "configuration" else self.dim


def endpoint(link: int) -> Selector:
    return Selector("position", link)


def orientation(link: int) -> Selector:
    return Selector("orientation", link)


def _check(chain: LinkChain, q: np.ndarray, sel: Selector) -> None:
    if q.shape != (chain.n,):
        raise ValueError(f"expected {chain.n} joint angles, got shape {q.shape}")
    if sel.kind == "configuration":
        return
    if sel.kind not in ("position", "orientation", "joint"):
        raise ValueError(f"unknown selector kind {sel.kind!r}")
    if not 1 <= sel.link <= chain.n:
        raise IndexError(f"link index {sel.link} out of range 1..{chain.n}")


def _arms(chain: LinkChain, sel: Selector) -> np.ndarray:
    arms = chain.link_lengths[: sel.link].copy()
    arms[-1] *= sel.fraction
    return arms


def forward_kinematics(chain: LinkChain, q, sel: Selector) -> np.ndarray:
    """Task variable selected by ``sel`` at configuration ``q``."""
    q = np.asarray(q, dtype=float)
    _check(chain, q, sel)
    if sel.kind == "configuration":
        return q.copy()
    if sel.kind == "joint":
        return q[sel.link - 1 : sel.link].copy()
    theta = np.cumsum(q[: sel.link])
    if sel.kind == "orientation":
        return theta[-1:].copy()
    arms = _arms(chain, sel)
    return np.array([arms @ np.cos(theta), arms @ np.sin(theta)])


def task_jacobian(chain: LinkChain, q, sel: Selector) -> np.ndarray:
    """Jacobian ``d sigma / d q`` with shape (m, N)."""
    q = np.asarray(q, dtype=float)
    _check(chain, q, sel)
    n = chain.n
    if sel.kind == "configuration":
        return np.eye(n)
    J = np.zeros((sel.dim, n))
    k = sel.link
    if sel.kind == "joint":
        J[0, k - 1] = 1.0
        return J
    if sel.kind == "orientation":
        J[0, :k] = 1.0
        return J
    theta = np.cumsum(q[:k])
    arms = _arms(chain, sel)
    # column i collects every link distal to (and including) joint i
    J[0, :k] = -np.cumsum((arms * np.sin(theta))[::-1])[::-1]
    J[1, :k] = np.cumsum((arms * np.cos(theta))[::-1])[::-1]
    return J


def task_hessian(chain: LinkChain, q, sel: Selector) -> np.ndarray:
    """Second derivatives ``d^2 sigma_a / dq_i dq_j`` with shape (m, N, N)."""
    q = np.asarray(q, dtype=float)
    _check(chain, q, sel)
    n = chain.n
    m = sel.output_dim(n)
    Hs = np.zeros((m, n, n))
    if sel.kind != "position":
        return Hs
    k = sel.link
    theta = np.cumsum(q[:k])
    arms = _arms(chain, sel)
    tail_c = np.cumsum((arms * np.cos(theta))[::-1])[::-1]
    tail_s = np.cumsum((arms * np.sin(theta))[::-1])[::-1]
    idx = np.maximum.outer(np.arange(k), np.arange(k))
    Hs[0, :k, :k] = -tail_c[idx]
    Hs[1, :k, :k] = -tail_s[idx]
    return Hs


def jdot_qdot(chain: LinkChain, q, qdot, sel: Selector) -> np.ndarray:
    """Drift term ``Jdot(q, qdot) qdot``."""
    H = task_hessian(chain, q, sel)
    qdot = np.asarray(qdot, dtype=float)
    return np.einsum("aij,i,j->a", H, qdot, qdot)


class DynamicsTerms(NamedTuple):
    D: np.ndarray
    C: np.ndarray
    g_vec: np.ndarray
    friction: np.ndarray


class ControlAffineForm(NamedTuple):
    f: np.ndarray
    g_mat: np.ndarray


def _com_terms(chain: LinkChain, q: np.ndarray):
    """COM Jacobians (N, 2, N) and their q-derivatives (N, 2, N, N)."""
    n = chain.n
    Jc = np.empty((n, 2, n))
    dJc = np.empty((n, 2, n, n))
    for k in range(1, n + 1):
        sel = Selector("position", k, 0.5)
        Jc[k - 1] = task_jacobian(chain, q, sel)
        dJc[k - 1] = task_hessian(chain, q, sel)
    return Jc, dJc


def inertia_matrix(chain: LinkChain, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    Jc, _ = _com_terms(chain, q)
    m = chain.link_masses
    inertia = m * chain.link_lengths**2 / 12.0
    D = np.einsum("k,kai,kaj->ij", m, Jc, Jc)
    # link k rotates with the sum of the first k joint rates
    cum = np.cumsum(inertia[::-1])[::-1]
    D += cum[np.maximum.outer(np.arange(chain.n), np.arange(chain.n))]
    return 0.5 * (D + D.T)


def dynamics_terms(chain: LinkChain, state: RobotState) -> DynamicsTerms:
    """Inertia, Christoffel-built Coriolis matrix, gravity and friction torques."""
    q, qdot = state.q, state.qdot
    if q.shape != (chain.n,):
        raise ValueError(f"expected {chain.n} joints, got {q.shape}")
    Jc, dJc = _com_terms(chain, q)
    m = chain.link_masses
    D = inertia_matrix(chain, q)
    # dD[i, j, k] = d D_ij / d q_k; rotational part is configuration independent
    dD = np.einsum("k,kaic,kaj->ijc", m, dJc, Jc)
    dD = dD + dD.transpose(1, 0, 2)
    christoffel = 0.5 * (dD + dD.transpose(0, 2, 1) - dD.transpose(2, 0, 1))
    C = christoffel @ qdot
    g_vec = -np.einsum("k,kai,a->i", m, Jc, chain.gravity_accel)
    friction = chain.joint_viscous_friction * qdot
    return DynamicsTerms(D, C, g_vec, friction)


def forward_dynamics(chain: LinkChain, state: RobotState, tau) -> np.ndarray:
    """Joint accelerations ``D^-1 (tau - C qdot - F_v qdot - g)``."""
    D, C, g_vec, friction = dynamics_terms(chain, state)
    rhs = np.asarray(tau, dtype=float) - C @ state.qdot - friction - g_vec
    return np.linalg.solve(D, rhs)


def control_affine(chain: LinkChain, state: RobotState, max_cond: float = 1e12) -> ControlAffineForm:
    D, C, g_vec, friction = dynamics_terms(chain, state)
    if np.linalg.cond(D) > max_cond:
        raise np.linalg.LinAlgError("inertia matrix is numerically singular")
    Dinv = np.linalg.inv(D)
    n = chain.n
    f = np.concatenate([state.qdot, -Dinv @ (C @ state.qdot + friction + g_vec)])
    g_mat = np.vstack([np.zeros((n, n)), Dinv])
    return ControlAffineForm(f, g_mat)


def kinetic_energy(chain: LinkChain, state: RobotState) -> float:
    return 0.5 * float(state.qdot @ inertia_matrix(chain, state.q) @ state.qdot)

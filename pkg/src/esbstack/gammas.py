"""Offline selection of the linear gains used in auxiliary CBFs under torque bounds.

The semi-infinite program is approximated by brute force: states are sampled
on the boundary of each auxiliary barrier, and a candidate gain vector is
accepted when a bounded torque satisfying every non-relaxed barrier exists
at every sample (one small LP per sample).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from esbstack.manipulator import LinkChain, RobotState, dynamics_terms
from esbstack.tasks import EsbTask, JointLimitTask

MARGIN_CAP = 1e6
FEAS_TOL = 1e-9


@dataclass
class GammaSelectionResult:
    gammas: dict  # task id -> selected gain, in task order
    cap: float
    samples_used: int
    min_margin: float
    note: str = ""
    grid: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


@dataclass(frozen=True)
class GammaSampling:
    samples: int = 40
    grid_points: int = 12
    cap: float = 20.0
    qdot_max: float | None = None
    decades: float = 3.0
    seed: int = 0


def gamma_grid(cap: float, grid_points: int, decades: float = 3.0) -> np.ndarray:
    """Ascending log-spaced candidates ending at ``cap``."""
    if cap <= 0 or grid_points < 1:
        raise ValueError("cap and grid_points must be positive")
    if grid_points == 1:
        return np.array([float(cap)])
    return cap * np.logspace(-decades, 0.0, grid_points)


def barrier_row(task: EsbTask, chain: LinkChain, state: RobotState, gain: float, dyn=None):
    """Coefficients of ``dh'/dt + gain h' >= 0`` as ``a . tau + b >= 0``.

    ``h' = hdot + gain h``; the outer class-K function uses the same gain.

    Returns:
        (a, b, h, h_prime)
    """
    D, C, g_vec, friction = dyn if dyn is not None else dynamics_terms(chain, state)
    Dinv = np.linalg.inv(D)
    qd = state.qdot
    val = task.evaluate(chain, state.q)
    Hq = task.hessian(chain, state.q)
    hdot = float(val.grad @ qd)
    h_prime = hdot + gain * val.h
    a = val.grad @ Dinv
    b = float(qd @ Hq @ qd) + gain * hdot + float(a @ (-C @ qd - friction - g_vec)) + gain * h_prime
    return a, b, float(val.h), float(h_prime)


def torque_margin(A: np.ndarray, b: np.ndarray, u_max: float) -> float:
    """``max_{|tau|_inf <= u_max} min_i (A tau + b)_i`` (capped above)."""
    n = A.shape[1]
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    # m - a_i.tau <= b_i
    A_ub = np.hstack([-A, np.ones((A.shape[0], 1))])
    bounds = [(-u_max, u_max)] * n + [(None, MARGIN_CAP)]
    res = linprog(cost, A_ub=A_ub, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"margin LP failed: {res.message}")
    return float(res.x[-1])


def _q_box(tasks, n: int):
    lo, hi = np.full(n, -math.pi), np.full(n, math.pi)
    for task in tasks:
        if isinstance(task, JointLimitTask):
            j = task.selector.link - 1
            if task.upper:
                hi[j] = min(hi[j], task.bound)
            else:
                lo[j] = max(lo[j], task.bound)
    return lo, hi


class _Sampler:
    """Fixed random (q, direction) draws reused for every candidate."""

    def __init__(self, tasks, chain: LinkChain, sampling: GammaSampling):
        rng = np.random.default_rng(sampling.seed)
        lo, hi = _q_box(tasks, chain.n)
        self.draws = [
            [(rng.uniform(lo, hi), rng.standard_normal(chain.n)) for _ in range(sampling.samples)]
            for _ in tasks
        ]

    def boundary_states(self, j: int, task: EsbTask, chain: LinkChain, gain: float, qdot_max):
        """States on ``h'_j = 0`` along each drawn velocity direction (exact, h' is linear in qdot)."""
        for q, d in self.draws[j]:
            val = task.evaluate(chain, q)
            slope = float(val.grad @ d)
            if abs(slope) < 1e-12:
                continue
            qd = -gain * val.h / slope * d
            if qdot_max is not None and np.max(np.abs(qd)) > qdot_max:
                continue
            yield RobotState(q, qd)


def evaluate_candidate(tasks, chain: LinkChain, gains, u_max: float, sampling: GammaSampling, sampler=None):
    """Worst margin over all boundary samples for one gain vector.

    Returns:
        (min_margin, samples_used); the margin is ``inf`` when no sample applies.
    """
    sampler = sampler or _Sampler(tasks, chain, sampling)
    worst, used = math.inf, 0
    for j, task_j in enumerate(tasks):
        for state in sampler.boundary_states(j, task_j, chain, gains[j], sampling.qdot_max):
            dyn = dynamics_terms(chain, state)
            rows = [barrier_row(t, chain, state, g, dyn) for t, g in zip(tasks, gains)]
            # only states inside every barrier's safe set matter
            if any(h < -FEAS_TOL or hp < -FEAS_TOL for _, _, h, hp in rows):
                continue
            A = np.array([r[0] for r in rows])
            b = np.array([r[1] for r in rows])
            worst = min(worst, torque_margin(A, b, u_max))
            used += 1
    return worst, used


def select_gammas(tasks, chain: LinkChain, u_max: float, sampling: GammaSampling = GammaSampling()) -> GammaSelectionResult:
    """Largest-sum feasible gains on a log grid up to ``sampling.cap``.

    Only safety-critical tasks enter the program: relaxed tasks stay feasible
    through their slack and receive the cap. A uniform gain is found first and
    then each gain is raised in turn while the candidate stays feasible.
    """
    tasks = list(tasks)
    grid = gamma_grid(sampling.cap, sampling.grid_points, sampling.decades)
    hard = [t for t in tasks if t.safety_critical]
    cap = float(grid[-1])
    if not hard:
        return GammaSelectionResult({t.id: cap for t in tasks}, cap, 0, math.inf, "unbounded", grid)

    sampler = _Sampler(hard, chain, sampling)

    def check(gains):
        return evaluate_candidate(hard, chain, gains, u_max, sampling, sampler)

    best = None
    for g in grid[::-1]:
        margin, used = check([g] * len(hard))
        if margin >= -FEAS_TOL:
            best = ([g] * len(hard), margin, used)
            break
        last = (margin, used)
    if best is None:
        g0 = float(grid[0])
        gains = {t.id: (g0 if t.safety_critical else cap) for t in tasks}
        return GammaSelectionResult(gains, cap, last[1], last[0], "infeasible", grid)

    gains, margin, used = best
    changed = True
    while changed:
        changed = False
        for i in range(len(hard)):
            for g in grid[grid > gains[i]][::-1]:
                trial = list(gains)
                trial[i] = g
                m, u = check(trial)
                if m >= -FEAS_TOL:
                    gains, margin, used, changed = trial, m, u, True
                    break
    by_id = dict(zip((t.id for t in hard), (float(g) for g in gains)))
    note = "capped" if all(g == cap for g in gains) else ""
    return GammaSelectionResult({t.id: by_id.get(t.id, cap) for t in tasks}, cap, used, margin, note, grid)

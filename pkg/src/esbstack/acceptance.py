"""Acceptance suite: trace summaries and the twelve pass/fail checks."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from esbstack.diagnostics import baseline_matrices, step_jumps
from esbstack.manipulator import LinkChain, Selector, forward_kinematics, task_jacobian
from esbstack.priority import StackSpec, delta_ordering_preserved, ordering_precondition
from esbstack.qp import QpProblem, analytic_unprioritized_solution, solve_qp
from esbstack.scenario import builtin_scenario
from esbstack.sim import Integrator, Scenario, Segment, run_scenario, trace_channel
from esbstack.tasks import (
    ClassKFunction,
    goal_point_task,
    joint_limit_tasks,
    look_at_point_task,
    orientation_task,
)

CONTINUITY_FACTOR = 2.0
CONTINUITY_PERCENTILE = 95.0


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    values: dict = field(default_factory=dict)
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number:2d} [{status}] {self.name}: {self.detail}"


# trace summaries ------------------------------------------------------------

def switch_continuity(sc: Scenario, trace, channel: str = "u") -> list[dict]:
    """Largest step jump inside each switch window against the preceding segment.

    The baseline is the 95th percentile of step jumps of the previous segment,
    excluding its own switch window; a window passes when its largest jump is
    at most twice that baseline.
    """
    values = trace_channel(trace, channel)
    jumps = np.concatenate([[0.0], step_jumps(values)])
    seg = np.array([r.segment for r in trace])
    in_sw = np.array([r.in_switch for r in trace])
    k = np.arange(len(trace))
    out = []
    for s in range(1, len(sc.timeline)):
        window = (seg == s) & in_sw
        steady = (seg == s - 1) & ~in_sw & (k >= 1)
        if not window.any() or not steady.any():
            continue
        base = float(np.percentile(jumps[steady], CONTINUITY_PERCENTILE))
        worst = float(jumps[window].max())
        idx = np.flatnonzero(window)
        out.append({
            "segment": s,
            "window": [int(idx[0]), int(idx[-1])],
            "max_jump": worst,
            "baseline_p95": base,
            "bound": CONTINUITY_FACTOR * base,
            "passed": worst <= CONTINUITY_FACTOR * base,
        })
    return out


def summarize_trace(sc: Scenario, trace) -> dict:
    """Every number the acceptance checks read, in JSON-friendly form."""
    last = trace[-1]
    ids = [t.id for t in sc.tasks]
    h = {i: trace_channel(trace, "h", i) for i in ids}
    n = len(trace)
    tail = slice(max(0, n - 1000), n)
    v_last = np.asarray(last.v, dtype=float)
    dV = np.diff(trace_channel(trace, "V_gamma"))
    summary = {
        "scenario": sc.name,
        "iterations": n,
        "dt": sc.integrator.dt,
        "final_h": {i: float(h[i][-1]) for i in ids},
        "min_h": {i: float(h[i].min()) for i in ids},
        "tail_drift_h": {i: float(np.ptp(h[i][tail])) for i in ids},
        "final_V_z": float(last.V_z),
        "final_V_gamma": float(last.V_gamma),
        "max_V_gamma_increase": float(dV.max()) if dV.size else 0.0,
        "final_v_norm2": float(np.nansum(v_last**2)),
        "mid_index": n // 2 - 1,
        "mid_h": {i: float(h[i][n // 2 - 1]) for i in ids},
        "segment_end": [
            {
                "iteration": min(seg.until_iteration, n) - 1,
                "top_tasks": list(seg.stack.order[0]),
                "h": {i: float(h[i][min(seg.until_iteration, n) - 1]) for i in seg.stack.order[0]},
            }
            for seg in sc.timeline
            if seg.until_iteration - 1 < n or seg is sc.timeline[-1]
        ],
        "continuity_u": switch_continuity(sc, trace, "u"),
        "rank_drop_iterations": [r.iteration for r in trace if r.rank_drop],
    }
    if last.tau is not None:
        tau = trace_channel(trace, "tau")
        summary["max_abs_tau"] = float(np.max(np.abs(tau)))
        summary["continuity_tau"] = switch_continuity(sc, trace, "tau")
    if sc.model_kind == "dynamic":
        hp = {i: trace_channel(trace, "h_prime", i) for i in ids}
        summary["final_h_prime"] = {i: float(hp[i][-1]) for i in ids}
        summary["mid_h_prime"] = {i: float(hp[i][n // 2 - 1]) for i in ids}
    return summary


def _run(name: str, overrides=()):
    sc = builtin_scenario(name, overrides)
    t0 = time.perf_counter()
    trace = run_scenario(sc)
    return sc, trace, time.perf_counter() - t0


def _fmt(x: float) -> str:
    return f"{x:.3g}"


# scenario criteria -------------------------------------------------------------

def criterion_1() -> CriterionResult:
    sc, trace, secs = _run("sim1_independent")
    s = summarize_trace(sc, trace)
    worst = max(abs(v) for v in s["final_h"].values())
    ok = worst < 1e-2 and s["max_V_gamma_increase"] <= 1e-6 and secs < 10.0 and s["iterations"] <= 10_000
    return CriterionResult(1, "independent-task convergence", ok,
                           {"max_final_abs_h": worst, "max_V_gamma_increase": s["max_V_gamma_increase"], "runtime_s": secs},
                           f"max|h|={_fmt(worst)} (<1e-2), max dV_gamma={_fmt(s['max_V_gamma_increase'])} (<=1e-6), "
                           f"runtime={secs:.2f}s (<10)")


def criterion_2() -> CriterionResult:
    sc, trace, _ = _run("sim1_independent", ["timeline.0.stack.mode=auto"])
    s = summarize_trace(sc, trace)
    worst = max(abs(v) for v in s["final_h"].values())
    v2 = s["final_v_norm2"]
    ok = v2 < 1e-6 and worst < 1e-2
    return CriterionResult(2, "auto-stack tightening", ok, {"final_v_norm2": v2, "max_final_abs_h": worst},
                           f"||v||^2={_fmt(v2)} (<1e-6), max|h|={_fmt(worst)} (<1e-2)")


def criterion_3() -> CriterionResult:
    sc, trace, _ = _run("sim2_dependent")
    s = summarize_trace(sc, trace)
    h, drift, v2 = s["final_h"], s["tail_drift_h"], s["final_v_norm2"]
    ok = (abs(h["T1"]) < 1e-2 and all(abs(h[i]) > 0.05 and drift[i] < 1e-3 for i in ("T2", "T3")) and v2 > 1e-4)
    return CriterionResult(3, "dependent-task prioritization", ok, {"final_h": h, "tail_drift_h": drift, "final_v_norm2": v2},
                           f"|h1|={_fmt(abs(h['T1']))} (<1e-2), |h2|={_fmt(abs(h['T2']))}, |h3|={_fmt(abs(h['T3']))} (>0.05), "
                           f"drift={_fmt(max(drift['T2'], drift['T3']))} (<1e-3), ||v||^2={_fmt(v2)} (>1e-4)")


def criterion_4() -> CriterionResult:
    sc, trace, _ = _run("sim3_switching")
    s = summarize_trace(sc, trace)
    tops = [abs(v) for seg in s["segment_end"] for v in seg["h"].values()]
    cont = s["continuity_u"]
    ok = all(t < 2e-2 for t in tops) and len(cont) == 2 and all(c["passed"] for c in cont)
    ratios = [c["max_jump"] / c["baseline_p95"] if c["baseline_p95"] > 0 else math.inf for c in cont]
    return CriterionResult(4, "priority switching", ok, {"segment_top_abs_h": tops, "continuity": cont},
                           f"top-task |h| per segment={[_fmt(t) for t in tops]} (<2e-2), "
                           f"window jump / p95={[_fmt(r) for r in ratios]} (<=2)")


def criterion_5() -> CriterionResult:
    sc, trace, _ = _run("sim4_insert_remove")
    s = summarize_trace(sc, trace)
    limits = {i: v for i, v in s["min_h"].items() if i.startswith("limits_")}
    worst = min(limits.values())
    cont = s["continuity_u"]
    ok = worst >= -1e-6 and len(cont) == 1 and cont[0]["passed"] and cont[0]["window"][0] == 250
    c = cont[0] if cont else {"max_jump": math.nan, "bound": math.nan}
    return CriterionResult(5, "task insertion/removal", ok, {"min_limit_h": worst, "continuity": cont},
                           f"min limit h={_fmt(worst)} (>=-1e-6), window jump={_fmt(c['max_jump'])} (<= {_fmt(c['bound'])})")


def criterion_6() -> CriterionResult:
    sc, trace, _ = _run("sim5_dynamic")
    s = summarize_trace(sc, trace)
    tau = s["max_abs_tau"]
    mid = max(abs(s["mid_h"]["T1"]), abs(s["mid_h_prime"]["T1"]))
    end = max(abs(s["final_h"]["T2"]), abs(s["final_h_prime"]["T2"]))
    cont = s["continuity_tau"]
    ok = tau <= 60.0 + 1e-6 and mid < 5e-2 and end < 5e-2 and len(cont) == 1 and cont[0]["passed"]
    c = cont[0] if cont else {"max_jump": math.nan, "bound": math.nan}
    return CriterionResult(6, "dynamic model with torque bounds", ok,
                           {"max_abs_tau": tau, "mid_T1": mid, "end_T2": end, "continuity": cont},
                           f"max|tau|={_fmt(tau)} (<=60), mid max(|h1|,|h1'|)={_fmt(mid)}, end max(|h2|,|h2'|)={_fmt(end)} (<5e-2), "
                           f"tau window jump={_fmt(c['max_jump'])} (<= {_fmt(c['bound'])})")


EX5_POINT = np.array([-1.0004, 0.0])


def criterion_7() -> CriterionResult:
    sc, trace, _ = _run("ex5_rank_loss")
    q = trace_channel(trace, "q")
    flagged = [r.iteration for r in trace if r.rank_drop]
    near = [k for k in flagged if np.linalg.norm(q[k] - EX5_POINT) < 0.05]
    channels = {"u": trace_channel(trace, "u")}
    channels.update({f"h_{t.id}": trace_channel(trace, "h", t.id) for t in sc.tasks})
    worst_ratio = 0.0
    for name, vals in channels.items():
        jumps = np.concatenate([[0.0], step_jumps(vals)])
        med = float(np.median(jumps[1:]))
        for k in near:
            worst_ratio = max(worst_ratio, jumps[k] / med if med > 0 else math.inf)
    ok = bool(near) and worst_ratio <= 10.0
    first = near[0] if near else None
    return CriterionResult(7, "rank-loss robustness", ok,
                           {"flagged": flagged, "near_flagged": near, "worst_jump_ratio": worst_ratio},
                           f"flag near x*={first is not None}"
                           + (f" (iteration {first}, x={np.round(q[first], 5).tolist()})" if first is not None else "")
                           + f", worst jump/median={_fmt(worst_ratio)} (<=10)")


# randomized criteria -------------------------------------------------------------

def unprioritized_qp(G: np.ndarray, gamma_h: np.ndarray, l: float) -> QpProblem:
    """``min ||u||^2 + l ||delta||^2`` s.t. ``G u + delta >= -gamma(h)``."""
    m, n = G.shape
    H = np.diag(np.r_[2.0 * np.ones(n), 2.0 * l * np.ones(m)])
    A = np.hstack([G, np.eye(m)])
    return QpProblem(H, np.zeros(n + m), A, -gamma_h, {"u": slice(0, n), "delta": slice(n, n + m)})


def criterion_8(seed: int = 0, instances: int = 100) -> CriterionResult:
    rng = np.random.default_rng(seed)
    worst, done, tried = 0.0, 0, 0
    while done < instances:
        tried += 1
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        G = rng.standard_normal((m, n))
        gamma_h = -rng.uniform(0.05, 2.0, m)
        l = float(10 ** rng.uniform(-2, 2))
        qdot_ref, delta_ref = analytic_unprioritized_solution(G, gamma_h, l)
        # the closed form assumes every task row active: positive multipliers
        if np.any(delta_ref > -1e-9):
            continue
        prob = unprioritized_qp(G, gamma_h, l)
        sol = solve_qp(prob)
        worst = max(worst, float(np.max(np.abs(prob.block(sol.z_star, "u") - qdot_ref))))
        done += 1
    ok = worst < 1e-6
    return CriterionResult(8, "KKT oracle equivalence", ok, {"max_err": worst, "instances": done, "drawn": tried},
                           f"max ||qdot_QP - qdot_oracle||_inf={_fmt(worst)} over {done} instances (<1e-6)")


def prop3_selectors(n: int = 5):
    """Task maps whose stacked Jacobian has at most ``n`` rows."""
    return [Selector("position", n), Selector("orientation", 2), Selector("position", 3)]


def criterion_9(seed: int = 0, configs: int = 50) -> CriterionResult:
    rng = np.random.default_rng(seed)
    chain = LinkChain(np.full(5, 0.5))
    sels = prop3_selectors(5)
    asym, min_eig = 0.0, math.inf
    for _ in range(configs):
        q = rng.uniform(-math.pi, math.pi, chain.n)
        jac = [task_jacobian(chain, q, s) for s in sels]
        J, J_bar = baseline_matrices(jac, "superposition")
        P = J @ J_bar
        asym = max(asym, float(np.max(np.abs(P - P.T))))
        min_eig = min(min_eig, float(np.min(np.linalg.eigvals(P).real)))
    # joint-space tasks on distinct joints are mutually orthogonal
    q = rng.uniform(-math.pi, math.pi, chain.n)
    jac = [task_jacobian(chain, q, Selector("joint", j)) for j in range(1, chain.n + 1)]
    J, J_bar = baseline_matrices(jac, "superposition")
    ortho = float(np.max(np.abs(J @ J_bar - np.eye(chain.n))))
    ok = asym <= 1e-9 and min_eig >= -1e-9 and ortho < 1e-9
    return CriterionResult(9, "Jacobian superposition matrix properties", ok,
                           {"max_asymmetry": asym, "min_eigenvalue": min_eig, "orthogonal_err": ortho},
                           f"max|P-P^T|={_fmt(asym)} (<=1e-9), min eig={_fmt(min_eig)} (>=-1e-9), "
                           f"orthogonal ||P-I||={_fmt(ortho)} (<1e-9)")


def gradient_check_tasks():
    """One task of every kind on a 3-link chain (plus a configuration-space goal)."""
    chain = LinkChain([0.5, 0.5, 0.5])
    tasks = [
        goal_point_task("position", Selector("position", 3), [0.3, 0.8]),
        goal_point_task("configuration", Selector("configuration"), [0.1, -0.4, 0.7]),
        orientation_task("orientation", 2, 0.4),
        look_at_point_task("look_at", 3, [1.7, 1.2]),
        *joint_limit_tasks("limits", [2.0, 2.0, 2.0], [-2.0, -2.0, -2.0]),
    ]
    return chain, tasks


def gradient_errors(tasks, chain: LinkChain, seed: int = 0, configs: int = 100, eps: float = 1e-6) -> dict:
    """Largest relative error between analytic gradients and central differences, per task."""
    rng = np.random.default_rng(seed)
    worst = {t.id: 0.0 for t in tasks}
    for _ in range(configs):
        q = rng.uniform(-math.pi, math.pi, chain.n)
        for task in tasks:
            g = task.evaluate(chain, q).grad
            fd = np.zeros(chain.n)
            for j in range(chain.n):
                e = np.zeros(chain.n)
                e[j] = eps
                fd[j] = (task.value(chain, q + e) - task.value(chain, q - e)) / (2 * eps)
            rel = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
            worst[task.id] = max(worst[task.id], rel)
    return worst


def criterion_10(seed: int = 0, configs: int = 100, tasks=None) -> CriterionResult:
    chain, default_tasks = gradient_check_tasks()
    errs = gradient_errors(tasks if tasks is not None else default_tasks, chain, seed, configs)
    worst = max(errs.values())
    ok = worst < 1e-5
    return CriterionResult(10, "gradient checks", ok, {"max_rel_err": errs},
                           f"max relative error={_fmt(worst)} over {len(errs)} tasks x {configs} configs (<1e-5)")


def criterion_11(seed: int = 0, pairs: int = 1000) -> CriterionResult:
    rng = np.random.default_rng(seed)
    violations, done = 0, 0
    while done < pairs:
        m = int(rng.integers(2, 6))
        d1, d2 = rng.uniform(-2.0, 2.0, m), rng.uniform(-2.0, 2.0, m)
        i, j = rng.choice(m, 2, replace=False)
        if not ordering_precondition(d1, d2, i, j):
            continue
        violations += not delta_ordering_preserved(d1, d2, int(i), int(j), grid=1000)
        done += 1
    ok = violations == 0
    return CriterionResult(11, "slack ordering under blending", ok, {"violations": violations, "pairs": done},
                           f"{violations} violations over {done} pairs x 1000 grid points (==0)")


def adversarial_limit_scenario(rng: np.random.Generator, iterations: int = 600) -> Scenario:
    """Random joint box with a goal only reachable by leaving it."""
    n = 3
    chain = LinkChain(np.full(n, 0.5))
    q_plus = rng.uniform(0.4, 1.8, n)
    q_minus = -rng.uniform(0.4, 1.8, n)
    q0 = rng.uniform(0.8 * q_minus, 0.8 * q_plus)
    q_bad = rng.uniform(q_minus, q_plus)
    j = int(rng.integers(n))
    q_bad[j] = q_plus[j] + 0.6 if rng.random() < 0.5 else q_minus[j] - 0.6
    target = forward_kinematics(chain, q_bad, Selector("position", n))
    gain = float(rng.uniform(1.0, 5.0))
    limits = joint_limit_tasks("limits", q_plus, q_minus, ClassKFunction("linear", float(rng.uniform(1.0, 10.0))))
    goal = goal_point_task("goal", Selector("position", n), target, ClassKFunction("linear", gain))
    stack = StackSpec((tuple(t.id for t in limits), ("goal",)), 1e3, "auto")
    return Scenario("adversarial_limits", chain, limits + [goal], [Segment(iterations, stack)], q0,
                    integrator=Integrator("rk4", 0.01))


def criterion_12(seed: int = 0, scenarios: int = 20) -> CriterionResult:
    rng = np.random.default_rng(seed)
    worst = math.inf
    for _ in range(scenarios):
        sc = adversarial_limit_scenario(rng)
        trace = run_scenario(sc)
        lim = [t.id for t in sc.tasks if t.safety_critical]
        worst = min(worst, min(float(trace_channel(trace, "h", i).min()) for i in lim))
    ok = worst >= -1e-6
    return CriterionResult(12, "safety invariance", ok, {"min_limit_h": worst, "scenarios": scenarios},
                           f"min_t h_limit={_fmt(worst)} over {scenarios} scenarios (>=-1e-6)")


CRITERIA = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
    7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10, 11: criterion_11, 12: criterion_12,
}
RANDOMIZED = {8, 9, 10, 11, 12}
FAST = (1, 5, 7, 8, 9, 10, 11, 12)


def run_criterion(number: int, seed: int = 0) -> CriterionResult:
    fn = CRITERIA[number]
    t0 = time.perf_counter()
    res = fn(seed=seed) if number in RANDOMIZED else fn()
    res.seconds = time.perf_counter() - t0
    return res


def run_suite(suite: str = "full", seed: int = 0, workers: int = 1) -> list[CriterionResult]:
    """Run the fast subset or all twelve criteria, optionally in worker processes."""
    if suite not in ("fast", "full"):
        raise ValueError(f"unknown suite {suite!r}")
    numbers = FAST if suite == "fast" else tuple(CRITERIA)
    if workers <= 1:
        return [run_criterion(k, seed) for k in numbers]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_criterion, numbers, [seed] * len(numbers)))

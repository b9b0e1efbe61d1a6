"""Scenario documents: JSON schema, loading and the built-in scenario set."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import jsonschema
import numpy as np

from esbstack.manipulator import LinkChain, Selector
from esbstack.priority import DynamicConfig, StackSpec, Weights
from esbstack.sim import Integrator, Scenario, Segment, SwitchConfig
from esbstack.tasks import (
    ClassKFunction,
    goal_point_task,
    joint_limit_tasks,
    look_at_point_task,
    orientation_task,
)

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_GAMMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "gain"],
    "properties": {"kind": {"enum": ["linear", "cubic"]}, "gain": {"type": "number", "exclusiveMinimum": 0}},
}
_SELECTOR = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["position", "orientation", "joint", "configuration"]},
        "link": {"type": "integer", "minimum": 1},
        "fraction": _NUM,
    },
}
_PARAMS = {
    "goal_point": {
        "type": "object",
        "additionalProperties": False,
        "required": ["selector", "target"],
        "properties": {"selector": _SELECTOR, "target": _VEC},
    },
    "joint_limits": {
        "type": "object",
        "additionalProperties": False,
        "required": ["q_plus", "q_minus"],
        "properties": {"q_plus": _VEC, "q_minus": _VEC},
    },
    "orientation": {
        "type": "object",
        "additionalProperties": False,
        "required": ["link", "theta_d"],
        "properties": {"link": {"type": "integer", "minimum": 1}, "theta_d": _NUM},
    },
    "look_at_point": {
        "type": "object",
        "additionalProperties": False,
        "required": ["link", "target"],
        "properties": {
            "link": {"type": "integer", "minimum": 1},
            "target": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        },
    },
}


def _task_schema(kind: str) -> dict:
    return {
        "if": {"properties": {"kind": {"const": kind}}},
        "then": {"properties": {"params": _PARAMS[kind]}},
    }


SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["chain", "tasks", "timeline", "integrator", "initial_state"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "chain": {
            "type": "object",
            "additionalProperties": False,
            "required": ["lengths"],
            "properties": {
                "lengths": _VEC,
                "masses": _VEC,
                "friction": _VEC,
                "gravity": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            },
        },
        "initial_state": {
            "type": "object",
            "additionalProperties": False,
            "required": ["q"],
            "properties": {"q": _VEC, "qdot": _VEC, "tau": _VEC},
        },
        "tasks": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "kind", "params"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "kind": {"enum": list(_PARAMS)},
                    "params": {"type": "object"},
                    "gamma": _GAMMA,
                    "safety_critical": {"type": "boolean"},
                },
                "allOf": [_task_schema(k) for k in _PARAMS],
            },
        },
        "timeline": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["until_iteration", "stack"],
                "properties": {
                    "until_iteration": {"type": "integer", "minimum": 1},
                    "stack": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["order"],
                        "properties": {
                            "order": {"type": "array", "items": {"type": "array", "items": {"type": "string"}, "minItems": 1}},
                            "kappa": {"type": "number", "exclusiveMinimum": 1},
                            "mode": {"enum": ["fixed", "auto"]},
                        },
                    },
                },
            },
        },
        "switch": {
            "type": "object",
            "additionalProperties": False,
            "required": ["duration_s"],
            "properties": {
                "duration_s": {"type": "number", "exclusiveMinimum": 0},
                "profile": {"enum": ["linear", "smoothstep"]},
            },
        },
        "integrator": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dt"],
            "properties": {"method": {"enum": ["euler", "rk4"]}, "dt": {"type": "number", "exclusiveMinimum": 0}},
        },
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "l": {"type": "number", "exclusiveMinimum": 0},
                "l_delta": {"type": "number", "exclusiveMinimum": 0},
                "l_v": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "dynamics": {
            "type": "object",
            "additionalProperties": False,
            "required": ["enabled"],
            "properties": {
                "enabled": {"type": "boolean"},
                "velocity_tracking": {"type": "boolean"},
                "u_max": {"type": "number", "exclusiveMinimum": 0},
                "gamma_u": _GAMMA,
                "torque_rate_max": {"type": "number", "exclusiveMinimum": 0},
                "torque_preview": {"type": "number", "exclusiveMinimum": 0},
                "tracking_gains": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                "gamma_select": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "cap": {"type": "number", "exclusiveMinimum": 0},
                        "grid_points": {"type": "integer", "minimum": 1},
                        "samples": {"type": "integer", "minimum": 1},
                        "qdot_max": {"type": "number", "exclusiveMinimum": 0},
                        "seed": {"type": "integer"},
                    },
                },
            },
        },
        "rank_tol": {"type": "number", "exclusiveMinimum": 0},
    },
}


class ScenarioError(ValueError):
    """Invalid scenario document; ``pointer`` is a JSON pointer to the offending location."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def validate_document(doc: dict) -> None:
    """Raise :class:`ScenarioError` for the first schema violation."""
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.path), list(map(str, e.path))))
    if errors:
        err = errors[0]
        raise ScenarioError(err.message, _pointer(err.absolute_path))


def _gamma(spec: dict | None) -> ClassKFunction:
    return ClassKFunction(**spec) if spec else ClassKFunction()


def _build_tasks(doc: dict, relative_degree: int):
    tasks, groups = [], {}
    for k, item in enumerate(doc["tasks"]):
        kind, p, tid = item["kind"], item["params"], item["id"]
        opts = {"relative_degree": relative_degree}
        if "safety_critical" in item:
            opts["safety_critical"] = item["safety_critical"]
        gamma = _gamma(item.get("gamma"))
        try:
            if kind == "goal_point":
                s = p["selector"]
                sel = Selector(s["kind"], s.get("link", 0), s.get("fraction", 1.0))
                new = [goal_point_task(tid, sel, p["target"], gamma, **opts)]
            elif kind == "orientation":
                new = [orientation_task(tid, p["link"], p["theta_d"], gamma, **opts)]
            elif kind == "look_at_point":
                new = [look_at_point_task(tid, p["link"], p["target"], gamma, **opts)]
            else:
                new = joint_limit_tasks(tid, p["q_plus"], p["q_minus"], gamma, **opts)
        except (ValueError, IndexError) as exc:
            raise ScenarioError(str(exc), f"/tasks/{k}") from None
        groups[tid] = [t.id for t in new]
        tasks.extend(new)
    return tasks, groups


def _expand_group(group, groups, where) -> tuple:
    out = []
    for tid in group:
        if tid not in groups and not any(tid in members for members in groups.values()):
            raise ScenarioError(f"unknown task id {tid!r}", where)
        out.extend(groups.get(tid, [tid]))
    return tuple(out)


def build_scenario(doc: dict) -> Scenario:
    """Validate a scenario document and construct the :class:`Scenario`.

    Raises:
        ScenarioError: with a JSON pointer to the offending field.
    """
    validate_document(doc)
    dyn = doc.get("dynamics", {"enabled": False})
    enabled = dyn.get("enabled", False)
    tracking = enabled and dyn.get("velocity_tracking", False)
    model_kind = "dynamic_with_velocity_tracking" if tracking else ("dynamic" if enabled else "kinematic")
    ch = doc["chain"]
    try:
        chain = LinkChain(ch["lengths"], ch.get("masses"), ch.get("friction"), ch.get("gravity", [0.0, 0.0]))
    except ValueError as exc:
        raise ScenarioError(str(exc), "/chain") from None
    tasks, groups = _build_tasks(doc, 2 if model_kind == "dynamic" else 1)

    timeline = []
    for k, seg in enumerate(doc["timeline"]):
        st = seg["stack"]
        order = tuple(_expand_group(g, groups, f"/timeline/{k}/stack/order/{j}") for j, g in enumerate(st["order"]))
        try:
            stack = StackSpec(order, st.get("kappa", 1e3), st.get("mode", "fixed"))
        except ValueError as exc:
            raise ScenarioError(str(exc), f"/timeline/{k}/stack") from None
        timeline.append(Segment(seg["until_iteration"], stack))

    integ = doc["integrator"]
    integrator = Integrator(integ.get("method", "rk4"), integ["dt"])
    w = doc.get("weights", {})
    defaults = Weights()
    weights = Weights(w.get("l", defaults.l), w.get("l_delta", defaults.l_delta), w.get("l_v", defaults.l_v))
    dynamic = None
    if model_kind == "dynamic":
        base = DynamicConfig()
        dynamic = DynamicConfig(
            dyn.get("u_max", base.u_max),
            _gamma(dyn.get("gamma_u")) if "gamma_u" in dyn else base.gamma_u,
            dyn.get("torque_rate_max", base.torque_rate_max),
            dyn.get("torque_preview", base.torque_preview),
            integrator.dt,
        )
    sw = doc.get("switch")
    init = doc["initial_state"]
    try:
        return Scenario(
            name=doc.get("name", "scenario"),
            chain=chain,
            tasks=tasks,
            timeline=timeline,
            q0=np.asarray(init["q"], dtype=float),
            model_kind=model_kind,
            integrator=integrator,
            switch=SwitchConfig(sw["duration_s"], sw.get("profile", "linear")) if sw else None,
            qdot0=init.get("qdot"),
            tau0=init.get("tau"),
            weights=weights,
            dynamic=dynamic,
            tracking_gains=tuple(dyn.get("tracking_gains", (100.0, 36.0))),
            rank_tol=doc.get("rank_tol", 5e-3),
            description=doc.get("description", ""),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc), "/") from None


def load_document(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc}", "/") from None


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``dotted.path=value`` (value parsed as JSON, else taken as a string)."""
    if "=" not in assignment:
        raise ScenarioError(f"override {assignment!r} is not of the form key=value", "/")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    doc = copy.deepcopy(doc)
    node = doc
    parts = key.split(".")
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return doc


# Built-in scenarios. In sim1 task Ti targets the endpoint of link 4 - i,
# the only assignment whose targets are all reachable.

_PLANAR3 = {"lengths": [0.5, 0.5, 0.5]}


def _goal(tid, link, target, gamma=None):
    task = {"id": tid, "kind": "goal_point", "params": {"selector": {"kind": "position", "link": link}, "target": target}}
    if gamma:
        task["gamma"] = gamma
    return task


def _chain_stack(ids, mode, kappa=1e3):
    return {"order": [[i] for i in ids], "kappa": kappa, "mode": mode}


BUILTINS = {
    "sim1_independent": {
        "name": "sim1_independent",
        "description": "three independent link-endpoint goals, fixed stack T1<T2<T3",
        "chain": _PLANAR3,
        "initial_state": {"q": [1.2, -0.5, 0.5]},
        "tasks": [_goal("T1", 3, [0.5, 1.0]), _goal("T2", 2, [0.5, 0.5]), _goal("T3", 1, [0.0, 0.5])],
        "timeline": [{"until_iteration": 5000, "stack": _chain_stack(["T1", "T2", "T3"], "fixed")}],
        "integrator": {"method": "rk4", "dt": 0.01},
    },
    "sim2_dependent": {
        "name": "sim2_dependent",
        "description": "three dependent end-effector goals, relaxed stack T1<T2<T3",
        "chain": _PLANAR3,
        "initial_state": {"q": [1.2, -0.5, 0.5]},
        "tasks": [_goal("T1", 3, [0.5, 1.0]), _goal("T2", 3, [-0.2, -1.2]), _goal("T3", 3, [-0.25, 0.0])],
        "timeline": [{"until_iteration": 6000, "stack": _chain_stack(["T1", "T2", "T3"], "auto")}],
        "integrator": {"method": "rk4", "dt": 0.01},
        "weights": {"l": 1.0, "l_delta": 1.0, "l_v": 1.0},
    },
    "sim3_switching": {
        "name": "sim3_switching",
        "description": "dependent end-effector goals; stack changes at iterations 3333 and 6666",
        "chain": _PLANAR3,
        "initial_state": {"q": [1.2, -0.5, 0.5]},
        "tasks": [_goal("T1", 3, [0.5, 1.0]), _goal("T2", 3, [-0.2, -1.2]), _goal("T3", 3, [-0.25, 0.0])],
        "timeline": [
            {"until_iteration": 3333, "stack": _chain_stack(["T1", "T2", "T3"], "auto")},
            {"until_iteration": 6666, "stack": _chain_stack(["T2", "T3", "T1"], "auto")},
            {"until_iteration": 10000, "stack": _chain_stack(["T3", "T1", "T2"], "auto")},
        ],
        "switch": {"duration_s": 10.0, "profile": "linear"},
        "integrator": {"method": "rk4", "dt": 0.01},
        "weights": {"l": 1.0, "l_delta": 0.1, "l_v": 0.1},
    },
    "sim4_insert_remove": {
        "name": "sim4_insert_remove",
        "description": "joint limits, end-effector position, orientation replaced by look-at-point in iterations [250, 300]",
        "chain": _PLANAR3,
        "initial_state": {"q": [0.0, 0.5, 0.5]},
        "tasks": [
            {
                "id": "limits",
                "kind": "joint_limits",
                "params": {
                    "q_plus": [math.pi, 2 * math.pi / 3, 2 * math.pi / 3],
                    "q_minus": [-math.pi, -2 * math.pi / 3, -2 * math.pi / 3],
                },
            },
            _goal("position", 3, [0.25, 0.75]),
            {"id": "orientation", "kind": "orientation", "params": {"link": 3, "theta_d": math.pi / 6}},
            {"id": "look_at", "kind": "look_at_point", "params": {"link": 3, "target": [1.0, 0.5]}},
        ],
        "timeline": [
            {"until_iteration": 250, "stack": {"order": [["limits"], ["position"], ["orientation"]], "kappa": 1e3, "mode": "auto"}},
            {"until_iteration": 600, "stack": {"order": [["limits"], ["position"], ["look_at"]], "kappa": 1e3, "mode": "auto"}},
        ],
        "switch": {"duration_s": 0.5, "profile": "linear"},
        "integrator": {"method": "rk4", "dt": 0.01},
    },
    "sim5_dynamic": {
        "name": "sim5_dynamic",
        "description": "torque-controlled dependent end-effector goals swapped halfway, |tau| <= 60 N m",
        "chain": {"lengths": [0.5, 0.5, 0.5], "masses": [1.0, 1.0, 1.0], "friction": [0.1, 0.1, 0.1], "gravity": [0.0, 0.0]},
        "initial_state": {"q": [1.2, -0.5, 0.5]},
        "tasks": [
            _goal("T1", 3, [0.5, 1.0], {"kind": "linear", "gain": 2.0}),
            _goal("T2", 3, [-0.2, -1.2], {"kind": "linear", "gain": 2.0}),
        ],
        "timeline": [
            {"until_iteration": 4000, "stack": _chain_stack(["T1", "T2"], "auto")},
            {"until_iteration": 8000, "stack": _chain_stack(["T2", "T1"], "auto")},
        ],
        "switch": {"duration_s": 0.5, "profile": "linear"},
        "integrator": {"method": "rk4", "dt": 0.001},
        "weights": {"l": 1e-3, "l_delta": 1e-3, "l_v": 1.0},
        "dynamics": {
            "enabled": True,
            "u_max": 60.0,
            "gamma_u": {"kind": "linear", "gain": 10.0},
            "gamma_select": {"cap": 2.0, "grid_points": 12, "samples": 40, "qdot_max": 3.0, "seed": 0},
        },
    },
    "ex5_rank_loss": {
        "name": "ex5_rank_loss",
        "description": "Cartesian 2-DOF point robot, goals [-1,0] and [1,0], fixed stack T1<T2",
        "chain": {"lengths": [1.0, 1.0]},
        "initial_state": {"q": [-2.0, 0.0]},
        "tasks": [
            {"id": "T1", "kind": "goal_point", "params": {"selector": {"kind": "configuration"}, "target": [-1.0, 0.0]}},
            {"id": "T2", "kind": "goal_point", "params": {"selector": {"kind": "configuration"}, "target": [1.0, 0.0]}},
        ],
        "timeline": [{"until_iteration": 150, "stack": _chain_stack(["T1", "T2"], "fixed", 1000.0)}],
        "integrator": {"method": "rk4", "dt": 0.01},
        "rank_tol": 5e-3,
    },
}


def builtin_document(name: str) -> dict:
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin scenario {name!r}")
    return copy.deepcopy(BUILTINS[name])


def builtin_scenario(name: str, overrides=()) -> Scenario:
    doc = builtin_document(name)
    for item in overrides:
        doc = apply_override(doc, item)
    return build_scenario(doc)


def scenario_summary_line(name: str) -> str:
    doc = BUILTINS[name]
    ends = [seg["until_iteration"] for seg in doc["timeline"]]
    return f"{name}: {doc['description']} ({ends[-1]} iterations, segments end at {ends})"

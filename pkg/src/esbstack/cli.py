"""Command line entry point: run scenarios, list builtins, classify tasks, select gains, verify."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from esbstack.acceptance import run_suite, summarize_trace
from esbstack.gammas import GammaSampling, select_gammas
from esbstack.qp import SolverError
from esbstack.scenario import (
    BUILTINS,
    ScenarioError,
    apply_override,
    build_scenario,
    builtin_document,
    load_document,
    scenario_summary_line,
)
from esbstack.sim import SimulationError, run_scenario
from esbstack.tasks import classify_pair

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 2, 3, 4

log = logging.getLogger("esbstack")


def resolve_document(ref: str, overrides=()) -> dict:
    """Load a scenario file, or a builtin when ``ref`` names one."""
    path = Path(ref)
    if path.exists():
        doc = load_document(path)
    elif ref in BUILTINS:
        doc = builtin_document(ref)
    else:
        raise ScenarioError(f"no scenario file or builtin named {ref!r}", "/")
    for item in overrides:
        doc = apply_override(doc, item)
    return doc


def trace_header(sc, trace) -> list[str]:
    n = sc.chain.n
    ids = [t.id for t in sc.tasks]
    cols = ["t", "iter"] + [f"q{j}" for j in range(1, n + 1)] + [f"qd{j}" for j in range(1, n + 1)]
    cols += [f"u{j}" for j in range(1, n + 1)]
    if trace and trace[0].tau is not None:
        cols += [f"tau{j}" for j in range(1, n + 1)]
    if trace and trace[0].qd is not None:
        cols += [f"qdes{j}" for j in range(1, n + 1)]
    cols += [f"h_{i}" for i in ids]
    if sc.model_kind == "dynamic":
        cols += [f"hprime_{i}" for i in ids]
    cols += [f"delta_{i}" for i in ids]
    cols += [f"v_{k}" for k in range(1, sc.max_stack_rows() + 1)]
    cols += ["V_gamma", "V_z", "rank", "rank_drop", "active_set", "du_inf"]
    return cols


def _num(x) -> str:
    return repr(float(x))


def trace_rows(sc, trace):
    ids = [t.id for t in sc.tasks]
    for r in trace:
        row = [_num(r.t), str(r.iteration)]
        row += [_num(x) for x in r.q] + [_num(x) for x in r.qdot] + [_num(x) for x in r.u]
        if r.tau is not None:
            row += [_num(x) for x in r.tau]
        if r.qd is not None:
            row += [_num(x) for x in r.qd]
        row += [_num(r.h[i]) for i in ids]
        if sc.model_kind == "dynamic":
            row += [_num(r.h_prime[i]) for i in ids]
        row += [_num(r.delta[i]) for i in ids]
        row += [_num(x) for x in r.v]
        row += [_num(r.V_gamma), _num(r.V_z), str(r.rank_value), str(int(r.rank_drop)), ";".join(r.active_set), _num(r.du_inf)]
        yield row


def write_trace_csv(path, sc, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trace_header(sc, trace))
        writer.writerows(trace_rows(sc, trace))


def write_trace_json(path, sc, trace) -> None:
    header = trace_header(sc, trace)
    records = [dict(zip(header, row)) for row in trace_rows(sc, trace)]
    Path(path).write_text(json.dumps(records))


def cmd_run(args) -> int:
    doc = resolve_document(args.scenario, args.override)
    sc = build_scenario(doc)
    t0 = time.perf_counter()
    trace = run_scenario(sc)
    summary = summarize_trace(sc, trace)
    summary["runtime_s"] = time.perf_counter() - t0
    if args.out:
        out = Path(args.out)
        if args.format == "csv":
            write_trace_csv(out, sc, trace)
        else:
            write_trace_json(out, sc, trace)
        out.with_name(out.stem + ".summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_scenarios(args) -> int:
    if args.format == "json":
        print(json.dumps({name: BUILTINS[name]["description"] for name in BUILTINS}, indent=2))
    else:
        for name in BUILTINS:
            print(scenario_summary_line(name))
    return EXIT_OK


def _parse_q(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ScenarioError(f"configuration {text!r} is not a comma-separated list of numbers", "/") from None


def cmd_classify(args) -> int:
    doc = resolve_document(args.scenario, args.override)
    sc = build_scenario(doc)
    configs = [_parse_q(text) for text in args.q] or [sc.q0]
    rows = []
    for q in configs:
        if q.shape != (sc.chain.n,):
            raise ScenarioError(f"configuration has {q.size} entries, chain has {sc.chain.n} joints", "/")
        for a in range(len(sc.tasks)):
            for b in range(a + 1, len(sc.tasks)):
                ti, tj = sc.tasks[a], sc.tasks[b]
                try:
                    rep = classify_pair(ti, tj, sc.chain, q)
                    rows.append({"q": q.tolist(), "pair": [ti.id, tj.id], "classification": rep.classification,
                                 "gradient_angle": rep.gradient_angle})
                except ValueError as exc:
                    rows.append({"q": q.tolist(), "pair": [ti.id, tj.id], "classification": "undefined",
                                 "gradient_angle": None, "error": str(exc)})
    if args.format == "json":
        print(json.dumps(rows, indent=2))
    else:
        for r in rows:
            angle = "-" if r["gradient_angle"] is None else f"{r['gradient_angle']:.4f}"
            q = ",".join(f"{x:.4g}" for x in r["q"])
            print(f"q=[{q}] {r['pair'][0]}-{r['pair'][1]}: {r['classification']} angle={angle}"
                  + (f" ({r['error']})" if "error" in r else ""))
    return EXIT_OK


def cmd_gamma_select(args) -> int:
    doc = resolve_document(args.scenario, args.override)
    dyn = doc.get("dynamics", {})
    if not dyn.get("enabled", False):
        raise ScenarioError("gain selection needs dynamics.enabled = true", "/dynamics")
    sc = build_scenario(doc)
    opts = dict(dyn.get("gamma_select", {}))
    if args.seed is not None:
        opts["seed"] = args.seed
    sampling = GammaSampling(**opts)
    res = select_gammas(sc.tasks, sc.chain, sc.dynamic.u_max, sampling)
    print(json.dumps({
        "gammas": res.gammas,
        "cap": res.cap,
        "samples_used": res.samples_used,
        "min_margin": res.min_margin,
        "note": res.note,
    }, indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(args.suite, seed=args.seed or 0, workers=args.workers)
    for r in results:
        print(f"{r.line()} [{r.seconds:.1f}s]")
    failed = [r.number for r in results if not r.passed]
    print(f"suite {args.suite}: {len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esbstack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("scenario", help="scenario JSON file or builtin name")
            p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                           help="dotted-path override, value parsed as JSON (repeatable)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("run", help="simulate a scenario and write its trace")
    common(p)
    p.add_argument("--out", help="trace output path; a .summary.json is written next to it")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("scenarios", help="list builtin scenarios")
    common(p, scenario=False)
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("classify", help="pairwise task relationships at given configurations")
    common(p)
    p.add_argument("--q", action="append", default=[], metavar="Q1,Q2,...")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("gamma-select", help="offline selection of auxiliary-barrier gains")
    common(p)
    p.set_defaults(func=cmd_gamma_select)

    p = sub.add_parser("verify", help="run the acceptance suite")
    common(p, scenario=False)
    p.add_argument("--suite", choices=("fast", "full"), default="fast")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SimulationError as exc:
        print(f"solver error at {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

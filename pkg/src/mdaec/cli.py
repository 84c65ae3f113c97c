"""Command-line driver: check, graph, impulse, simulate and automaton reports.

Every report is produced as a JSON-compatible dict and rendered as text;
``--format json`` prints the dict, ``--out DIR`` writes both renderings.
Exit codes: 0 accepted, 1 rejected or failed, 2 input or parse error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import frontend as fe
from .graph import BipGraph, block_dag, btf_dot
from .impulse import Classification, ImpulseError, analyze_instant, build_restart_system, o_str
from .modes import (
    Edge,
    EngineError,
    ExecResult,
    ModeAutomaton,
    ModeEngine,
    StateExplosion,
    explore_modes,
    initial_node,
    inst_name,
    mode_label,
    vref_name,
)
from .runtime import (
    SimulationError,
    Simulator,
    SolverConfig,
    eliminate_linear_impulsive,
    possibly_impulsive,
)

EXIT_OK, EXIT_REJECTED, EXIT_INPUT = 0, 1, 2
TOO_LARGE = "model too large for enumeration"


@dataclass
class Diagnostic:
    severity: str  # error | warning | info
    stage: str
    message: str
    line: int = 0
    payload: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"severity": self.severity, "stage": self.stage, "message": self.message, "line": self.line, "payload": self.payload}

    def text(self) -> str:
        where = f" (line {self.line})" if self.line else ""
        return f"{self.severity}: [{self.stage}] {self.message}{where}"


class InputError(Exception):
    """Unreadable or unparsable model file."""


def load(path: str) -> fe.Model:
    try:
        return fe.load_model(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except fe.ParseError as exc:
        raise InputError(f"{path}: {exc}") from None


def valuation_formula(val: dict[str, bool] | tuple) -> str:
    items = sorted(dict(val).items())
    if not items:
        return "true"
    return " and ".join(g if v else f"not {g}" for g, v in items)


def _jobs_map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Analysis shared by the commands


@dataclass
class Analysis:
    model: fe.Model
    engine: ModeEngine | None
    automaton: ModeAutomaton | None
    diagnostics: list[Diagnostic]

    @property
    def accepted(self) -> bool:
        return not any(d.severity == "error" for d in self.diagnostics)


def analyze(model: fe.Model, cap: int = 2**12) -> Analysis:
    """Frontend checks followed by exhaustive mode exploration."""
    diags: list[Diagnostic] = []
    for rej in fe.check_guard_causality(model):
        diags.append(Diagnostic("error", "guard causality", rej.message, rej.line, {"cycle": list(rej.cycle)}))
    if diags:
        return Analysis(model, None, None, diags)
    if 2 ** len(model.guards) > cap:
        diags.append(Diagnostic("error", "enumeration", f"{TOO_LARGE}: {2 ** len(model.guards)} modes exceed cap {cap}"))
        return Analysis(model, None, None, diags)
    engine = ModeEngine(model)
    try:
        aut = explore_modes(engine)
    except StateExplosion as exc:
        diags.append(Diagnostic("error", "enumeration", f"{TOO_LARGE}: {exc}"))
        return Analysis(model, engine, None, diags)
    labels = node_valuations(engine, aut)
    for e in aut.failures:
        r = e.result
        diags.append(
            Diagnostic(
                "error",
                r.stage,
                f"{mode_label(labels[e.src])} -> {mode_label(dict(e.valuation))}: {r.reason}",
                0,
                {"from": mode_label(labels[e.src]), "to": mode_label(dict(e.valuation)), "diagnosis": r.diagnosis},
            )
        )
    return Analysis(model, engine, aut, diags)


def node_valuations(engine: ModeEngine, aut: ModeAutomaton) -> dict[int, dict[str, bool]]:
    """Valuation active at each automaton node (the one of its entering edges)."""
    out = {aut.initial: initial_node(engine)[1]}
    for e in aut.edges:
        out.setdefault(e.dst, dict(e.valuation))
    return out


def change_edges(engine: ModeEngine, aut: ModeAutomaton) -> list[tuple[dict[str, bool], Edge]]:
    labels = node_valuations(engine, aut)
    out = []
    for e in aut.edges:
        if dict(e.valuation) != labels[e.src] or e.result.deleted:
            out.append((labels[e.src], e))
    return out


def mode_report(engine: ModeEngine, val: dict[str, bool]) -> dict:
    eqs = engine.mode_eqs(val)
    entry = {"mode": mode_label(val), "formula": valuation_formula(val), "type": engine.mode_type(val).value, "equations": list(eqs)}
    if engine.mode_type(val) is fe.ModeType.TRANSIENT:
        return entry
    sig = engine.long_sigma(eqs)
    entry["nonsingular"] = sig.success
    if sig.success:
        entry["index"] = sig.index
        entry["latent"] = [inst_name(i) for i in sig.latent]
    else:
        dm = sig.diagnosis
        entry["diagnosis"] = {
            "under": {"eqs": sorted(map(str, dm.under[0])), "vars": sorted(map(str, dm.under[1]))},
            "over": {"eqs": sorted(map(str, dm.over[0])), "vars": sorted(map(str, dm.over[1]))},
        }
    return entry


# ---------------------------------------------------------------------------
# Commands


def cmd_check(model: fe.Model, jobs: int = 1) -> dict:
    an = analyze(model)
    rep: dict = {"model": model.name, "accepted": an.accepted, "diagnostics": [d.to_json() for d in an.diagnostics]}
    if an.engine is not None:
        vals = an.engine.all_valuations()
        rep["modes"] = _jobs_map(lambda v: mode_report(an.engine, v), vals, jobs)
    if an.automaton is not None:
        changes: list[dict] = []
        for src, e in change_edges(an.engine, an.automaton):
            row = {
                "from": mode_label(src),
                "to": mode_label(dict(e.valuation)),
                "deleted": [inst_name(i) for i in e.result.deleted],
                "type": e.result.mode_type.value,
            }
            if row not in changes:
                changes.append(row)
        rep["changes"] = changes
        rep["automaton"] = {"nodes": len(an.automaton.nodes), "edges": len(an.automaton.edges), "failures": len(an.automaton.failures)}
    return rep


def render_check(rep: dict) -> str:
    lines = [f"model {rep['model']}: {'accepted' if rep['accepted'] else 'rejected'}"]
    for d in rep["diagnostics"]:
        lines.append(Diagnostic(**d).text())
        for k in ("under", "over"):
            part = d["payload"].get("diagnosis", {}).get(k)
            if part and (part["eqs"] or part["vars"]):
                lines.append(f"  {k}determined: eqs {{{', '.join(part['eqs'])}}} vars {{{', '.join(part['vars'])}}}")
    for m in rep.get("modes", []):
        if m["type"] == "transient":
            lines.append(f"mode {m['mode']}: transient")
        elif m["nonsingular"]:
            lat = ", ".join(m["latent"]) or "none"
            lines.append(f"mode {m['mode']}: index {m['index']}, latent {{{lat}}}")
        else:
            lines.append(f"mode {m['mode']}: structurally singular")
    for c in rep.get("changes", []):
        dele = ", ".join(c["deleted"]) or "nothing"
        lines.append(f"change {c['from']} -> {c['to']}: deletes {dele}")
    if "automaton" in rep:
        a = rep["automaton"]
        lines.append(f"automaton: {a['nodes']} nodes, {a['edges']} edges, {a['failures']} failures")
    return "\n".join(lines) + "\n"


def _mode_graph(engine: ModeEngine, r: ExecResult) -> tuple[BipGraph, list]:
    deps = set(r.dependents)
    inc = {i: {v: 0 for v in engine.refs(i) if v in deps} for i in r.H}
    g = BipGraph.from_incidence(inc, list(r.dependents))
    return g, [tuple(b) for b in r.blocks]


def cmd_graph(model: fe.Model, jobs: int = 1) -> tuple[dict, dict[str, str]]:
    """Per-mode BTF graphs and the merged mode-labeled graph; returns (json, dot files)."""
    an = analyze(model)
    rep: dict = {"model": model.name, "diagnostics": [d.to_json() for d in an.diagnostics], "modes": {}, "merged": {}}
    dots: dict[str, str] = {}
    if an.engine is None:
        return rep, dots
    engine = an.engine
    vals = engine.long_valuations()

    def one(val):
        r = engine.exec_run(*engine.steady_state(val), val)
        return val, r

    merged: dict[tuple, list[str]] = {}
    merged_edges: set[tuple] = set()
    for val, r in _jobs_map(one, vals, jobs):
        label = mode_label(val)
        if not r.ok:
            rep["modes"][label] = {"error": r.reason}
            continue
        g, blocks = _mode_graph(engine, r)
        D = block_dag(g, blocks)
        keys = []
        for eqs, vs in blocks:
            key = (tuple(sorted(map(inst_name, eqs))), tuple(sorted(map(vref_name, vs))))
            keys.append(key)
            merged.setdefault(key, []).append(valuation_formula(val))
        for a, b in D.edges:
            merged_edges.add((keys[a], keys[b]))
        rep["modes"][label] = {
            "formula": valuation_formula(val),
            "blocks": [{"eqs": [inst_name(e) for e in eqs], "vars": [vref_name(v) for v in vs]} for eqs, vs in blocks],
            "edges": sorted([a, b] for a, b in D.edges),
        }
        title = f"mode {label}" if len(vals) > 1 else "btf"
        dots[f"mode_{label.strip('()').replace(',', '') or 'single'}.dot"] = btf_dot(
            g, blocks, name=lambda n: inst_name(n) if isinstance(n[1], int) and n[0] in engine.eq_ids else vref_name(n), title=title
        )
    order = sorted(merged)
    idx = {k: i for i, k in enumerate(order)}
    single = len(vals) == 1
    rep["merged"] = {
        "blocks": [
            {"eqs": list(k[0]), "vars": list(k[1]), "label": None if single else " or ".join(f"({f})" for f in merged[k])}
            for k in order
        ],
        "edges": sorted([idx[a], idx[b]] for a, b in merged_edges),
    }
    dots["merged.dot"] = merged_dot(rep["merged"], model.name)
    return rep, dots


def merged_dot(merged: dict, title: str) -> str:
    lines = [f"digraph {json.dumps(title + ' merged')} {{"]
    for i, b in enumerate(merged["blocks"]):
        text = ", ".join(b["eqs"]) + " | " + ", ".join(b["vars"])
        if b["label"]:
            text += "\\n" + b["label"]
        lines.append(f"  b{i} [label={json.dumps(text, ensure_ascii=False)}, shape=box];")
    for a, b in merged["edges"]:
        lines.append(f"  b{a} -> b{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def restart_strategy(engine: ModeEngine, r: ExecResult, sol) -> str:
    """Restart path the simulator would try first for this change."""
    if r.mode_type is fe.ModeType.TRANSIENT:
        return "level-wise"
    for val in engine.long_valuations():
        sig = engine.long_sigma(engine.mode_eqs(val))
        if sig.success and max(sig.offsets.d.values(), default=0) > 1:
            return "level-wise"
    try:
        rs = build_restart_system(engine, r, keep_params=False)
        eliminate_linear_impulsive(rs, possibly_impulsive(rs, sol))
        return "elimination"
    except (SimulationError, ImpulseError):
        pass
    if sol is not None and all(sol.order(v) is not None for v in sol.impulsive()):
        return "rescaled"
    return "delta-cascade"


def cmd_impulse(model: fe.Model, jobs: int = 1) -> dict:
    an = analyze(model)
    rep: dict = {"model": model.name, "diagnostics": [d.to_json() for d in an.diagnostics], "changes": []}
    if an.automaton is None:
        return rep
    engine = an.engine

    def one(item):
        src, e = item
        r = e.result
        ir = analyze_instant(engine, r, mode_label(src), mode_label(dict(e.valuation)))
        out = ir.to_json()
        out["strategy"] = restart_strategy(engine, r, ir.solution)
        out["impulsive"] = sorted(ir.impulsive)
        return out

    rep["changes"] = _jobs_map(one, change_edges(engine, an.automaton), jobs)
    return rep


def render_impulse(rep: dict) -> str:
    lines = [f"model {rep['model']}"]
    for d in rep["diagnostics"]:
        lines.append(Diagnostic(**d).text())
    if not rep["changes"]:
        lines.append("no mode changes")
    for c in rep["changes"]:
        dele = ", ".join(c["deleted"]) or "nothing"
        lines.append(f"change {c['from']} -> {c['to']}: deletes {dele}; strategy {c['strategy']}")
        if c.get("error"):
            lines.append(f"  error: {c['error']}")
        vs = c.get("variables", {})
        if vs:
            w = max(len(v) for v in vs)
            lines.append(f"  {'variable'.ljust(w)}  lower  upper  class")
            for v, info in vs.items():
                lines.append(f"  {v.ljust(w)}  {info['lower']:>5}  {info['upper']:>5}  {info['class']}")
    return "\n".join(lines) + "\n"


def cmd_automaton(model: fe.Model) -> dict:
    an = analyze(model)
    rep: dict = {"model": model.name, "accepted": an.accepted, "diagnostics": [d.to_json() for d in an.diagnostics]}
    if an.automaton is None:
        return rep
    labels = node_valuations(an.engine, an.automaton)
    rep["initial"] = an.automaton.initial
    rep["nodes"] = [
        {"id": i, "mode": mode_label(labels[i]), "depth": n.depth, "latent_context": sorted(inst_name(x) for x in n.delta)}
        for i, n in enumerate(an.automaton.nodes)
    ]
    rep["edges"] = [
        {
            "src": e.src,
            "dst": e.dst,
            "mode": mode_label(dict(e.valuation)),
            "kind": "change" if (dict(e.valuation) != labels[e.src] or e.result.deleted) else "tick",
            "deleted": [inst_name(i) for i in e.result.deleted],
        }
        for e in an.automaton.edges
    ]
    rep["failures"] = [
        {"src": e.src, "mode": mode_label(dict(e.valuation)), "stage": e.result.stage, "reason": e.result.reason}
        for e in an.automaton.failures
    ]
    return rep


def automaton_dot(rep: dict) -> str:
    lines = [f"digraph {json.dumps(rep['model'])} {{"]
    for n in rep.get("nodes", []):
        lines.append(f"  n{n['id']} [label={json.dumps(n['mode'] + (' *' if n['depth'] else ''))}];")
    for e in rep.get("edges", []):
        lab = e["mode"] + (" / -" + ",".join(e["deleted"]) if e["deleted"] else "")
        lines.append(f"  n{e['src']} -> n{e['dst']} [label={json.dumps(lab, ensure_ascii=False)}];")
    for i, f in enumerate(rep.get("failures", [])):
        lines.append(f"  fail{i} [label={json.dumps('fail: ' + f['reason'])}, shape=box, color=red];")
        lines.append(f"  n{f['src']} -> fail{i} [label={json.dumps(f['mode'])}, style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def render_automaton(rep: dict) -> str:
    lines = [f"model {rep['model']}: {'accepted' if rep['accepted'] else 'rejected'}"]
    for d in rep["diagnostics"]:
        lines.append(Diagnostic(**d).text())
    for n in rep.get("nodes", []):
        lines.append(f"node {n['id']}: mode {n['mode']}" + (" (transient)" if n["depth"] else ""))
    for e in rep.get("edges", []):
        extra = f", deletes {', '.join(e['deleted'])}" if e["deleted"] else ""
        lines.append(f"  {e['src']} -> {e['dst']} on {e['mode']}: {e['kind']}{extra}")
    for f in rep.get("failures", []):
        lines.append(f"  {f['src']} -> fail on {f['mode']}: {f['stage']}: {f['reason']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdaec", description="Structural analysis and simulation of multimode DAE models.")
    p.add_argument("command", choices=["check", "graph", "impulse", "simulate", "automaton"])
    p.add_argument("file")
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--tend", type=float, default=10.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--eps", type=float, default=SolverConfig.eps)
    p.add_argument("--theta", type=float, default=SolverConfig.theta)
    p.add_argument("--h0", type=float, default=SolverConfig.h0)
    p.add_argument("--out", default=None, help="directory for report and data files")
    p.add_argument("--format", choices=["dot", "json"], default=None)
    p.add_argument("--jobs", type=int, default=1)
    return p


def _emit(out: Path | None, stem: str, rep: dict, text: str, fmt: str | None):
    payload = json.dumps(rep, indent=2, ensure_ascii=False, default=str)
    sys.stdout.write(payload + "\n" if fmt == "json" else text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(payload + "\n", encoding="utf-8")
        (out / f"{stem}.txt").write_text(text, encoding="utf-8")


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    try:
        model = load(args.file)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = SolverConfig(h0=args.h0, theta=args.theta, eps=args.eps)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        if args.command == "check":
            rep = cmd_check(model, args.jobs)
            _emit(out, "check", rep, render_check(rep), args.format)
            return EXIT_OK if rep["accepted"] else EXIT_REJECTED
        if args.command == "graph":
            rep, dots = cmd_graph(model, args.jobs)
            if args.format == "json":
                sys.stdout.write(json.dumps(rep, indent=2, ensure_ascii=False) + "\n")
            else:
                for name, dot in dots.items():
                    sys.stdout.write(f"// {name}\n{dot}")
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                (out / "graph.json").write_text(json.dumps(rep, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
                for name, dot in dots.items():
                    (out / name).write_text(dot, encoding="utf-8")
            for d in rep["diagnostics"]:
                print(Diagnostic(**d).text().replace("error:", "warning:", 1), file=sys.stderr)
            return EXIT_OK if dots else EXIT_REJECTED
        if args.command == "impulse":
            rep = cmd_impulse(model, args.jobs)
            _emit(out, "impulse", rep, render_impulse(rep), args.format)
            return EXIT_OK if rep["changes"] or not rep["diagnostics"] else EXIT_REJECTED
        if args.command == "automaton":
            rep = cmd_automaton(model)
            if args.format == "dot":
                sys.stdout.write(automaton_dot(rep))
                if out is not None:
                    out.mkdir(parents=True, exist_ok=True)
                    (out / "automaton.dot").write_text(automaton_dot(rep), encoding="utf-8")
            else:
                _emit(out, "automaton", rep, render_automaton(rep), args.format)
            return EXIT_OK if rep["accepted"] else EXIT_REJECTED
        return _simulate(model, args, cfg, out)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REJECTED


def _simulate(model: fe.Model, args, cfg: SolverConfig, out: Path | None) -> int:
    an = analyze(model)
    if not an.accepted:
        for d in an.diagnostics:
            print(d.text(), file=sys.stderr)
        return EXIT_REJECTED
    out = out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulator(an.engine, cfg)
    try:
        traj = sim.run(args.t0, args.tend, args.dt)
        failure = None
    except SimulationError as exc:
        traj, failure = None, str(exc)
    if traj is None:
        print(f"error: {failure}", file=sys.stderr)
        return EXIT_REJECTED
    csv_path = out / f"{model.name}.csv"
    ev_path = out / f"{model.name}.events.json"
    csv_path.write_text(traj.to_csv(), encoding="utf-8")
    ev_path.write_text(traj.events_json() + "\n", encoding="utf-8")
    summary = {
        "model": model.name,
        "samples": len(traj.times),
        "events": [e.to_json() for e in traj.events],
        "warnings": traj.warnings,
        "csv": str(csv_path),
        "events_file": str(ev_path),
    }
    if args.format == "json":
        sys.stdout.write(json.dumps(summary, indent=2, ensure_ascii=False) + "\n")
    else:
        lines = [f"model {model.name}: {len(traj.times)} samples, {len(traj.events)} events"]
        for e in traj.events:
            lines.append(f"  t={e.time:.9g} {e.source} -> {e.target} via {e.path}")
        lines += [f"  warning: {w}" for w in traj.warnings]
        lines.append(f"wrote {csv_path} and {ev_path}")
        sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Bipartite graphs extracted from the corpus models."""

from __future__ import annotations

from functools import lru_cache

from mdaec import ModeEngine, explore_modes, load_model
from mdaec.graph import BipGraph

from conftest import model_path

ACCEPTED = ["clutch", "clutch_nonsemilinear", "cupball_elastic", "cupball_inelastic", "westinghouse", "rldc2"]


def mode_graph(engine: ModeEngine, val) -> BipGraph:
    eqs = engine.mode_eqs(val)
    return BipGraph.from_incidence({e: engine.degrees(e) for e in eqs})


def instant_graph(engine: ModeEngine, r) -> BipGraph:
    facts = set(r.facts)
    K = [i for i in dict.fromkeys(r.g_sigma + r.g_bar) if i not in facts]
    deps = list(r.dependents)
    inc = {i: {v: 0 for v in engine.refs(i)} for i in K}
    g = BipGraph.from_incidence(inc, deps)
    return BipGraph(tuple(K), tuple(deps), g.weights)


@lru_cache(maxsize=None)
def corpus_graphs() -> tuple[tuple[str, BipGraph, tuple], ...]:
    """(label, graph, dependents) for every long mode and every explored instant."""
    out = []
    for name in ACCEPTED:
        eng = ModeEngine(load_model(model_path(name)))
        for val in eng.long_valuations():
            g = mode_graph(eng, val)
            out.append((f"{name} mode {sorted(val.items())}", g, tuple(g.vars)))
        aut = explore_modes(eng)
        seen = set()
        for e in aut.edges:
            g = instant_graph(eng, e.result)
            key = (g.eqs, g.vars)
            if key in seen or not g.eqs:
                continue
            seen.add(key)
            out.append((f"{name} instant {e.src}->{e.dst}", g, g.vars))
    return tuple(out)

"""Weighted bipartite equation/variable graphs.

Matchings come from networkx (Hopcroft-Karp) and scipy (assignment);
the Dulmage-Mendelsohn partition and block triangular form are computed
from a maximum matching by alternating-path reachability and strongly
connected components.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping

import networkx as nx
import numpy as np
from scipy.optimize import linear_sum_assignment

Node = Hashable


class NoCompleteMatching(Exception):
    """No matching covers every equation."""


@dataclass(frozen=True)
class BipGraph:
    """Bipartite graph with nonnegative integer weights on edges."""

    eqs: tuple[Node, ...]
    vars: tuple[Node, ...]
    weights: Mapping[tuple[Node, Node], int] = field(default_factory=dict)

    @staticmethod
    def from_incidence(inc: Mapping[Node, Mapping[Node, int]], variables: Iterable[Node] | None = None) -> "BipGraph":
        eqs = tuple(inc)
        vs: list[Node] = list(variables) if variables is not None else []
        seen = set(vs)
        w: dict[tuple[Node, Node], int] = {}
        for f, row in inc.items():
            for x, d in row.items():
                if variables is not None and x not in seen:
                    continue
                if x not in seen:
                    seen.add(x)
                    vs.append(x)
                w[(f, x)] = int(d)
        return BipGraph(eqs, tuple(vs), w)

    def neighbors(self, f: Node) -> list[Node]:
        return [x for x in self.vars if (f, x) in self.weights]

    def restrict(self, eqs: Iterable[Node], vars: Iterable[Node]) -> "BipGraph":
        es, vs = tuple(eqs), tuple(vars)
        eset, vset = set(es), set(vs)
        w = {k: d for k, d in self.weights.items() if k[0] in eset and k[1] in vset}
        return BipGraph(es, vs, w)

    def scaled(self, m: int) -> "BipGraph":
        return BipGraph(self.eqs, self.vars, {k: d * m for k, d in self.weights.items()})


Matching = dict  # equation -> variable


def _nx_graph(g: BipGraph, order: list | None = None) -> nx.Graph:
    G = nx.Graph()
    eqs = list(g.eqs)
    vs = list(g.vars)
    edges = [(("e", f), ("v", x)) for (f, x) in g.weights]
    if order is not None:
        rng = random.Random(order[0])
        rng.shuffle(eqs)
        rng.shuffle(vs)
        rng.shuffle(edges)
    G.add_nodes_from(("e", f) for f in eqs)
    G.add_nodes_from(("v", x) for x in vs)
    G.add_edges_from(edges)
    return G


def max_cardinality_matching(g: BipGraph, seed: int | None = None) -> Matching:
    """Maximum matching; ``seed`` shuffles node order to obtain a different one."""
    if not g.eqs or not g.vars:
        return {}
    G = _nx_graph(g, [seed] if seed is not None else None)
    top = [n for n in G.nodes if n[0] == "e"]
    mate = nx.bipartite.hopcroft_karp_matching(G, top_nodes=top)
    return {n[1]: mate[n][1] for n in top if n in mate}


def exists_complete_matching(g: BipGraph) -> bool:
    return len(max_cardinality_matching(g)) == len(g.eqs)


def max_weight_complete_matching(g: BipGraph, seed: int | None = None) -> Matching:
    """Complete matching of maximal total weight (assignment problem)."""
    if not g.eqs:
        return {}
    if not exists_complete_matching(g):
        raise NoCompleteMatching("no complete matching")
    eqs, vs = list(g.eqs), list(g.vars)
    if seed is not None:
        rng = random.Random(seed)
        rng.shuffle(eqs)
        rng.shuffle(vs)
    n, m = len(eqs), len(vs)
    total = sum(g.weights.values()) + 1
    cost = np.full((n, m), float(total * (n + 1)))
    for i, f in enumerate(eqs):
        for j, x in enumerate(vs):
            if (f, x) in g.weights:
                cost[i, j] = -float(g.weights[(f, x)])
    rows, cols = linear_sum_assignment(cost)
    out = {eqs[i]: vs[j] for i, j in zip(rows, cols)}
    if any((f, x) not in g.weights for f, x in out.items()):
        raise NoCompleteMatching("no complete matching")
    return out


def matching_weight(g: BipGraph, m: Matching) -> int:
    return sum(g.weights[(f, x)] for f, x in m.items())


@dataclass(frozen=True)
class DMResult:
    """Dulmage-Mendelsohn partition plus block triangular form of the enabled part."""

    under: tuple[frozenset, frozenset]
    enabled: tuple[frozenset, frozenset]
    over: tuple[frozenset, frozenset]
    blocks: tuple[tuple[tuple, tuple], ...]  # (eqs, vars) in solving order
    matching: Mapping[Node, Node] = field(default_factory=dict, compare=False)

    @property
    def ok(self) -> bool:
        return not self.under[0] and not self.under[1] and not self.over[0] and not self.over[1]

    def block_sets(self) -> set[tuple[frozenset, frozenset]]:
        return {(frozenset(e), frozenset(v)) for e, v in self.blocks}

    def partition_key(self):
        return (self.under, self.enabled, self.over, frozenset(self.block_sets()))

    def to_json(self, name=str) -> dict:
        def pair(p):
            return {"eqs": sorted(map(name, p[0])), "vars": sorted(map(name, p[1]))}

        return {
            "under": pair(self.under),
            "enabled": pair(self.enabled),
            "over": pair(self.over),
            "blocks": [{"eqs": [name(e) for e in b[0]], "vars": [name(v) for v in b[1]]} for b in self.blocks],
        }


def dulmage_mendelsohn(g: BipGraph, dependents: Iterable[Node] | None = None, seed: int | None = None) -> DMResult:
    """DM partition with respect to ``dependents`` (other variables are ignored)."""
    deps = set(g.vars) if dependents is None else set(dependents) & set(g.vars)
    h = g.restrict(g.eqs, [x for x in g.vars if x in deps])
    m = max_cardinality_matching(h, seed)
    inv = {x: f for f, x in m.items()}
    adj_e = {f: h.neighbors(f) for f in h.eqs}
    adj_v: dict[Node, list[Node]] = {x: [] for x in h.vars}
    for f, xs in adj_e.items():
        for x in xs:
            adj_v[x].append(f)

    # overdetermined: alternating paths from unmatched equations
    o_eqs = {f for f in h.eqs if f not in m}
    o_vars: set[Node] = set()
    stack = list(o_eqs)
    while stack:
        f = stack.pop()
        for x in adj_e[f]:
            if x not in o_vars:
                o_vars.add(x)
                f2 = inv.get(x)
                if f2 is not None and f2 not in o_eqs:
                    o_eqs.add(f2)
                    stack.append(f2)

    # underdetermined: alternating paths from unmatched variables
    u_vars = {x for x in h.vars if x not in inv}
    u_eqs: set[Node] = set()
    stack = list(u_vars)
    while stack:
        x = stack.pop()
        for f in adj_v[x]:
            if f not in u_eqs:
                u_eqs.add(f)
                x2 = m.get(f)
                if x2 is not None and x2 not in u_vars:
                    u_vars.add(x2)
                    stack.append(x2)

    e_eqs = [f for f in h.eqs if f not in o_eqs and f not in u_eqs]
    e_vars = [x for x in h.vars if x not in o_vars and x not in u_vars]
    sub = h.restrict(e_eqs, e_vars)
    blocks = block_triangular_form(sub, {f: m[f] for f in e_eqs})
    return DMResult(
        (frozenset(u_eqs), frozenset(u_vars)),
        (frozenset(e_eqs), frozenset(e_vars)),
        (frozenset(o_eqs), frozenset(o_vars)),
        tuple(blocks),
        dict(m),
    )


def _dependency_digraph(g: BipGraph, m: Matching) -> nx.DiGraph:
    """Equation f -> equation f2 when f2 uses the variable matched to f."""
    D = nx.DiGraph()
    D.add_nodes_from(g.eqs)
    owner = {x: f for f, x in m.items()}
    for (f2, x) in g.weights:
        f = owner.get(x)
        if f is not None and f != f2:
            D.add_edge(f, f2)
    return D


def block_triangular_form(g: BipGraph, m: Matching) -> list[tuple[tuple, tuple]]:
    """Strongly connected components in solving order (dependencies first)."""
    if not g.eqs:
        return []
    D = _dependency_digraph(g, m)
    C = nx.condensation(D)
    index = {f: i for i, f in enumerate(g.eqs)}

    def key(c):
        return min(index[f] for f in C.nodes[c]["members"])

    out = []
    for c in nx.lexicographical_topological_sort(C, key=key):
        eqs = tuple(sorted(C.nodes[c]["members"], key=index.__getitem__))
        out.append((eqs, tuple(m[f] for f in eqs)))
    return out


def block_dag(g: BipGraph, blocks: list[tuple[tuple, tuple]]) -> nx.DiGraph:
    """Dependency graph between blocks (edge b1 -> b2 when b2 uses a variable of b1)."""
    D = nx.DiGraph()
    owner = {}
    for i, (eqs, vs) in enumerate(blocks):
        D.add_node(i, eqs=eqs, vars=vs)
        for x in vs:
            owner[x] = i
    for i, (eqs, _) in enumerate(blocks):
        for f in eqs:
            for x in g.neighbors(f):
                j = owner.get(x)
                if j is not None and j != i:
                    D.add_edge(j, i)
    return D


def _q(s) -> str:
    return json.dumps(str(s), ensure_ascii=False)


def matching_dot(g: BipGraph, m: Matching, name=str) -> str:
    """Directed matched graph: matched edges eq->var, others var->eq."""
    lines = ["digraph matched {", "  rankdir=LR;"]
    for f in g.eqs:
        lines.append(f"  {_q('e:' + name(f))} [label={_q(name(f))}, shape=box];")
    for x in g.vars:
        lines.append(f"  {_q('v:' + name(x))} [label={_q(name(x))}, shape=ellipse];")
    for (f, x) in g.weights:
        if m.get(f) == x:
            lines.append(f"  {_q('e:' + name(f))} -> {_q('v:' + name(x))} [penwidth=2];")
        else:
            lines.append(f"  {_q('v:' + name(x))} -> {_q('e:' + name(f))};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def btf_dot(g: BipGraph, blocks: list[tuple[tuple, tuple]], name=str, title: str = "btf") -> str:
    """Block clusters with the dependency edges between blocks."""
    D = block_dag(g, blocks)
    lines = [f"digraph {_q(title)} {{", "  compound=true;"]
    for i, (eqs, vs) in enumerate(blocks):
        lines.append(f"  subgraph cluster_{i} {{")
        lines.append(f"    label={_q(f'B{i}')};")
        label = ", ".join(map(name, eqs)) + " | " + ", ".join(map(name, vs))
        lines.append(f"    b{i} [label={_q(label)}, shape=box];")
        lines.append("  }")
    for a, b in sorted(D.edges):
        lines.append(f"  b{a} -> b{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"

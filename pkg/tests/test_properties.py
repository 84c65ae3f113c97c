"""Invariants checked over every bipartite graph the corpus produces.

Each ``check_*`` function returns a list of failure descriptions so the
acceptance run can reuse it.
"""

from __future__ import annotations

import itertools
import random

import pytest

from mdaec import ModeEngine, explore_modes, load_model
from mdaec.graph import BipGraph, block_triangular_form, dulmage_mendelsohn, exists_complete_matching, max_cardinality_matching
from mdaec.sigma import find_offsets

from conftest import model_path
from corpus_graphs import ACCEPTED, corpus_graphs


def check_dm_matching_independence(seeds: int = 20) -> list[str]:
    bad = []
    for label, g, deps in corpus_graphs():
        ref = dulmage_mendelsohn(g, deps)
        for seed in range(seeds):
            if dulmage_mendelsohn(g, deps, seed=seed).partition_key() != ref.partition_key():
                bad.append(f"{label}: partition differs for seed {seed}")
                break
        sub = g.restrict(sorted(ref.enabled[0], key=str), sorted(ref.enabled[1], key=str))
        blocks = None
        for seed in range(seeds):
            m = max_cardinality_matching(sub, seed)
            got = {(frozenset(e), frozenset(v)) for e, v in block_triangular_form(sub, m)}
            blocks = blocks or got
            if got != blocks:
                bad.append(f"{label}: blocks differ for seed {seed}")
                break
    return bad


def _feasible(g: BipGraph, c, d) -> bool:
    if any(v < 0 for v in c.values()) or any(d[x] - c[f] < w for (f, x), w in g.weights.items()):
        return False
    tight = {k: 0 for k, w in g.weights.items() if d[k[1]] - c[k[0]] == w}
    return exists_complete_matching(BipGraph(g.eqs, g.vars, tight))


def brute_smallest_dual_ok(g: BipGraph) -> bool:
    off = find_offsets(g)
    if not _feasible(g, off.c, off.d):
        return False
    bound = max(off.c.values(), default=0) + 1
    for cs in itertools.product(range(bound + 1), repeat=len(g.eqs)):
        c = dict(zip(g.eqs, cs))
        d = {x: max([w + c[f] for (f, y), w in g.weights.items() if y == x], default=0) for x in g.vars}
        if _feasible(g, c, d) and any(c[f] < off.c[f] for f in g.eqs):
            return False
    return True


def random_square_graphs(count: int = 150, max_n: int = 5, max_w: int = 3, seed: int = 7) -> list[BipGraph]:
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        n = rng.randint(1, max_n)
        perm = list(range(n))
        rng.shuffle(perm)
        edges = set(enumerate(perm)) | {(rng.randrange(n), rng.randrange(n)) for _ in range(rng.randint(0, n * n))}
        w = {(f"f{i}", f"x{j}"): rng.randint(0, max_w) for i, j in sorted(edges)}
        out.append(BipGraph(tuple(f"f{i}" for i in range(n)), tuple(f"x{j}" for j in range(n)), w))
    return out


def square_corpus_graphs() -> list[tuple[str, BipGraph]]:
    return [(label, g) for label, g, _ in corpus_graphs() if " mode " in label and len(g.eqs) == len(g.vars)]


def check_smallest_dual(max_eqs: int = 5) -> list[str]:
    graphs = [(lbl, g) for lbl, g in square_corpus_graphs() if len(g.eqs) <= max_eqs]
    graphs += [(f"random #{i}", g) for i, g in enumerate(random_square_graphs())]
    return [lbl for lbl, g in graphs if not brute_smallest_dual_ok(g)]


def check_scaling(factors=(2, 3)) -> list[str]:
    bad = []
    graphs = square_corpus_graphs() + [(f"random #{i}", g) for i, g in enumerate(random_square_graphs())]
    for lbl, g in graphs:
        off = find_offsets(g)
        for m in factors:
            s = find_offsets(g.scaled(m))
            if s.c != {f: m * v for f, v in off.c.items()} or s.d != {x: m * v for x, v in off.d.items()}:
                bad.append(f"{lbl}: M={m}")
    return bad


STRETCH_BLOCKS = {(("e1",), ("e2",), ("e5",), ("e6",)), (("e1", "e2", "e3", "e4"),)}


def check_stretching(levels=(0, 1, 2)) -> list[str]:
    bad = []
    for n in levels:
        aut = explore_modes(ModeEngine(load_model(model_path("clutch")), stretch=n))
        if not aut.accepted:
            bad.append(f"N={n}: rejected")
            continue
        deleted = {i[0] for e in aut.edges for i in e.result.deleted}
        shapes = {tuple(sorted(tuple(sorted(i[0] for i in b[0])) for b in e.result.blocks)) for e in aut.edges}
        if deleted != {"e3"}:
            bad.append(f"N={n}: deleted {sorted(deleted)}")
        if shapes != STRETCH_BLOCKS:
            bad.append(f"N={n}: blocks {sorted(shapes)}")
    return bad


def check_status_monotonicity() -> list[str]:
    bad = []
    for name in ACCEPTED:
        aut = explore_modes(ModeEngine(load_model(model_path(name))))
        for e in aut.edges + aut.failures:
            sts = e.result.statuses
            if any(not a.strictly_below(b) for a, b in zip(sts, sts[1:])):
                bad.append(f"{name} {e.src} on {dict(e.valuation)}")
    return bad


SUITES = {
    "DM matching independence": check_dm_matching_independence,
    "smallest dual vs brute force": check_smallest_dual,
    "offset scaling": check_scaling,
    "stretching invariance": check_stretching,
    "status monotonicity": check_status_monotonicity,
}


def test_corpus_graphs_cover_modes_and_instants():
    labels = [lbl for lbl, _, _ in corpus_graphs()]
    assert any(" mode " in lbl for lbl in labels) and any(" instant " in lbl for lbl in labels)
    assert {lbl.split()[0] for lbl in labels} == set(ACCEPTED)


@pytest.mark.parametrize("suite", list(SUITES))
def test_property_suite(suite):
    assert SUITES[suite]() == []

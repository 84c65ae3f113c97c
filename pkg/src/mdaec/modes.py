"""Symbolic execution of nonstandard instants and mode-automaton exploration.

An instant starts from the variables known from the previous instant,
the context of equations it already guaranteed, and a guard valuation.
``exec_run`` performs facts -> index reduction -> conflict resolution ->
evaluation -> tick, recording every intermediate status.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Iterable, Mapping

from . import frontend as fe
from .graph import BipGraph, DMResult, dulmage_mendelsohn, exists_complete_matching
from .sigma import DiffArrayResult, Inst, SigmaResult, diff_array, sigma_method

VRef = tuple[str, int]  # (variable, shift)
Valuation = tuple[tuple[str, bool], ...]


class SV(str, Enum):
    """Status values: I < U < F and I < U < T."""

    I = "I"
    U = "U"
    F = "F"
    T = "T"


_RANK = {SV.I: 0, SV.U: 1, SV.F: 2, SV.T: 2}


def sv_leq(a: SV, b: SV) -> bool:
    if a == b:
        return True
    return _RANK[a] < _RANK[b]


class Status(dict):
    """Map from S-variables to status values; missing keys are I.

    Keys are ``("g", name)``, ``("v", var, shift)`` or ``("e", eq, shift)``.
    """

    def get_sv(self, key) -> SV:
        return self.get(key, SV.I)

    def leq(self, other: "Status") -> bool:
        return all(sv_leq(v, other.get_sv(k)) for k, v in self.items())

    def strictly_below(self, other: "Status") -> bool:
        return self.leq(other) and dict(self) != dict(other)

    def known_vars(self) -> frozenset[VRef]:
        return frozenset((k[1], k[2]) for k, v in self.items() if k[0] == "v" and v is SV.T)


class EngineError(Exception):
    pass


class StateExplosion(EngineError):
    pass


class IncompleteStatus(EngineError):
    pass


def mode_label(val: Mapping[str, bool]) -> str:
    if not val:
        return "()"
    return "(" + ",".join(("T" if v else "F") for _, v in sorted(val.items())) + ")"


def inst_name(i: Inst) -> str:
    eid, k = i
    return "•" * k + eid if k >= 0 else f"pre^{-k}({eid})"


def vref_name(v: VRef) -> str:
    b, k = v
    return "•" * k + b if k >= 0 else f"pre^{-k}({b})"


@dataclass
class ExecResult:
    ok: bool
    valuation: Valuation
    mode_type: fe.ModeType
    stage: str = "done"
    reason: str = ""
    enabled: tuple[str, ...] = ()
    facts: tuple[Inst, ...] = ()
    g_sigma: tuple[Inst, ...] = ()
    g_bar: tuple[Inst, ...] = ()
    deleted: tuple[Inst, ...] = ()
    H: tuple[Inst, ...] = ()
    blocks: tuple[tuple[tuple[Inst, ...], tuple[VRef, ...]], ...] = ()
    dependents: tuple[VRef, ...] = ()
    known: frozenset[VRef] = frozenset()
    next_known: frozenset[VRef] = frozenset()
    next_delta: frozenset[Inst] = frozenset()
    diagnosis: dict = field(default_factory=dict)
    statuses: list[Status] = field(default_factory=list)
    sigma: SigmaResult | None = None
    array: DiffArrayResult | None = None
    refined: bool = False
    released: tuple[VRef, ...] = ()

    @property
    def valuation_dict(self) -> dict[str, bool]:
        return dict(self.valuation)


class ModeEngine:
    """Structural view of a desugared and expanded model."""

    def __init__(self, model: fe.Model, stretch: int = 0):
        self.source = model
        m = fe.desugar_when(model)
        self.model = fe.expand_nonstandard(m, stretch)
        self.stretch = stretch
        self.eq_ids = [e.id for e in self.model.equations]
        self.guard_names = self.model.guard_names
        self.transient = set(self.model.transient_guards)
        self._refs: dict[str, frozenset[VRef]] = {}
        self._deg: dict[str, dict[str, int]] = {}
        for e in self.model.equations:
            refs = {(s.base, s.shift) for s in fe.signals(e.residual) if s.shift >= 0}
            self._refs[e.id] = frozenset(refs)
            self._deg[e.id] = fe.incidence(e.residual)
        self._sigma_cache: dict[frozenset, SigmaResult] = {}
        self._sym_cache: dict = {}
        self._body_guards = set()
        for g in self.model.guards:
            self._body_guards |= fe.guard_refs(g.body)
        self.predicates: list[fe.Pred] = []
        for g in self.model.guards:
            for p in fe.predicates(g.body):
                if p not in self.predicates:
                    self.predicates.append(p)

    # -- incidence ---------------------------------------------------------

    def refs(self, inst: Inst) -> frozenset[VRef]:
        eid, k = inst
        return frozenset((b, s + k) for b, s in self._refs[eid])

    def degrees(self, eid: str) -> dict[str, int]:
        return self._deg[eid]

    def sym_residual(self, inst: Inst, keep_params: bool = False):
        """Sympy residual of a shifted equation instance."""
        key = (inst, keep_params)
        if key not in self._sym_cache:
            e = self.model.equation(inst[0])
            self._sym_cache[key] = fe.to_sympy(
                e.residual, self.model.param_values, self.model.functions, inst[1], keep_params
            )
        return self._sym_cache[key]

    # -- modes -------------------------------------------------------------

    def enabled(self, eid: str, val: Mapping[str, bool]) -> bool:
        return fe.eval_bool(self.model.equation(eid).guard, dict(val), lambda p: False)

    def mode_eqs(self, val: Mapping[str, bool]) -> tuple[str, ...]:
        return tuple(e for e in self.eq_ids if self.enabled(e, val))

    def mode_type(self, val: Mapping[str, bool]) -> fe.ModeType:
        return fe.ModeType.TRANSIENT if any(val.get(g, False) for g in self.transient) else fe.ModeType.LONG

    def long_sigma(self, eqs: Iterable[str]) -> SigmaResult:
        key = frozenset(eqs)
        if key not in self._sigma_cache:
            ordered = [e for e in self.eq_ids if e in key]
            self._sigma_cache[key] = sigma_method({e: self._deg[e] for e in ordered})
        return self._sigma_cache[key]

    def all_valuations(self, cap: int = 2**12) -> list[dict[str, bool]]:
        n = len(self.guard_names)
        if 2**n > cap:
            raise StateExplosion(f"model too large for enumeration: {2**n} modes exceed cap {cap}")
        return [dict(zip(self.guard_names, bits)) for bits in itertools.product([False, True], repeat=n)]

    def long_valuations(self) -> list[dict[str, bool]]:
        return [v for v in self.all_valuations() if self.mode_type(v) is fe.ModeType.LONG]

    def steady_state(self, val: Mapping[str, bool]) -> tuple[frozenset[VRef], frozenset[Inst]]:
        """Known variables and context of an instant inside a long mode."""
        sig = self.long_sigma(self.mode_eqs(val))
        if not sig.success:
            return frozenset(), frozenset()
        known = frozenset((x, m) for x, d in sig.offsets.d.items() for m in range(d))
        return known, frozenset(sig.f_bar)

    # -- one instant -------------------------------------------------------

    def exec_run(
        self,
        known: frozenset[VRef],
        delta: frozenset[Inst],
        val: Mapping[str, bool],
        depth_left: int | None = None,
    ) -> ExecResult:
        """Symbolically execute one instant under the guard valuation ``val``.

        When deleting the whole overdetermined part leaves the instant
        underdetermined, the instant is re-executed with the fallback
        resolution: predictions of variables that are not states of the
        new long mode are released, and only a minimal set of conflicting
        consistency equations is deleted.
        """
        res = self._exec(known, delta, val, depth_left, refined=False)
        if res.ok or res.stage != "conflict resolution" or self.mode_type(val) is not fe.ModeType.LONG:
            return res
        sig = self.long_sigma(self.mode_eqs(val))
        released = frozenset((b, k) for b, k in known if k >= sig.offsets.d.get(b, 0))
        known2 = known - released
        delta2 = frozenset(i for i in delta if not (self.refs(i) & released))
        alt = self._exec(known2, delta2, val, depth_left, refined=True)
        if not alt.ok:
            return res
        alt.released = tuple(sorted(released))
        return alt

    def _exec(
        self,
        known: frozenset[VRef],
        delta: frozenset[Inst],
        val: Mapping[str, bool],
        depth_left: int | None,
        refined: bool,
    ) -> ExecResult:
        valuation = tuple(sorted(val.items()))
        mtype = self.mode_type(val)
        res = ExecResult(True, valuation, mtype, known=known)
        sigma = Status()
        for g in self.guard_names:
            sigma[("g", g)] = SV.T if val[g] else SV.F
        for (b, k) in known:
            sigma[("v", b, k)] = SV.T
        res.statuses.append(Status(sigma))

        def step(changes: Mapping):
            new = Status(sigma)
            new.update(changes)
            if not sigma.leq(new):
                raise EngineError("status decreased")
            sigma.clear()
            sigma.update(new)
            res.statuses.append(Status(sigma))

        enabled = self.mode_eqs(val)
        res.enabled = enabled
        step({("e", e, 0): SV.F for e in self.eq_ids if e not in enabled})
        facts = tuple(sorted(i for i in delta if i[0] in enabled))
        res.facts = facts
        if facts:
            step({("e", i[0], i[1]): SV.T for i in facts})

        # index reduction
        G = [(e, 0) for e in enabled]
        if mtype is fe.ModeType.LONG:
            sig = self.long_sigma(enabled)
            res.sigma = sig
            if not sig.success:
                return self._fail(res, "index reduction", "mode system is not structurally nonsingular", sig.diagnosis)
            g_sigma, g_bar = sig.f_sigma, sig.f_bar
        else:
            arr = self._transient_reduc(G, known, val, depth_left)
            res.array = arr
            if not arr.success:
                return self._fail(res, "index reduction", f"transient instant: {arr.reason}", arr.dm, array=arr)
            g_sigma, g_bar = arr.f_sigma, arr.f_bar
        res.g_sigma, res.g_bar = tuple(g_sigma), tuple(g_bar)

        fact_set = set(facts)
        K = [i for i in dict.fromkeys(list(g_sigma) + list(g_bar)) if i not in fact_set]
        deps = sorted({v for i in K for v in self.refs(i) if v not in known})
        step({**{("e", i[0], i[1]): SV.U for i in K}, **{("v", v[0], v[1]): SV.U for v in deps}})

        # conflict resolution
        if refined:
            ok, H, deleted, dm, blocks = solve_conflict_minimal(K, deps, self.refs, set(g_bar))
        else:
            ok, H, deleted, dm, blocks = solve_conflict(K, deps, self.refs)
        res.refined = refined
        res.deleted = tuple(deleted)
        res.H = tuple(H)
        res.dependents = tuple(deps)
        res.blocks = tuple(blocks)
        if deleted:
            step({("e", i[0], i[1]): SV.F for i in deleted})
        if not ok:
            return self._fail(res, "conflict resolution", "underdetermined after removing conflicting equations", dm)

        # evaluation
        solved = {v for _, vs in blocks for v in vs}
        step({**{("e", i[0], i[1]): SV.T for i in H}, **{("v", v[0], v[1]): SV.T for v in solved}})

        # completeness and tick
        for e in enabled:
            if sigma.get_sv(("e", e, 0)) not in (SV.T, SV.F):
                return self._fail(res, "tick", f"equation {e} left undecided", None)
        nk, nd = tick(sigma)
        res.next_known, res.next_delta = nk, nd
        return res

    def _fail(self, res: ExecResult, stage: str, reason: str, dm: DMResult | None, array=None) -> ExecResult:
        res.ok = False
        res.stage = stage
        res.reason = reason
        res.diagnosis = diagnose(dm) if dm is not None else {}
        return res

    def _transient_reduc(self, G, known, val, depth_left) -> DiffArrayResult:
        K = self.model.cascade_bound
        steps = K if depth_left is None else max(0, min(K, depth_left))
        trans_vals = [v for v in self.all_valuations() if self.mode_type(v) is fe.ModeType.TRANSIENT]
        finals = self.long_valuations()
        results = []
        for n in range(0, steps + 1):
            for seq in itertools.product(trans_vals, repeat=n):
                rows = [list(G)] + [[(e, k + 1) for e in self.mode_eqs(v)] for k, v in enumerate(seq)]
                for fin in finals:
                    sig = self.long_sigma(self.mode_eqs(fin))
                    if not sig.success:
                        continue
                    sh = len(rows)
                    fs = [(e, c + sh) for e, c in sig.f_sigma]
                    fb = [(e, c + sh) for e, c in sig.f_bar]
                    r = diff_array(rows, fs, fb, self.refs, known)
                    if not r.success:
                        return r
                    results.append(r)
                    if r.phase == 1:
                        break
            if steps == n:
                break
        if not results:
            return DiffArrayResult(False, (), (), 0, 1, "no final long mode is structurally nonsingular")
        return results[0]


def solve_conflict(
    K: Iterable[Inst], dependents: Iterable[VRef], refs: Callable[[Inst], Iterable[VRef]]
) -> tuple[bool, list[Inst], list[Inst], DMResult, list]:
    """Delete the overdetermined part of K, then check for underdetermination."""
    K = list(K)
    deps = list(dependents)
    inc = {i: {v: 0 for v in refs(i)} for i in K}
    g = BipGraph.from_incidence(inc, deps)
    g = BipGraph(tuple(K), tuple(deps), g.weights)
    dm = dulmage_mendelsohn(g, deps)
    deleted = sorted(dm.over[0])
    if deleted:
        keep = [i for i in K if i not in dm.over[0]]
        g = g.restrict(keep, deps)
        dm = dulmage_mendelsohn(g, deps)
        if dm.over[0]:
            raise EngineError("overdetermined part remains after deletion")
    ok = not dm.under[0] and not dm.under[1]
    H = [i for i in K if i in dm.enabled[0]]
    return ok, H, deleted, dm, list(dm.blocks)


def solve_conflict_minimal(
    K: Iterable[Inst], dependents: Iterable[VRef], refs: Callable[[Inst], Iterable[VRef]], consistency: set[Inst]
) -> tuple[bool, list[Inst], list[Inst], DMResult, list]:
    """Delete as few overdetermined consistency equations as possible.

    Dynamic equations of the overdetermined part are always kept; the
    consistency equations are added back one at a time while a matching
    still covers every kept equation, those free of known variables first.
    """
    K = list(K)
    deps = list(dependents)
    dep_set = set(deps)
    inc = {i: {v: 0 for v in refs(i)} for i in K}
    g = BipGraph(tuple(K), tuple(deps), BipGraph.from_incidence(inc, deps).weights)
    dm = dulmage_mendelsohn(g, deps)
    over = dm.over[0]
    if not over:
        ok = not dm.under[0] and not dm.under[1]
        return ok, [i for i in K if i in dm.enabled[0]], [], dm, list(dm.blocks)
    keep = [i for i in K if i not in over or i not in consistency]
    if not exists_complete_matching(g.restrict(keep, deps)):
        return False, [], [], dm, []
    candidates = sorted(
        (i for i in K if i in over and i in consistency),
        key=lambda i: (any(v not in dep_set for v in refs(i)), K.index(i)),
    )
    for i in candidates:
        trial = keep + [i]
        if exists_complete_matching(g.restrict(trial, deps)):
            keep = trial
    kept = set(keep)
    deleted = sorted(i for i in K if i not in kept)
    g2 = g.restrict([i for i in K if i in kept], deps)
    dm = dulmage_mendelsohn(g2, deps)
    ok = not dm.under[0] and not dm.under[1] and not dm.over[0]
    return ok, [i for i in K if i in dm.enabled[0]], deleted, dm, list(dm.blocks)


def tick(sigma: Status) -> tuple[frozenset[VRef], frozenset[Inst]]:
    """Shift the instant back: known variables and the next context."""
    known = set()
    delta = set()
    for key, v in sigma.items():
        if v is not SV.T:
            continue
        if key[0] == "v" and key[2] >= 1:
            known.add((key[1], key[2] - 1))
        elif key[0] == "e" and key[2] >= 1:
            delta.add((key[1], key[2] - 1))
    return frozenset(known), frozenset(delta)


def facts(delta: Iterable[Inst], enabled: Iterable[str]) -> frozenset[Inst]:
    en = set(enabled)
    return frozenset(i for i in delta if i[0] in en)


def diagnose(dm: DMResult | None) -> dict:
    if dm is None:
        return {}

    def nm(x):
        if isinstance(x, tuple) and len(x) == 2 and isinstance(x[1], int):
            return vref_name(x)
        return str(x)

    return {
        "under": {"eqs": sorted(map(nm, dm.under[0])), "vars": sorted(map(nm, dm.under[1]))},
        "over": {"eqs": sorted(map(nm, dm.over[0])), "vars": sorted(map(nm, dm.over[1]))},
    }


# ---------------------------------------------------------------------------
# Automaton


@dataclass(frozen=True)
class NodeKey:
    prev: Valuation  # values of guards read by guard bodies
    known: frozenset[VRef]
    delta: frozenset[Inst]
    depth: int  # consecutive transient instants just executed


@dataclass
class Edge:
    src: int
    dst: int | None
    valuation: Valuation
    result: ExecResult
    impulsive: bool = False

    @property
    def change(self) -> bool:
        return bool(self.result.deleted)


@dataclass
class ModeAutomaton:
    nodes: list[NodeKey]
    edges: list[Edge]
    initial: int
    failures: list[Edge] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return not self.failures

    def out_edges(self, n: int) -> list[Edge]:
        return [e for e in self.edges if e.src == n]

    def signature(self) -> tuple:
        """Label-preserving canonical form for isomorphism checks."""
        names = {i: (n.prev, tuple(sorted(n.known)), tuple(sorted(n.delta)), n.depth) for i, n in enumerate(self.nodes)}
        return tuple(sorted(
            (names[e.src], names.get(e.dst), e.valuation, tuple(e.result.deleted), tuple(e.result.H), e.result.ok)
            for e in self.edges + self.failures
        ))


def successor_valuations(engine: ModeEngine, prev: Mapping[str, bool], depth: int) -> list[dict[str, bool]]:
    """All guard valuations reachable from ``prev`` under free predicate oracles."""
    preds = engine.predicates
    if 2 ** len(preds) > 2**12:
        raise StateExplosion("too many guard predicates for enumeration")
    out: list[dict[str, bool]] = []
    for bits in itertools.product([False, True], repeat=len(preds)):
        table = dict(zip(preds, bits))
        val = {}
        for g in engine.model.guards:
            val[g.name] = fe.eval_bool(g.body, dict(prev), table.__getitem__)
        if depth > engine.model.cascade_bound and engine.mode_type(val) is fe.ModeType.TRANSIENT:
            continue
        if val not in out:
            out.append(val)
    return out


def initial_node(engine: ModeEngine) -> tuple[NodeKey, dict[str, bool]]:
    init = {g.name: g.init for g in engine.model.guards}
    known, delta = engine.steady_state(init)
    prev = tuple(sorted((g, v) for g, v in init.items() if g in engine._body_guards))
    return NodeKey(prev, known, delta, 0), init


def explore_modes(engine: ModeEngine, node_cap: int = 10000) -> ModeAutomaton:
    """Breadth-first exploration over all guard valuations."""
    start, init = initial_node(engine)
    nodes = [start]
    index = {start: 0}
    full_prev = {0: init}
    edges: list[Edge] = []
    failures: list[Edge] = []
    queue = deque([0])
    while queue:
        n = queue.popleft()
        node = nodes[n]
        prev = full_prev[n]
        for val in successor_valuations(engine, prev, node.depth):
            trans = engine.mode_type(val) is fe.ModeType.TRANSIENT
            depth = node.depth + 1 if trans else 0
            r = engine.exec_run(node.known, node.delta, val, engine.model.cascade_bound - node.depth)
            vt = tuple(sorted(val.items()))
            if not r.ok:
                failures.append(Edge(n, None, vt, r))
                continue
            key = NodeKey(
                tuple(sorted((g, v) for g, v in val.items() if g in engine._body_guards)),
                r.next_known,
                r.next_delta,
                depth,
            )
            if key not in index:
                if len(nodes) >= node_cap:
                    raise StateExplosion(f"automaton exceeds {node_cap} nodes")
                index[key] = len(nodes)
                nodes.append(key)
                full_prev[index[key]] = val
                queue.append(index[key])
            edges.append(Edge(n, index[key], vt, r))
    return ModeAutomaton(nodes, edges, 0, failures)


@dataclass
class ProgressResult:
    ok: bool
    reason: str = ""
    stuck_guards: tuple[str, ...] = ()
    subsystem: tuple[str, ...] = ()
    diagnosis: dict = field(default_factory=dict)
    steps: list[tuple[str, ...]] = field(default_factory=list)
    statuses: list[Status] = field(default_factory=list)
    final: list[ExecResult] = field(default_factory=list)


def exec_run_progress(
    engine: ModeEngine,
    known: frozenset[VRef],
    delta: frozenset[Inst],
    guards: Mapping[str, bool | None],
) -> ProgressResult:
    """Progressive instant: solve what is determined, then re-evaluate guards.

    Guards valued None are unknown. Equations whose guard is known true
    are evaluated as soon as the determined part of the enabled subset
    allows it; instantaneous guards become known once their body
    variables are. Delayed guards with a value reduce to ``exec_run``.
    """
    out = ProgressResult(True)
    sigma = Status()
    gv = dict(guards)
    for g, v in gv.items():
        if v is not None:
            sigma[("g", g)] = SV.T if v else SV.F
    for (b, k) in known:
        sigma[("v", b, k)] = SV.T
    out.statuses.append(Status(sigma))
    done_eqs: set[str] = set()

    def value(b: fe.BoolExpr):
        if isinstance(b, fe.BConst):
            return b.value
        if isinstance(b, fe.GuardRef):
            return gv.get(b.name)
        if isinstance(b, fe.BNot):
            v = value(b.arg)
            return None if v is None else not v
        if isinstance(b, (fe.BAnd, fe.BOr)):
            vs = [value(a) for a in b.args]
            if isinstance(b, fe.BAnd):
                return False if False in vs else (None if None in vs else True)
            return True if True in vs else (None if None in vs else False)
        return None

    while True:
        if all(v is not None for v in gv.values()):
            r = engine.exec_run(known, delta, {g: bool(v) for g, v in gv.items()})
            out.final.append(r)
            out.ok = r.ok
            if not r.ok:
                out.reason = r.reason
                out.diagnosis = r.diagnosis
            return out
        G = [e for e in engine.eq_ids if e not in done_eqs and value(engine.model.equation(e).guard) is True]
        cur_known = sigma.known_vars()
        deps = sorted({v for e in G for v in engine.refs((e, 0)) if v not in cur_known})
        inc = {(e, 0): {v: 0 for v in engine.refs((e, 0))} for e in G}
        dm = dulmage_mendelsohn(BipGraph.from_incidence(inc, deps), deps)
        solved_eqs = [i[0] for i in dm.enabled[0]]
        progress = False
        if solved_eqs:
            new = Status(sigma)
            for e in solved_eqs:
                new[("e", e, 0)] = SV.T
            for v in dm.enabled[1]:
                new[("v", v[0], v[1])] = SV.T
            assert sigma.leq(new)
            sigma = new
            out.statuses.append(Status(sigma))
            done_eqs |= set(solved_eqs)
            out.steps.append(tuple(sorted(solved_eqs)))
            progress = True
        cur_known = sigma.known_vars()
        for g in engine.model.guards:
            if gv.get(g.name) is not None:
                continue
            body_refs = {
                (s.base, s.shift) for p in fe.predicates(g.body) for s in fe.signals(p.lhs) + fe.signals(p.rhs)
            }
            if body_refs <= cur_known:
                # structurally evaluable: explore both values
                gv[g.name] = False
                progress = True
        if not progress:
            out.ok = False
            out.stuck_guards = tuple(g for g, v in gv.items() if v is None)
            out.subsystem = tuple(G)
            out.reason = f"subsystem {{{', '.join(G)}}} is underdetermined; guards {{{', '.join(out.stuck_guards)}}} cannot be evaluated"
            out.diagnosis = diagnose(dm)
            return out

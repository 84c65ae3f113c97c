"""Structural index reduction.

``find_offsets`` computes the smallest dual solution (c, d) of the
assignment problem by the classical two-step fixpoint. ``sigma_method``
turns offsets into latent equations. ``exist_quantif_eqn`` and
``diff_array`` handle systems with existentially quantified future
variables, as needed by transient modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

from .graph import BipGraph, DMResult, NoCompleteMatching, dulmage_mendelsohn, max_weight_complete_matching

Node = Hashable
Inst = tuple[str, int]  # (equation id, shift)


class InternalError(RuntimeError):
    """Invariant violated inside the structural analysis."""


@dataclass(frozen=True)
class SigmaOffsets:
    c: Mapping[Node, int]
    d: Mapping[Node, int]

    @property
    def index(self) -> int:
        return max(self.c.values(), default=0)


def find_offsets(g: BipGraph, seed: int | None = None) -> SigmaOffsets:
    """Smallest offsets with d_x - c_f >= d_fx, tight on a max-weight matching."""
    if len(g.eqs) != len(g.vars):
        raise NoCompleteMatching("offsets need a square graph")
    m = max_weight_complete_matching(g, seed)
    c = {f: 0 for f in g.eqs}
    d = {x: 0 for x in g.vars}
    maxw = max(g.weights.values(), default=0)
    limit = 10 * (len(g.eqs) + maxw) + 10
    for _ in range(limit):
        for x in g.vars:
            d[x] = 0
        for (f, x), w in g.weights.items():
            d[x] = max(d[x], w + c[f])
        changed = False
        for f in g.eqs:
            x = m[f]
            new = d[x] - g.weights[(f, x)]
            if new != c[f]:
                c[f] = new
                changed = True
        if not changed:
            return SigmaOffsets(dict(c), dict(d))
    raise InternalError("offset iteration did not reach a fixpoint")


@dataclass(frozen=True)
class SigmaResult:
    success: bool
    offsets: SigmaOffsets | None
    f_sigma: tuple[Inst, ...]
    f_bar: tuple[Inst, ...]
    diagnosis: DMResult | None = None

    @property
    def index(self) -> int:
        return self.offsets.index if self.offsets else 0

    @property
    def latent(self) -> tuple[Inst, ...]:
        return tuple(i for i in self.f_sigma if i[1] > 0)

    def leading(self) -> dict[Node, int]:
        return dict(self.offsets.d) if self.offsets else {}


def sigma_method(eqs: Mapping[str, Mapping[Node, int]], dependents: Iterable[Node] | None = None) -> SigmaResult:
    """Index reduction of a square system given as ``eq -> {var: degree}``."""
    g = BipGraph.from_incidence(eqs, dependents)
    dm = dulmage_mendelsohn(g)
    if len(g.eqs) != len(g.vars) or not dm.ok:
        return SigmaResult(False, None, (), (), dm)
    off = find_offsets(g)
    fs = tuple((f, off.c[f]) for f in g.eqs)
    fb = tuple((f, k) for f in g.eqs for k in range(off.c[f]))
    return SigmaResult(True, off, fs, fb, dm)


@dataclass(frozen=True)
class ExistResult:
    b_over: bool
    b_under: bool
    f_sigma: tuple
    f_bar: tuple
    dm: DMResult
    reason: str = ""

    @property
    def success(self) -> bool:
        return self.b_over and self.b_under


def exist_quantif_eqn(
    F: Mapping[Node, Iterable[Node]], X: Iterable[Node], W: Iterable[Node], Y: Iterable[Node] = ()
) -> ExistResult:
    """Check that F determines X for some values of W, given Y.

    Y variables are inputs: they are not dependents of the DM
    decomposition, and equations over Y only are consistency equations.
    Conditions: no overdetermined part; no X variable underdetermined;
    the blocks determining X neither contain nor use W variables.
    """
    X, W, Y = set(X), set(W), set(Y)
    deps = X | W
    rows = {f: [x for x in vs if x in deps] for f, vs in F.items()}
    pure = tuple(f for f, vs in rows.items() if not vs)
    inc = {f: {x: 0 for x in vs} for f, vs in rows.items() if vs}
    g = BipGraph.from_incidence(inc)
    dm = dulmage_mendelsohn(g, deps)
    if dm.over[0]:
        return ExistResult(False, True, (), pure, dm, "overdetermined")
    if dm.under[1] & X:
        return ExistResult(True, False, (), pure, dm, "underdetermined")
    x_blocks = [b for b in dm.blocks if set(b[1]) & X]
    fs: list = []
    for eqs, vs in x_blocks:
        if set(vs) & W:
            return ExistResult(True, False, (), pure, dm, "determined variables share a block with future variables")
        for f in eqs:
            if set(rows[f]) & W:
                return ExistResult(True, False, (), pure, dm, "determined variables depend on future variables")
        fs.extend(eqs)
    rest = tuple(f for eqs, _ in dm.blocks for f in eqs if f not in fs)
    return ExistResult(True, True, tuple(fs), pure + rest, dm)


@dataclass(frozen=True)
class DiffArrayResult:
    success: bool
    f_sigma: tuple[Inst, ...]
    f_bar: tuple[Inst, ...]
    rows_used: int
    phase: int
    reason: str = ""
    dm: DMResult | None = None
    X: frozenset = field(default_factory=frozenset)
    W: frozenset = field(default_factory=frozenset)


class OverdeterminedCascade(Exception):
    pass


def diff_array(
    rows: Sequence[Sequence[Inst]],
    final_sigma: Sequence[Inst],
    final_bar: Sequence[Inst],
    incidence: Callable[[Inst], Iterable[Node]],
    known: Iterable[Node],
) -> DiffArrayResult:
    """Grow an array of shifted systems until the current unknowns are determined.

    ``rows[0]`` is the current transient system; ``rows[k]`` are the
    hypothesized continuation modes already shifted k times; the final
    long-mode rows are already shifted past the last continuation.
    """
    known = set(known)
    x_vars = frozenset(v for f in rows[0] for v in incidence(f) if v not in known)
    first: tuple[Inst, ...] = tuple(dict.fromkeys(rows[0]))
    pure_first = tuple(f for f in first if not set(incidence(f)) - known)

    def run(array: Sequence[Inst]) -> tuple[ExistResult, frozenset]:
        vs = {f: tuple(incidence(f)) for f in array}
        w = frozenset(v for f in array for v in vs[f] if v not in known and v not in x_vars)
        y = {v for f in array for v in vs[f] if v in known}
        return exist_quantif_eqn(vs, x_vars, w, y), w

    def finish(r: ExistResult, w, k: int, phase: int) -> DiffArrayResult:
        bar = tuple(dict.fromkeys(pure_first + tuple(f for f in r.f_bar if f in first)))
        return DiffArrayResult(True, tuple(r.f_sigma), bar, k, phase, "", r.dm, x_vars, w)

    array: list[Inst] = []
    for k, row in enumerate(rows):
        array.extend(f for f in row if f not in array)
        r, w = run(array)
        if not r.b_over:
            return DiffArrayResult(False, (), (), k + 1, 1, "overdetermined cascade", r.dm, x_vars, w)
        if r.success:
            return finish(r, w, k + 1, 1)

    bar = [f for f in final_bar if f not in array]
    full = array + [f for f in final_sigma if f not in array] + bar
    r, w = run(full)
    revisited = False
    while not r.b_over:
        over = set(r.dm.over[0])
        drop = [f for f in bar if f in over]
        if revisited and drop:
            raise InternalError("final-mode consistency equations still overdetermined after removal")
        if not drop:
            return DiffArrayResult(False, (), (), len(rows) + 1, 2, "overdetermined cascade", r.dm, x_vars, w)
        full = [f for f in full if f not in drop]
        bar = [f for f in bar if f not in drop]
        revisited = True
        r, w = run(full)
    if not r.success:
        return DiffArrayResult(False, (), (), len(rows) + 1, 2, r.reason or "underdetermined", r.dm, x_vars, w)
    return finish(r, w, len(rows) + 1, 2)

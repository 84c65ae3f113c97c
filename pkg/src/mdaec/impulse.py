"""Impulse-order analysis of the system solved at a mode change.

The order of a quantity is the exponent o such that ``q * ∂^o`` is finite
and nonzero. Every equation of the restart system is expanded into a sum
of monomials whose orders are linear forms in the unknown orders. A sum
that vanishes needs its maximal order attained at least twice; the solver
enumerates which pair attains it, checks each case with a small LP and
takes the interval hull of the feasible cases.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
import sympy as sp
from scipy.optimize import linprog

from . import frontend as fe
from .modes import ExecResult, ModeEngine, inst_name, vref_name

NEG_INF = -math.inf
POS_INF = math.inf
Order = Fraction | float


class ImpulseError(Exception):
    pass


class UnsupportedExpression(ImpulseError):
    pass


class InfiniteOrder(ImpulseError):
    pass


class Inconsistent(ImpulseError):
    pass


def o_add(a: Order, b: Order) -> Order:
    """Order addition with -inf absorbing, also against +inf."""
    if a == NEG_INF or b == NEG_INF:
        return NEG_INF
    if a == POS_INF or b == POS_INF:
        return POS_INF
    return a + b


def o_scale(c: Fraction, a: Order) -> Order:
    if c == 0:
        return Fraction(0)
    if a in (NEG_INF, POS_INF):
        return a if c > 0 else -a
    return c * a


def o_str(a: Order) -> str:
    if a == NEG_INF:
        return "-inf"
    if a == POS_INF:
        return "+inf"
    return str(a)


class Classification(str, Enum):
    IMPULSIVE = "impulsive"
    NON_IMPULSIVE = "non-impulsive"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class LinForm:
    """Order of a monomial: const + sum(coef * o(var))."""

    coeffs: tuple[tuple[str, Fraction], ...]
    const: Fraction

    def value(self, orders: Mapping[str, Order]) -> Order:
        acc: Order = self.const
        for v, c in self.coeffs:
            acc = o_add(acc, o_scale(c, orders[v]))
        return acc

    def vars(self) -> set[str]:
        return {v for v, _ in self.coeffs}

    def __str__(self) -> str:
        parts = [f"{c}*o({v})" if c != 1 else f"o({v})" for v, c in self.coeffs]
        if self.const or not parts:
            parts.append(str(self.const))
        return " + ".join(parts)


@dataclass
class OrderConstraintSystem:
    variables: list[str]
    equations: list[list[LinForm]]
    names: list[str]
    lower: dict[str, Order] = field(default_factory=dict)
    upper: dict[str, Order] = field(default_factory=dict)
    function_args: list[set[str]] = field(default_factory=list)

    def copy(self) -> "OrderConstraintSystem":
        return OrderConstraintSystem(
            list(self.variables), [list(e) for e in self.equations], list(self.names),
            dict(self.lower), dict(self.upper), [set(s) for s in self.function_args],
        )


@dataclass
class OrderSolution:
    lower: dict[str, Order]
    upper: dict[str, Order]
    exact: bool = True
    cases: int = 0

    def classify(self, v: str) -> Classification:
        lo, hi = self.lower[v], self.upper[v]
        if lo != NEG_INF and lo > 0:
            return Classification.IMPULSIVE
        if hi != POS_INF and hi <= 0:
            return Classification.NON_IMPULSIVE
        return Classification.UNKNOWN

    def order(self, v: str) -> Order | None:
        if self.lower[v] == self.upper[v]:
            return self.lower[v]
        return None

    def impulsive(self) -> list[str]:
        return [v for v in self.lower if self.classify(v) is Classification.IMPULSIVE]


# ---------------------------------------------------------------------------
# Restart systems


@dataclass
class RestartSystem:
    """Equations solved at a change instant, in increment form.

    ``eqs`` are residuals in the step symbol, the unknown symbols and the
    known left state (derivative coordinates ``x__dK``, ``x__0``).
    """

    eqs: list[sp.Expr]
    names: list[str]
    unknowns: dict[sp.Symbol, str]  # symbol -> report name
    increments: dict[sp.Symbol, tuple[str, int]]  # U symbol -> (var, shift) it completes
    algebraic: dict[sp.Symbol, tuple[str, int]]
    facts: list[sp.Expr] = field(default_factory=list)
    residuals: dict[str, sp.Expr] = field(default_factory=dict)
    scaled: dict[sp.Symbol, tuple[sp.Symbol, Order]] = field(default_factory=dict)

    def symbol(self, name: str) -> sp.Symbol:
        for s, n in self.unknowns.items():
            if n == name:
                return s
        raise KeyError(name)


def known_expansion(b: str, k: int) -> sp.Expr:
    """Known shifted value in derivative coordinates."""
    if k <= 0:
        return fe.sym(b, k)
    return fe.sym(b, 0) + sum(math.comb(k, j) * fe.STEP**j * fe.dsym(b, j) for j in range(1, k + 1))


def build_restart_system(engine: ModeEngine, r: ExecResult, keep_params: bool = True) -> RestartSystem:
    """Restart system of an executed instant with knowns in derivative coordinates."""
    known = set(r.known)
    subs: dict[sp.Symbol, sp.Expr] = {}
    for (b, k) in known:
        if k >= 1:
            subs[fe.sym(b, k)] = known_expansion(b, k)
    unknowns: dict[sp.Symbol, str] = {}
    increments: dict[sp.Symbol, tuple[str, int]] = {}
    algebraic: dict[sp.Symbol, tuple[str, int]] = {}
    solved = sorted({v for _, vs in r.blocks for v in vs})
    for (b, k) in solved:
        if (b, k - 1) in known:
            u = sp.Symbol(f"U_{b}_{k}", real=True)
            subs[fe.sym(b, k)] = known_expansion(b, k - 1) + u
            unknowns[u] = f"{vref_name((b, k))}-{vref_name((b, k - 1))}"
            increments[u] = (b, k)
        else:
            s = fe.sym(b, k)
            unknowns[s] = vref_name((b, k))
            algebraic[s] = (b, k)
    eqs, names = [], []
    for inst in r.H:
        ex = engine.sym_residual(inst, keep_params=keep_params).xreplace(subs)
        eqs.append(sp.expand(_clear_step(ex)))
        names.append(inst_name(inst))
    facts = [sp.expand(engine.sym_residual(i, keep_params=keep_params).xreplace(subs)) for i in r.facts]
    residuals = {
        inst_name(i): sp.expand(engine.sym_residual(i, keep_params=keep_params).xreplace(subs)) for i in r.deleted
    }
    return RestartSystem(eqs, names, unknowns, increments, algebraic, facts, residuals)


def _clear_step(ex: sp.Expr) -> sp.Expr:
    """Multiply by the smallest power of the step making the expression polynomial in it."""
    ex = sp.together(ex)
    num, den = sp.fraction(ex)
    p = sp.Poly(den, fe.STEP) if den.has(fe.STEP) else None
    if p is not None and len(p.terms()) == 1:
        (deg,), coef = p.terms()[0]
        return sp.expand(num) / coef if coef != 1 else sp.expand(num)
    return sp.expand(num) / den if den != 1 else sp.expand(num)


# ---------------------------------------------------------------------------
# Constraint construction


def _monomial_split(term: sp.Expr, unknowns: Iterable[sp.Symbol]):
    """Split a product into (step exponent, unknown powers, known coefficient, function factors)."""
    unk = set(unknowns)
    step_exp = Fraction(0)
    powers: dict[sp.Symbol, Fraction] = {}
    coef = sp.Integer(1)
    funcs: list[sp.Expr] = []
    for factor in sp.Mul.make_args(term):
        base, exp = factor.as_base_exp()
        if base == fe.STEP:
            step_exp += Fraction(str(exp))
        elif base in unk:
            if not exp.is_Rational:
                raise UnsupportedExpression(f"non-rational power of {base}")
            powers[base] = powers.get(base, Fraction(0)) + Fraction(int(exp.p), int(exp.q))
        elif factor.free_symbols & unk or factor.has(fe.STEP):
            funcs.append(factor)
        else:
            coef *= factor
    return step_exp, powers, coef, funcs


def _is_zero_known(coef: sp.Expr, facts: Sequence[sp.Expr]) -> bool:
    c = sp.simplify(coef)
    if c == 0:
        return True
    for f in facts:
        if f == 0:
            continue
        ratio = sp.simplify(c / f)
        if not ratio.free_symbols:
            return True
        fp = sp.Poly(f, fe.STEP) if f.has(fe.STEP) else None
        if fp is not None:
            for _, part in fp.terms():
                if part != 0 and not sp.simplify(c / part).free_symbols:
                    return True
    return False


def build_order_constraints(rs: RestartSystem) -> OrderConstraintSystem:
    """Order constraints of every equation plus priors on increments."""
    names = {s: rs.unknowns[s] for s in rs.unknowns}
    variables = list(names.values())
    ocs = OrderConstraintSystem(variables, [], [])
    for s, n in names.items():
        ocs.lower[n] = NEG_INF
        ocs.upper[n] = POS_INF
        if s in rs.increments:
            ocs.upper[n] = Fraction(0)
    unk = list(rs.unknowns)
    for ex, name in zip(rs.eqs, rs.names):
        groups: dict[tuple, sp.Expr] = {}
        known_groups: dict[Fraction, sp.Expr] = {}
        func_args: set[str] = set()
        for term in sp.Add.make_args(sp.expand(ex)):
            if term == 0:
                continue
            step_exp, powers, coef, funcs = _monomial_split(term, unk)
            for f in funcs:
                args = f.free_symbols & set(unk)
                if f.has(fe.STEP) and not args:
                    raise UnsupportedExpression(f"step symbol inside {f}")
                func_args |= {names[a] for a in args}
                coef *= f
            key = (step_exp, tuple(sorted(((names[s], p) for s, p in powers.items()))))
            if not powers:
                known_groups[step_exp] = known_groups.get(step_exp, 0) + coef
            else:
                groups[key] = groups.get(key, 0) + coef
        forms: list[LinForm] = []
        for (step_exp, pw), coef in groups.items():
            if sp.simplify(coef) == 0:
                continue
            forms.append(LinForm(tuple(pw), -step_exp))
        nonzero = [e for e, c in known_groups.items() if not _is_zero_known(c, rs.facts)]
        if nonzero:
            forms.append(LinForm((), -min(nonzero)))
        ocs.equations.append(forms)
        ocs.names.append(name)
        ocs.function_args.append(func_args)
    return ocs


def saturate(terms: Sequence[str]) -> list[tuple[str, tuple[str, ...]]]:
    """All single-term isolations of ``0 = t1 + ... + tn``: ti = -(sum of the others)."""
    if len(terms) <= 1:
        return [(t, ()) for t in terms]
    return [(t, tuple(u for u in terms if u is not t)) for t in terms]


# ---------------------------------------------------------------------------
# Solving


_BIG = 1.0e4


def _propagate_zeros(ocs: OrderConstraintSystem) -> tuple[list[list[LinForm]], set[str]]:
    """Single-term equations force their only unknown to order -inf."""
    zeros: set[str] = {v for v in ocs.variables if ocs.upper[v] == NEG_INF}
    eqs = [list(e) for e in ocs.equations]
    changed = True
    while changed:
        changed = False
        new_eqs = []
        for e in eqs:
            e = [t for t in e if not (t.vars() & zeros and all(c > 0 for v, c in t.coeffs if v in zeros))]
            if any(t.vars() & zeros for t in e):
                raise InfiniteOrder("division by a vanishing quantity")
            if len(e) == 1:
                t = e[0]
                if not t.coeffs:
                    raise Inconsistent("a nonzero known quantity must vanish")
                if len(t.coeffs) == 1:
                    zeros.add(t.coeffs[0][0])
                    changed = True
                    continue
            new_eqs.append(e)
        eqs = new_eqs
    return [e for e in eqs if len(e) >= 2], zeros


class _LP:
    def __init__(self, variables: list[str], lower, upper):
        self.vars = variables
        self.idx = {v: i for i, v in enumerate(variables)}
        self.bounds = []
        for v in variables:
            lo = lower.get(v, NEG_INF)
            hi = upper.get(v, POS_INF)
            self.bounds.append((
                -_BIG if lo == NEG_INF else float(lo),
                _BIG if hi == POS_INF else float(hi),
            ))

    def row(self, a: LinForm, b: LinForm) -> tuple[np.ndarray, float]:
        """Coefficients of a - b (variables) and the constant b.const - a.const."""
        r = np.zeros(len(self.vars))
        for v, c in a.coeffs:
            r[self.idx[v]] += float(c)
        for v, c in b.coeffs:
            r[self.idx[v]] -= float(c)
        return r, float(b.const - a.const)

    def solve(self, eq: list, le: list, objective: np.ndarray | None = None):
        n = len(self.vars)
        c = np.zeros(n) if objective is None else objective
        A_eq = np.array([r for r, _ in eq]) if eq else None
        b_eq = np.array([b for _, b in eq]) if eq else None
        A_ub = np.array([r for r, _ in le]) if le else None
        b_ub = np.array([b for _, b in le]) if le else None
        if n == 0:
            ok = all(abs(b) < 1e-9 for _, b in eq) and all(b >= -1e-9 for _, b in le)
            return ok, None
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=self.bounds, method="highs")
        if res.status != 0:
            return False, None
        return True, res


def _rational(x: float) -> Order:
    if x <= -_BIG / 2:
        return NEG_INF
    if x >= _BIG / 2:
        return POS_INF
    return Fraction(x).limit_denominator(1000)


def solve_orders(ocs: OrderConstraintSystem, max_cases: int = 2**10) -> OrderSolution:
    """Interval hull of the orders over all consistent saturation cases."""
    eqs, zeros = _propagate_zeros(ocs)
    free = [v for v in ocs.variables if v not in zeros]
    lp = _LP(free, ocs.lower, ocs.upper)
    lower = {v: (NEG_INF if v in zeros else POS_INF) for v in ocs.variables}
    upper = {v: NEG_INF for v in ocs.variables}
    used = {v for e in eqs for t in e for v in t.vars()}
    eqs = sorted(eqs, key=len)
    options = [list(itertools.combinations(range(len(e)), 2)) for e in eqs]

    def constraints(choice: list[tuple[int, int]]):
        eq_rows, le_rows = [], []
        for e, (i, j) in zip(eqs, choice):
            eq_rows.append(lp.row(e[i], e[j]))
            for k, t in enumerate(e):
                if k not in (i, j):
                    le_rows.append(lp.row(t, e[i]))
        return eq_rows, le_rows

    leaves: list[list[tuple[int, int]]] = []
    overflow = False

    def dfs(choice: list[tuple[int, int]]):
        nonlocal overflow
        if overflow:
            return
        eq_rows, le_rows = constraints(choice)
        ok, _ = lp.solve(eq_rows, le_rows)
        if not ok:
            return
        if len(choice) == len(eqs):
            leaves.append(list(choice))
            if len(leaves) > max_cases:
                overflow = True
            return
        for opt in options[len(choice)]:
            dfs(choice + [opt])

    dfs([])
    if overflow:
        return _interval_fallback(ocs, zeros)
    if not leaves:
        raise Inconsistent("no consistent assignment of impulse orders")
    for choice in leaves:
        eq_rows, le_rows = constraints(choice)
        for v in free:
            if v not in used:
                lo = ocs.lower.get(v, NEG_INF)
                hi = ocs.upper.get(v, POS_INF)
                lower[v] = min(lower[v], lo)
                upper[v] = max(upper[v], hi)
                continue
            obj = np.zeros(len(free))
            obj[lp.idx[v]] = 1.0
            _, rmin = lp.solve(eq_rows, le_rows, obj)
            _, rmax = lp.solve(eq_rows, le_rows, -obj)
            lower[v] = min(lower[v], _rational(rmin.fun))
            upper[v] = max(upper[v], _rational(-rmax.fun))
    for v in zeros:
        lower[v], upper[v] = NEG_INF, NEG_INF
    for args in ocs.function_args:
        for v in args:
            if upper[v] == POS_INF or upper[v] > 0:
                raise InfiniteOrder(f"function of possibly impulsive {v}")
    return OrderSolution(lower, upper, True, len(leaves))


def _interval_fallback(ocs: OrderConstraintSystem, zeros: set[str]) -> OrderSolution:
    lower = {v: NEG_INF for v in ocs.variables}
    upper = {v: ocs.upper.get(v, POS_INF) for v in ocs.variables}
    for v in zeros:
        upper[v] = NEG_INF
    return OrderSolution(lower, upper, False, 0)


# ---------------------------------------------------------------------------
# Rescaling


def rescale(rs: RestartSystem, sol: OrderSolution) -> RestartSystem:
    """Substitute each impulsive w of order mu by nu * step^(-mu) and renormalize equations."""
    subs: dict[sp.Symbol, sp.Expr] = {}
    scaled: dict[sp.Symbol, tuple[sp.Symbol, Order]] = dict(rs.scaled)
    unknowns = dict(rs.unknowns)
    for s, name in rs.unknowns.items():
        if sol.classify(name) is not Classification.IMPULSIVE:
            continue
        mu = sol.order(name)
        if mu is None or mu == POS_INF:
            raise InfiniteOrder(f"order of {name} is not determined")
        nu = sp.Symbol(f"nu_{s.name}", real=True)
        subs[s] = nu * fe.STEP ** (-sp.Rational(mu.numerator, mu.denominator))
        scaled[nu] = (s, mu)
        unknowns[nu] = f"nu[{name}]"
        del unknowns[s]
    if not subs:
        return rs
    orders = {n: (sol.upper[n] if sol.upper[n] != NEG_INF else NEG_INF) for n in sol.upper}
    eqs = []
    for ex in rs.eqs:
        ex2 = sp.expand(ex.xreplace(subs))
        worst: Order = NEG_INF
        for term in sp.Add.make_args(ex2):
            if term == 0:
                continue
            step_exp, powers, _, _ = _monomial_split(term, list(unknowns))
            val: Order = -step_exp
            for p, e in powers.items():
                name = unknowns[p]
                o = Fraction(0) if name.startswith("nu[") else orders.get(name, POS_INF)
                val = o_add(val, o_scale(e, o))
            if val != NEG_INF:
                worst = val if worst == NEG_INF else max(worst, val)
        if worst not in (NEG_INF, POS_INF) and worst != 0:
            ex2 = sp.expand(ex2 * fe.STEP ** sp.Rational(worst.numerator, worst.denominator))
        eqs.append(ex2)
    algebraic = {k: v for k, v in rs.algebraic.items() if k not in subs}
    increments = {k: v for k, v in rs.increments.items() if k not in subs}
    return RestartSystem(eqs, list(rs.names), unknowns, increments, algebraic, rs.facts, rs.residuals, scaled)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ImpulseReport:
    source: str
    target: str
    deleted: tuple[str, ...]
    solution: OrderSolution | None
    system: RestartSystem | None
    error: str = ""

    @property
    def impulsive(self) -> list[str]:
        return self.solution.impulsive() if self.solution else []

    def profile(self, v: str) -> str:
        o = self.solution.order(v) if self.solution else None
        if o is None:
            return "?"
        if o == NEG_INF:
            return "...,0,0,0,..."
        return f"...,0,{o_str(o)},0,..."

    def to_json(self) -> dict:
        out = {"from": self.source, "to": self.target, "deleted": list(self.deleted), "error": self.error}
        if self.solution:
            out["variables"] = {
                v: {
                    "lower": o_str(self.solution.lower[v]),
                    "upper": o_str(self.solution.upper[v]),
                    "class": self.solution.classify(v).value,
                    "profile": self.profile(v),
                }
                for v in sorted(self.solution.lower)
            }
            out["residuals"] = {k: str(v) for k, v in self.system.residuals.items()}
            out["exact"] = self.solution.exact
        return out


def analyze_instant(engine: ModeEngine, r: ExecResult, source: str = "", target: str = "") -> ImpulseReport:
    """Impulse orders of the unknowns solved at an executed instant."""
    try:
        rs = build_restart_system(engine, r)
        sol = solve_orders(build_order_constraints(rs))
        return ImpulseReport(source, target, tuple(inst_name(i) for i in r.deleted), sol, rs)
    except ImpulseError as exc:
        return ImpulseReport(source, target, tuple(inst_name(i) for i in r.deleted), None, None, str(exc))

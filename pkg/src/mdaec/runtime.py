"""Numerical semantics: residual evaluation, Newton solving, restarts and simulation.

Within a long mode the index-reduced shift-form system is solved block by
block at every step, with the infinitesimal step replaced by the finite
step ``dt``. At a mode change the restart values come from one of four
paths: linear elimination of the possibly impulsive variables followed by
``step = 0``; the step-parameterized restart iteration on a system whose
impulsive unknowns are rescaled by their orders; the same iteration on
the raw system; or a level-wise linear jump for higher-order models and
transient cascades.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import sympy as sp

from . import frontend as fe
from .graph import BipGraph, exists_complete_matching
from .impulse import (
    POS_INF,
    Classification,
    ImpulseError,
    OrderSolution,
    RestartSystem,
    analyze_instant,
    build_restart_system,
    known_expansion,
    o_str,
    rescale,
)
from .modes import ExecResult, ModeEngine, mode_label

log = logging.getLogger(__name__)

Valuation = dict[str, bool]
State = dict[str, list[float]]  # variable -> derivative coordinates [x, x', ...]


class SimulationError(Exception):
    """Base class of numerical failures."""


class DomainError(SimulationError):
    def __init__(self, message: str, index: int = -1):
        super().__init__(message)
        self.index = index


class NoConvergence(SimulationError):
    def __init__(self, message: str, iterations: int = 0, residual: float = math.inf):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class IterationCap(NoConvergence):
    pass


class NonlinearImpulsive(SimulationError):
    pass


class SingularAfterElimination(SimulationError):
    pass


class SingularJacobian(SimulationError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances of the restart iteration and of Newton's method."""

    h0: float = 1e-2
    theta: float = 0.5
    eps: float = 1e-8
    max_iter: int = 200
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    retries: int = 5
    seed: int | None = None

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.eps <= 0 or self.h0 <= 0:
            raise ValueError("eps and h0 must be positive")

    @property
    def rng_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        return int(os.environ.get("MDAEC_SEED", "0"))


# ---------------------------------------------------------------------------
# Compiled residuals


def _sign(x: float) -> float:
    return 0.0 if x == 0 else math.copysign(1.0, x)


_MODULES = [{"sign": _sign, "Abs": abs}, "math"]


def compile_exprs(exprs: Sequence[sp.Expr], args: Sequence[sp.Symbol]) -> Callable[..., np.ndarray]:
    """Fast scalar evaluator of a list of expressions; math domain errors name the component."""
    fs = [sp.lambdify(list(args), e, modules=_MODULES) for e in exprs]
    whole = sp.lambdify(list(args), list(exprs), modules=_MODULES)

    def call(*vals) -> np.ndarray:
        try:
            out = np.array(whole(*vals), dtype=float)
        except (ValueError, ZeroDivisionError, OverflowError, TypeError):
            for i, f in enumerate(fs):
                try:
                    float(f(*vals))
                except (ValueError, ZeroDivisionError, OverflowError, TypeError) as exc:
                    raise DomainError(f"component {i}: {exc}", i) from None
            raise DomainError("evaluation failed") from None
        if not np.all(np.isfinite(out)):
            bad = int(np.flatnonzero(~np.isfinite(out))[0])
            raise DomainError(f"component {bad} is not finite", bad)
        return out

    return call


@dataclass
class NumericSystem:
    """Square residual ``F_h(u)`` with bound known values.

    ``projection`` lists the coordinates kept by the restart iteration;
    ``post`` maps the unknown vector to the restart values it defines.
    """

    exprs: list[sp.Expr]
    unknowns: list[sp.Symbol]
    names: list[str]
    knowns: list[sp.Symbol]
    values: np.ndarray
    projection: list[int]
    step: sp.Symbol = fe.STEP
    _f: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if self._f is None:
            self._f = compile_exprs(self.exprs, list(self.unknowns) + [self.step] + list(self.knowns))

    @property
    def dim(self) -> int:
        return len(self.unknowns)

    def bind(self, values: Mapping[sp.Symbol, float]) -> "NumericSystem":
        vals = np.array([float(values.get(k, 0.0)) for k in self.knowns])
        return replace(self, values=vals, _f=self._f)

    def residual(self, u: Sequence[float], h: float) -> np.ndarray:
        return self._f(*u, h, *self.values)

    def project(self, u: Sequence[float]) -> np.ndarray:
        return np.asarray(u, dtype=float)[self.projection]


def eval_residual(sys: NumericSystem, u: Sequence[float], h: float) -> np.ndarray:
    """Componentwise residual of ``sys`` at ``u`` and step ``h``."""
    if len(u) != sys.dim:
        raise ValueError(f"expected {sys.dim} unknowns, got {len(u)}")
    return sys.residual(u, h)


# ---------------------------------------------------------------------------
# Newton


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], u: np.ndarray, f0: np.ndarray | None = None) -> np.ndarray:
    """Central-difference Jacobian with step max(1e-7, 1e-7 |u_i|)."""
    u = np.asarray(u, dtype=float)
    m = len(f0) if f0 is not None else len(fun(u))
    J = np.empty((m, len(u)))
    for i in range(len(u)):
        s = max(1e-7, 1e-7 * abs(u[i]))
        up, um = u.copy(), u.copy()
        up[i] += s
        um[i] -= s
        J[:, i] = (fun(up) - fun(um)) / (2 * s)
    return J


def _newton_once(fun, u0, tol, max_iter, jac) -> tuple[np.ndarray, float, int]:
    u = np.array(u0, dtype=float)
    f = fun(u)
    nf = float(np.max(np.abs(f))) if len(f) else 0.0
    mu = 0.0
    for it in range(max_iter):
        if nf <= tol:
            return u, nf, it
        J = jac(u) if jac is not None else fd_jacobian(fun, u, f)
        du = None
        if J.shape[0] == J.shape[1] and mu == 0.0:
            try:
                if np.linalg.cond(J) < 1e13:
                    du = np.linalg.solve(J, -f)
            except np.linalg.LinAlgError:
                du = None
        if du is None:
            JtJ = J.T @ J
            mu = max(mu * 10, 1e-8 * max(1.0, float(np.max(np.abs(JtJ))) if JtJ.size else 1.0))
            du = np.linalg.solve(JtJ + mu * np.eye(len(u)), -J.T @ f)
        if float(np.max(np.abs(du), initial=0.0)) <= 1e-14 * (1 + float(np.max(np.abs(u), initial=0.0))) and nf <= 1e-6:
            return u, nf, it
        lam = 1.0
        n2 = float(f @ f)
        accepted = False
        while lam >= 1e-6:
            try:
                un = u + lam * du
                fn = fun(un)
            except DomainError:
                lam /= 2
                continue
            if float(fn @ fn) < n2 or float(np.max(np.abs(fn))) <= tol:
                accepted = True
                break
            lam /= 2
        if not accepted:
            if mu > 1e12:
                break
            mu = max(mu * 10, 1e-6)
            continue
        mu = mu / 10 if mu > 1e-8 else 0.0
        u, f = un, fn
        nf = float(np.max(np.abs(f))) if len(f) else 0.0
        if lam * float(np.max(np.abs(du), initial=0.0)) <= 1e-15 * (1 + float(np.max(np.abs(u), initial=0.0))):
            if nf <= max(tol, 1e-10):
                return u, nf, it + 1
    if nf <= tol:
        return u, nf, max_iter
    raise NoConvergence(f"Newton did not converge (residual {nf:.3e})", max_iter, nf)


def newton_solve(
    fun: Callable[[np.ndarray], np.ndarray],
    guess: Sequence[float],
    tol: float = 1e-12,
    max_iter: int = 50,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
    retries: int = 5,
    seed: int = 0,
) -> np.ndarray:
    """Damped Newton with Levenberg-Marquardt fallback and seeded random restarts."""
    guess = np.asarray(guess, dtype=float)
    try:
        return _newton_once(fun, guess, tol, max_iter, jac)[0]
    except (NoConvergence, DomainError) as first:
        err = first
    rng = np.random.default_rng(seed)
    for _ in range(retries):
        g = guess + rng.normal(scale=0.1 * (1 + np.abs(guess)))
        try:
            return _newton_once(fun, g, tol, max_iter, jac)[0]
        except (NoConvergence, DomainError) as exc:
            err = exc
    if isinstance(err, NoConvergence):
        raise err
    raise NoConvergence(str(err))


def gauss_newton_min_norm(
    fun: Callable[[np.ndarray], np.ndarray],
    start: Sequence[float],
    tol: float = 1e-12,
    max_iter: int = 50,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Pseudo-inverse iteration from ``start``; gives the least-change solution of linear rows."""
    u = np.array(start, dtype=float)
    for _ in range(max_iter):
        f = fun(u)
        if len(f) == 0 or float(np.max(np.abs(f))) <= tol:
            return u
        J = jac(u) if jac is not None else fd_jacobian(fun, u, f)
        du = -np.linalg.pinv(J, rcond=1e-12) @ f
        u = u + du
        if float(np.max(np.abs(du))) <= 1e-15 * (1 + float(np.max(np.abs(u)))):
            break
    f = fun(u)
    if len(f) and float(np.max(np.abs(f))) > max(tol, 1e-9):
        raise NoConvergence(f"least-change solve left residual {float(np.max(np.abs(f))):.3e}", max_iter)
    return u


# ---------------------------------------------------------------------------
# Restart iteration


@dataclass
class RestartResult:
    u: np.ndarray
    x: np.ndarray
    iterations: int
    h: float
    path: str = ""
    history: list[float] = field(default_factory=list)


def restart_solve(
    sys: NumericSystem, guess: Sequence[float], cfg: SolverConfig = SolverConfig(), path: str = "delta-cascade"
) -> RestartResult:
    """Solve at step h, project, shrink h by theta, until projections agree within eps."""
    u = np.asarray(guess, dtype=float)
    x = sys.project(u)
    h = cfg.h0
    history: list[float] = []
    for it in range(1, cfg.max_iter + 1):
        y = x
        hh = h
        u = newton_solve(
            lambda v: sys.residual(v, hh),
            u,
            tol=min(h, cfg.newton_tol),
            max_iter=cfg.newton_max_iter,
            retries=cfg.retries,
            seed=cfg.rng_seed,
        )
        x = sys.project(u)
        h *= cfg.theta
        diff = float(np.max(np.abs(x - y))) if len(x) else 0.0
        if len(history) >= 2 and diff > 10 * history[-1] and diff > 1e-3:
            log.warning("restart iteration changed branch at h=%g (jump %g)", hh, diff)
        history.append(diff)
        if diff <= cfg.eps:
            return RestartResult(u, x, it, hh, path, history)
    raise IterationCap(f"restart iteration did not settle in {cfg.max_iter} steps", cfg.max_iter, history[-1])


# ---------------------------------------------------------------------------
# Change-instant systems in shift form


def _left_bindings(rs: RestartSystem, left: Mapping[str, Sequence[float]], t: float) -> dict[sp.Symbol, float]:
    vals: dict[sp.Symbol, float] = {fe.TIME: t}
    for ex in rs.eqs:
        for s in ex.free_symbols:
            if s in rs.unknowns or s == fe.STEP or s in vals:
                continue
            base, _, tag = s.name.rpartition("__")
            coords = left.get(base, ())
            if tag.startswith("d"):
                k = int(tag[1:])
            elif tag.startswith("m"):
                k = 0
            else:
                k = 0 if int(tag) == 0 else -1
            if k < 0:
                raise SimulationError(f"unexpected known symbol {s}")
            vals[s] = float(coords[k]) if k < len(coords) else 0.0
    return vals


@dataclass
class ChangeSystem:
    """Shift-form system of a change instant, bound to left-limit values."""

    rs: RestartSystem
    numeric: NumericSystem
    state_post: dict[str, sp.Expr]  # state variable -> post value expression in unknowns, step, knowns

    def post_values(self, u: Sequence[float], h: float = 0.0) -> dict[str, float]:
        env = dict(zip(self.numeric.knowns, self.numeric.values))
        env.update(zip(self.numeric.unknowns, u))
        env[fe.STEP] = h
        return {b: float(ex.xreplace(env)) for b, ex in self.state_post.items()}


def _post_exprs(rs: RestartSystem) -> dict[str, sp.Expr]:
    best: dict[str, tuple[int, sp.Expr]] = {}
    for s, (b, k) in rs.increments.items():
        if b not in best or k > best[b][0]:
            best[b] = (k, known_expansion(b, k - 1) + s)
    for s, (b, k) in rs.algebraic.items():
        if k >= 1 and (b not in best or k > best[b][0]):
            best[b] = (k, s)
    return {b: ex for b, (_, ex) in best.items()}


def change_system(
    engine: ModeEngine,
    r: ExecResult,
    left: Mapping[str, Sequence[float]],
    t: float,
    rs: RestartSystem | None = None,
    sol: OrderSolution | None = None,
) -> ChangeSystem:
    """Numeric shift-form system of the instant ``r`` with the left-limit bound."""
    rs = rs or build_restart_system(engine, r, keep_params=False)
    unknowns = list(rs.unknowns)
    names = [rs.unknowns[s] for s in unknowns]
    post = _post_exprs(rs)
    incs = {s for s in rs.increments} | {s for s, (_, k) in rs.algebraic.items() if k >= 1}
    proj = [i for i, s in enumerate(unknowns) if s in incs]
    knowns = sorted({s for ex in rs.eqs for s in ex.free_symbols} - set(unknowns) - {fe.STEP}, key=str)
    knowns = sorted(set(knowns) | {s for ex in post.values() for s in ex.free_symbols} - set(unknowns) - {fe.STEP}, key=str)
    binding = _left_bindings(replace(rs, eqs=list(rs.eqs) + list(post.values())), left, t)
    ns = NumericSystem(list(rs.eqs), unknowns, names, knowns, np.zeros(len(knowns)), proj)
    return ChangeSystem(rs, ns.bind(binding), post)


def _guess(cs: ChangeSystem, alg_left: Mapping[str, float]) -> np.ndarray:
    g = []
    for s in cs.numeric.unknowns:
        if s in cs.rs.algebraic:
            b, _ = cs.rs.algebraic[s]
            g.append(float(alg_left.get(b, 0.0)))
        elif s in cs.rs.scaled:
            g.append(1.0)
        else:
            g.append(0.0)
    return np.array(g)


def possibly_impulsive(rs: RestartSystem, sol: OrderSolution | None) -> list[sp.Symbol]:
    """Algebraic unknowns whose order may be positive."""
    if sol is None:
        return []
    out = []
    for s in rs.algebraic:
        name = rs.unknowns[s]
        if sol.classify(name) is Classification.IMPULSIVE or sol.upper.get(name, POS_INF) > 0:
            out.append(s)
    return out


@dataclass
class Elimination:
    rows: list[sp.Expr]
    unknowns: list[sp.Symbol]
    eliminated: list[sp.Symbol]


def eliminate_linear_impulsive(rs: RestartSystem, impulsive: Sequence[sp.Symbol]) -> Elimination:
    """Combine rows to cancel the impulsive columns, then keep the leading term at step 0."""
    imp = list(impulsive)
    others = [s for s in rs.unknowns if s not in imp]
    if imp:
        M = sp.Matrix(rs.eqs).jacobian(imp)
        if M.free_symbols & set(imp):
            raise NonlinearImpulsive("impulsive variables enter nonlinearly")
        combos = [sum(v[i] * rs.eqs[i] for i in range(len(rs.eqs))) for v in M.T.nullspace()]
    else:
        combos = list(rs.eqs)
    rows = []
    for c in combos:
        num = sp.expand(sp.numer(sp.together(sp.expand(c))))
        if num == 0:
            continue
        if num.free_symbols & set(imp):
            raise NonlinearImpulsive("elimination left impulsive variables behind")
        parts = sp.collect(num, fe.STEP, evaluate=False)
        lowest = min(parts, key=lambda p: sp.degree(p, fe.STEP) if p != 1 else 0)
        row = sp.expand(parts[lowest])
        if not row.free_symbols & set(others):
            raise SingularAfterElimination("a combined row has no unknown at step 0")
        rows.append(row)
    inc = {i: {s: 0 for s in row.free_symbols if s in others} for i, row in enumerate(rows)}
    g = BipGraph(tuple(range(len(rows))), tuple(others), {(i, s): 0 for i, r in inc.items() for s in r})
    if len(rows) != len(others) or not exists_complete_matching(g):
        raise SingularAfterElimination(f"{len(rows)} rows for {len(others)} unknowns after elimination")
    return Elimination(rows, others, imp)


def restart_by_elimination(
    cs: ChangeSystem, impulsive: Sequence[sp.Symbol], cfg: SolverConfig, alg_left: Mapping[str, float] = {}
) -> tuple[dict[str, float], Elimination]:
    el = eliminate_linear_impulsive(cs.rs, impulsive)
    ns = NumericSystem(el.rows, el.unknowns, [cs.rs.unknowns[s] for s in el.unknowns], cs.numeric.knowns, cs.numeric.values, [])
    full_guess = dict(zip(cs.numeric.unknowns, _guess(cs, alg_left)))
    u = newton_solve(
        lambda v: ns.residual(v, 0.0),
        [full_guess[s] for s in el.unknowns],
        tol=cfg.newton_tol,
        max_iter=cfg.newton_max_iter,
        retries=cfg.retries,
        seed=cfg.rng_seed,
    )
    env = dict(zip(el.unknowns, u))
    full = [env.get(s, 0.0) for s in cs.numeric.unknowns]
    return cs.post_values(full, 0.0), el


def restart_rescaled(
    cs: ChangeSystem, sol: OrderSolution, cfg: SolverConfig, alg_left: Mapping[str, float] = {}
) -> tuple[dict[str, float], RestartResult]:
    rs2 = rescale(cs.rs, sol)
    if rs2 is cs.rs:
        raise SimulationError("nothing to rescale")
    unknowns = list(rs2.unknowns)
    incs = set(rs2.increments) | {s for s, (_, k) in rs2.algebraic.items() if k >= 1}
    proj = [i for i, s in enumerate(unknowns) if s in incs]
    ns = NumericSystem(rs2.eqs, unknowns, [rs2.unknowns[s] for s in unknowns], cs.numeric.knowns, cs.numeric.values, proj)
    cs2 = ChangeSystem(rs2, ns, cs.state_post)
    res = restart_solve(ns, _guess(cs2, alg_left), cfg, path="rescaled")
    return cs2.post_values(res.u, 0.0), res


def restart_delta(
    cs: ChangeSystem, cfg: SolverConfig, alg_left: Mapping[str, float] = {}
) -> tuple[dict[str, float], RestartResult]:
    res = restart_solve(cs.numeric, _guess(cs, alg_left), cfg, path="delta-cascade")
    return cs.post_values(res.u, 0.0), res


# ---------------------------------------------------------------------------
# Level-wise linear jumps


def semilinear_restart(
    A: np.ndarray,
    C: Callable[[np.ndarray], np.ndarray],
    x_left: Sequence[float],
    jac_C: Callable[[np.ndarray], np.ndarray] | None = None,
    min_norm: bool = False,
    tol: float = 1e-13,
) -> np.ndarray:
    """Solve ``A (X - X_left) = 0`` together with ``C(X) = 0``.

    With ``min_norm`` the stacked system may be rectangular and the
    least-change solution from ``X_left`` is returned; otherwise it must be
    square with a nonsingular Jacobian at the solution.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float)) if np.size(A) else np.zeros((0, len(x_left)))
    xl = np.asarray(x_left, dtype=float)

    def F(x):
        return np.concatenate([A @ (x - xl), C(x)])

    def J(x):
        jc = jac_C(x) if jac_C is not None else fd_jacobian(C, x) if len(C(x)) else np.zeros((0, len(x)))
        return np.vstack([A, jc])

    if min_norm:
        return gauss_newton_min_norm(F, xl, tol=tol, jac=J)
    if F(xl).shape[0] != len(xl):
        raise SingularJacobian("restart system is not square")
    x = newton_solve(F, xl, tol=tol, jac=J)
    if abs(np.linalg.det(J(x))) < 1e-12:
        raise SingularJacobian("stacked restart Jacobian is singular at the solution")
    return x


def _dparse(s: sp.Symbol) -> tuple[str, int] | None:
    base, sep, tag = s.name.rpartition("__d")
    if not sep or not tag.isdigit():
        return None
    return base, int(tag)


def time_derivative(ex: sp.Expr, order: int = 1) -> sp.Expr:
    """Total time derivative of an expression in derivative symbols ``x__dK``."""
    for _ in range(order):
        out = sp.diff(ex, fe.TIME)
        for s in ex.free_symbols:
            p = _dparse(s)
            if p is not None:
                out += sp.diff(ex, s) * fe.dsym(p[0], p[1] + 1)
        ex = sp.expand(out)
    return ex


_POST = "+"


def _split_post(e: fe.Expr) -> fe.Expr:
    def fn(n: fe.Expr):
        if isinstance(n, fe.Sig) and fe.SHIFT in n.word:
            return fe.Sig(n.base + _POST, tuple(c for c in n.word if c == fe.DIFF))
        return None

    return fe.transform(e, fn)


def _has_shift(e: fe.Expr) -> bool:
    return any(fe.SHIFT in s.word for s in fe.signals(e))


@dataclass
class LevelwisePlan:
    """Symbolic ingredients of a level-wise restart into a final long mode."""

    d: dict[str, int]
    jump_rows: list[list[sp.Expr]]  # per combined row, coefficient per state column
    states: list[str]
    constraints: dict[int, list[sp.Expr]]  # level -> expressions
    restart_rows: dict[int, list[sp.Expr]]


def levelwise_plan(engine: ModeEngine, target: Mapping[str, bool], final: Mapping[str, bool]) -> LevelwisePlan:
    src = fe.desugar_when(engine.source)
    params = src.param_values
    fin = engine.long_sigma(engine.mode_eqs(final))
    if not fin.success:
        raise SimulationError(f"final mode {mode_label(final)} is not structurally nonsingular")
    d = {x: fin.offsets.d.get(x, 0) for x in src.var_names}
    states = [x for x in src.var_names if d[x] >= 1]
    algebraic = [x for x in src.var_names if d[x] == 0]
    enabled = [e for e in engine.eq_ids if engine.enabled(e, target)]
    dyn, restart = [], []
    for eid in enabled:
        eq = src.equation(eid)
        (restart if _has_shift(eq.residual) else dyn).append(eq)
    rows = [fe.derivative_sympy(eq.residual, params, src.functions) for eq in dyn]
    alg_syms = [fe.dsym(a, k) for a in algebraic for k in range(0, 3)]
    alg_syms = [s for s in alg_syms if any(s in r.free_symbols for r in rows)]
    if alg_syms:
        M = sp.Matrix(rows).jacobian(alg_syms)
        if M.free_symbols & set(alg_syms):
            raise NonlinearImpulsive("algebraic variables enter the dynamics nonlinearly")
        combos = [sp.expand(sum(v[i] * rows[i] for i in range(len(rows)))) for v in M.T.nullspace()]
    else:
        combos = rows
    leads = [fe.dsym(x, d[x]) for x in states]
    jump_rows = []
    for c in combos:
        coeffs = [sp.diff(c, l) for l in leads]
        if any(cf.free_symbols & set(leads) for cf in coeffs):
            raise NonlinearImpulsive("leading derivatives enter nonlinearly")
        if all(cf == 0 for cf in coeffs):
            continue
        jump_rows.append(coeffs)
    constraints: dict[int, list[sp.Expr]] = {}
    for eid, k in fin.f_bar:
        c = fin.offsets.c[eid]
        J = c - k
        base = fe.derivative_sympy(src.equation(eid).residual, params, src.functions)
        constraints.setdefault(J, []).append(time_derivative(base, k))
    restart_rows: dict[int, list[sp.Expr]] = {}
    for eq in restart:
        ex = fe.derivative_sympy(_split_post(eq.residual), params, src.functions)
        levels = set()
        for s in ex.free_symbols:
            p = _dparse(s)
            if p and p[0].endswith(_POST):
                levels.add(d[p[0][: -len(_POST)]] - p[1])
        if len(levels) != 1:
            raise SimulationError(f"restart equation {eq.id} mixes derivative levels")
        restart_rows.setdefault(levels.pop(), []).append(ex)
    return LevelwisePlan(d, jump_rows, states, constraints, restart_rows)


def levelwise_restart(plan: LevelwisePlan, left: Mapping[str, Sequence[float]], t: float) -> State:
    """Jump levels from positions upwards: least-change solution of jump rows, constraints and laws."""
    d = plan.d

    def P(x: str, k: int) -> sp.Symbol:
        return fe.dsym(x + _POST, k)

    pre: dict[sp.Symbol, float] = {fe.TIME: t}
    for x, coords in left.items():
        for k, v in enumerate(coords):
            pre[fe.dsym(x, k)] = float(v)
    to_post = {fe.dsym(x, k): P(x, k) for x in plan.states for k in range(d[x] + 1)}
    known_post: dict[sp.Symbol, float] = {}
    A_full = np.array([[float(sp.sympify(cf).xreplace(pre)) for cf in row] for row in plan.jump_rows])
    dmax = max((d[x] for x in plan.states), default=0)
    for J in range(dmax, 0, -1):
        cols = [i for i, x in enumerate(plan.states) if d[x] >= J]
        unk = [P(plan.states[i], d[plan.states[i]] - J) for i in cols]
        xl = np.array([pre.get(fe.dsym(plan.states[i], d[plan.states[i]] - J), 0.0) for i in cols])
        A = A_full[:, cols] if len(A_full) else np.zeros((0, len(cols)))
        A = A[np.any(np.abs(A) > 0, axis=1)]
        exprs = [c.xreplace(to_post) for c in plan.constraints.get(J, [])]
        exprs += list(plan.restart_rows.get(J, []))
        exprs = [e.xreplace(known_post).xreplace(pre) for e in exprs]
        extra = {s for e in exprs for s in e.free_symbols} - set(unk)
        if extra:
            raise SimulationError(f"restart level {J} depends on undetermined {sorted(map(str, extra))}")
        if exprs:
            C = compile_exprs(exprs, unk)
            Jc = sp.lambdify(unk, sp.Matrix(exprs).jacobian(unk).tolist(), modules=_MODULES)
            x = semilinear_restart(A, lambda v: C(*v), xl, lambda v: np.array(Jc(*v), dtype=float), min_norm=True)
        else:
            x = semilinear_restart(A, lambda v: np.zeros(0), xl, lambda v: np.zeros((0, len(unk))), min_norm=True)
        known_post.update(zip(unk, map(float, x)))
    return {x: [known_post.get(P(x, k), pre.get(fe.dsym(x, k), 0.0)) for k in range(d[x])] for x in plan.states}


# ---------------------------------------------------------------------------
# Within-mode stepping


@dataclass
class _Block:
    unknowns: list[tuple[str, int]]
    syms: list[sp.Symbol]
    args: list[sp.Symbol]
    f: Callable
    jac: Callable
    linear: bool


class ModeSchedule:
    """Compiled block-triangular step of one long mode."""

    def __init__(self, engine: ModeEngine, val: Mapping[str, bool]):
        self.val = dict(val)
        self.label = mode_label(val)
        sig = engine.long_sigma(engine.mode_eqs(val))
        if not sig.success:
            raise SimulationError(f"mode {self.label} is not structurally nonsingular")
        self.sigma = sig
        self.d = {x: sig.offsets.d.get(x, 0) for x in engine.model.var_names}
        known, delta = engine.steady_state(val)
        r = engine.exec_run(known, delta, val)
        if not r.ok:
            raise SimulationError(f"mode {self.label}: {r.reason}")
        self.result = r
        self.blocks: list[_Block] = []
        for insts, vrefs in r.blocks:
            exprs = [engine.sym_residual(i) for i in insts]
            syms = [fe.sym(b, k) for b, k in vrefs]
            args = sorted({s for e in exprs for s in e.free_symbols} - set(syms) - {fe.STEP, fe.TIME}, key=str)
            allargs = syms + [fe.STEP, fe.TIME] + args
            J = sp.Matrix(exprs).jacobian(syms)
            linear = not (J.free_symbols & set(syms))
            f = compile_exprs(exprs, allargs)
            jl = sp.lambdify(allargs, J.tolist(), modules=_MODULES)
            self.blocks.append(_Block(list(vrefs), syms, args, f, jl, linear))
        self.drift = []
        for inst in sig.f_bar:
            ex = engine.sym_residual(inst)
            if all(fe.unsym(s)[1] < self.d.get(fe.unsym(s)[0], 0) for s in ex.free_symbols if s not in (fe.STEP, fe.TIME)):
                args = sorted(ex.free_symbols - {fe.STEP, fe.TIME}, key=str)
                self.drift.append((inst, args, compile_exprs([ex], list(args) + [fe.STEP, fe.TIME])))

    def window(self, state: State, h: float) -> dict[sp.Symbol, float]:
        env: dict[sp.Symbol, float] = {}
        for x, dx in self.d.items():
            coords = state.get(x, [0.0])
            for k in range(dx):
                env[fe.sym(x, k)] = sum(
                    math.comb(k, j) * h**j * (coords[j] if j < len(coords) else 0.0) for j in range(k + 1)
                )
        return env

    def step(self, state: State, t: float, h: float, guess: Mapping[str, float] | None = None) -> tuple[dict[str, float], State]:
        """Solve one instant at time t with step h; return algebraic values at t and the state at t + h."""
        env = self.window(state, h)
        for blk in self.blocks:
            other = [env[a] for a in blk.args]
            g = np.array([
                env.get(s, (guess or {}).get(b, state.get(b, [0.0])[0] if k == 0 else 0.0))
                for s, (b, k) in zip(blk.syms, blk.unknowns)
            ], dtype=float)
            for i, (b, k) in enumerate(blk.unknowns):
                if k >= 1:
                    g[i] = env.get(fe.sym(b, k - 1), g[i])

            def fun(u, other=other, blk=blk):
                return blk.f(*u, h, t, *other)

            def jac(u, other=other, blk=blk):
                return np.array(blk.jac(*u, h, t, *other), dtype=float)

            if blk.linear:
                f0 = fun(np.zeros(len(g)))
                J = jac(np.zeros(len(g)))
                try:
                    u = np.linalg.solve(J, -f0)
                except np.linalg.LinAlgError:
                    raise SimulationError(f"singular block {blk.unknowns} in mode {self.label} at t={t:g}") from None
            else:
                try:
                    u = newton_solve(fun, g, tol=1e-12, jac=jac, retries=2)
                except NoConvergence as exc:
                    raise SimulationError(f"block {blk.unknowns} failed in mode {self.label} at t={t:g}: {exc}") from None
            for s, v in zip(blk.syms, u):
                env[s] = float(v)
        alg = {x: env[fe.sym(x, 0)] for x, dx in self.d.items() if dx == 0}
        new: State = {}
        for x, dx in self.d.items():
            if dx == 0:
                new[x] = [alg[x]]
                continue
            w = [env[fe.sym(x, k)] for k in range(1, dx + 1)]
            coords = []
            for j in range(dx):
                diff = sum((-1) ** (j - i) * math.comb(j, i) * w[i] for i in range(j + 1))
                coords.append(diff / h**j)
            new[x] = coords
        return alg, new

    def drift_residual(self, state: State, t: float, h: float) -> float:
        env = self.window(state, h)
        worst = 0.0
        for _, args, f in self.drift:
            try:
                worst = max(worst, abs(float(f(*[env[a] for a in args], h, t)[0])))
            except (KeyError, DomainError):
                continue
        return worst


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class EventRecord:
    time: float
    source: str
    target: str
    path: str
    left: dict[str, float]
    right: dict[str, float]
    orders: dict[str, str] = field(default_factory=dict)
    deleted: list[str] = field(default_factory=list)
    iterations: int = 0

    def to_json(self) -> dict:
        return {
            "time": self.time,
            "from": self.source,
            "to": self.target,
            "path": self.path,
            "left": self.left,
            "right": self.right,
            "orders": self.orders,
            "deleted": self.deleted,
            "iterations": self.iterations,
        }


@dataclass
class Trajectory:
    variables: list[str]
    times: list[float] = field(default_factory=list)
    samples: list[list[float]] = field(default_factory=list)
    modes: list[str] = field(default_factory=list)
    events: list[EventRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        i = self.variables.index(name)
        return np.array([s[i] for s in self.samples])

    def at(self, t: float, name: str) -> float:
        """Value of ``name`` at the last sample not after ``t``."""
        i = max(k for k, tk in enumerate(self.times) if tk <= t + 1e-12)
        return self.samples[i][self.variables.index(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *self.variables, "mode"])
        for t, s, m in zip(self.times, self.samples, self.modes):
            w.writerow([repr(t), *[repr(v) for v in s], m])
        return buf.getvalue()

    def events_json(self) -> str:
        return json.dumps({"events": [e.to_json() for e in self.events], "warnings": self.warnings}, indent=2)


@dataclass
class Segment:
    end_time: float
    state: State
    alg: dict[str, float]
    event: tuple[float, State, dict[str, float], Valuation] | None = None


class Simulator:
    """Fixed-step simulation with event localization and restarts."""

    def __init__(
        self, engine: ModeEngine, cfg: SolverConfig = SolverConfig(), localize: float = 1e-6, drift_tol: float = 1e-3
    ):
        self.engine = engine
        self.drift_tol = drift_tol
        self.cfg = cfg
        self.localize = localize
        self.src = fe.desugar_when(engine.source)
        self.schedules: dict[tuple, ModeSchedule] = {}
        self.analysis: dict[tuple, tuple] = {}
        self.plans: dict[tuple, LevelwisePlan] = {}
        params = self.src.param_values
        self.preds: dict[fe.Pred, Callable] = {}
        for g in self.src.guards:
            for p in fe.predicates(g.body):
                if p not in self.preds:
                    ex = fe.derivative_sympy(fe.sub(p.lhs, p.rhs), params, self.src.functions)
                    args = sorted(ex.free_symbols, key=str)
                    self.preds[p] = (args, sp.lambdify(args, ex, modules=_MODULES))
        self.variables = list(self.src.var_names)
        self.max_order = self._max_orders()

    def _max_orders(self) -> int:
        return max((s for v in self.engine.long_valuations()
                    for s in [max(self._sched_d(v).values(), default=0)]), default=0)

    def _sched_d(self, val) -> dict[str, int]:
        sig = self.engine.long_sigma(self.engine.mode_eqs(val))
        return dict(sig.offsets.d) if sig.success else {}

    def schedule(self, val: Mapping[str, bool]) -> ModeSchedule:
        key = tuple(sorted(val.items()))
        if key not in self.schedules:
            self.schedules[key] = ModeSchedule(self.engine, val)
        return self.schedules[key]

    # -- guards ------------------------------------------------------------

    def evaluate_guards(self, prev: Valuation, state: State, alg: Mapping[str, float], t: float) -> Valuation:
        env: dict[str, float] = {fe.TIME.name: t}
        for x, coords in state.items():
            for k, v in enumerate(coords):
                env[fe.dsym(x, k).name] = v
        for x, v in alg.items():
            env[fe.dsym(x, 0).name] = v

        def pred(p: fe.Pred) -> bool:
            args, f = self.preds[p]
            val = float(f(*[env.get(a.name, 0.0) for a in args]))
            return {"<": val < 0, "<=": val <= 0, ">": val > 0, ">=": val >= 0, "==": val == 0, "!=": val != 0}[p.op]

        return {g.name: fe.eval_bool(g.body, dict(prev), pred) for g in self.src.guards}

    # -- restarts ----------------------------------------------------------

    def restart(self, old: Valuation, new: Valuation, left: State, alg_left: Mapping[str, float], t: float):
        eng = self.engine
        final = {g: (False if g in eng.transient else v) for g, v in new.items()}
        known, delta = eng.steady_state(old)
        r = eng.exec_run(known, delta, new)
        if not r.ok:
            raise SimulationError(
                f"t={t:g}: change {mode_label(old)} -> {mode_label(new)} rejected at {r.stage}: {r.reason}"
            )
        key = (tuple(sorted(old.items())), tuple(sorted(new.items())))
        deleted = [f"{'•' * k}{e}" for e, k in r.deleted]
        first_order = self.max_order <= 1 and eng.mode_type(new) is fe.ModeType.LONG
        if not first_order:
            if key not in self.plans:
                self.plans[key] = levelwise_plan(eng, new, final)
            post = levelwise_restart(self.plans[key], left, t)
            state = {x: list(v) for x, v in left.items()}
            state.update(post)
            return final, state, EventRecord(t, mode_label(old), mode_label(final), "level-wise", {}, {}, {}, deleted)
        if key not in self.analysis:
            rep = analyze_instant(eng, r)
            rs = build_restart_system(eng, r, keep_params=False)
            self.analysis[key] = (rep, rs)
        rep, rs = self.analysis[key]
        sol = rep.solution
        cs = change_system(eng, r, left, t, rs=rs)
        orders = {}
        if sol is not None:
            orders = {v: f"[{o_str(sol.lower[v])}, {o_str(sol.upper[v])}]" for v in sol.lower}
        post, path, iters = None, "", 0
        errors = []
        try:
            post, _ = restart_by_elimination(cs, possibly_impulsive(rs, sol), self.cfg, alg_left)
            path = "elimination"
        except (SimulationError, ImpulseError) as exc:
            errors.append(f"elimination: {exc}")
        if post is None and sol is not None:
            try:
                post, res = restart_rescaled(cs, sol, self.cfg, alg_left)
                path, iters = "rescaled", res.iterations
            except (SimulationError, ImpulseError) as exc:
                errors.append(f"rescaled: {exc}")
        if post is None:
            try:
                post, res = restart_delta(cs, self.cfg, alg_left)
                path, iters = "delta-cascade", res.iterations
            except SimulationError as exc:
                errors.append(f"delta-cascade: {exc}")
                raise SimulationError(f"t={t:g}: no restart path succeeded: {'; '.join(errors)}") from None
        state = {x: list(v) for x, v in left.items()}
        for x, v in post.items():
            state[x] = [v] + state.get(x, [0.0])[1:]
        rec = EventRecord(t, mode_label(old), mode_label(final), path, {}, {}, orders, deleted, iters)
        return final, state, rec

    # -- integration -------------------------------------------------------

    def integrate_mode(
        self, val: Valuation, state: State, t: float, dt: float, horizon: float, traj: Trajectory, suppress: bool = False
    ) -> Segment:
        """Step in mode ``val`` until ``horizon`` or the first guard change, which is localized."""
        sched = self.schedule(val)
        alg: dict[str, float] = {}
        prev: tuple[float, State, float] | None = None
        drift_warned = False
        eps_t = max(dt * self.localize, 1e-12 * max(1.0, abs(horizon)))
        start, k = t, 0
        while True:
            done = t >= horizon - eps_t
            rest = horizon - t
            h = dt if done or rest > 1.5 * dt else (0.5 * rest if rest > dt else rest)
            alg, nxt = sched.step(state, t, h, alg)
            if not suppress:
                new = self.evaluate_guards(val, state, alg, t)
                if new != val:
                    if prev is not None:
                        found = self._bisect(sched, val, prev, dt, alg)
                        if found[3] != val:
                            t, state, alg, new = found
                    self._record(traj, t, state, alg, sched.label)
                    return Segment(t, state, alg, (t, state, alg, new))
            suppress = False
            self._record(traj, t, state, alg, sched.label)
            if not drift_warned and sched.drift and sched.drift_residual(state, t, h) > self.drift_tol:
                traj.warnings.append(f"t={t:g}: consistency drift in mode {sched.label}")
                drift_warned = True
            if done:
                return Segment(t, state, alg, None)
            prev = (t, state, h)
            k += 1
            state, t = nxt, (start + k * dt if h == dt else t + h)
            if horizon - t < eps_t:
                t = horizon

    def _bisect(self, sched: ModeSchedule, val: Valuation, prev: tuple[float, State, float], dt: float, alg):
        t0, s0, h = prev

        def probe(eta: float):
            st = sched.step(s0, t0, eta, alg)[1]
            al = sched.step(st, t0 + eta, dt, alg)[0]
            return st, al, self.evaluate_guards(val, st, al, t0 + eta)

        lo, hi = 0.0, h
        while hi - lo > dt * self.localize:
            mid = 0.5 * (lo + hi)
            if probe(mid)[2] != val:
                hi = mid
            else:
                lo = mid
        st, al, nv = probe(hi)
        return t0 + hi, st, al, nv

    def initial(self) -> tuple[Valuation, State]:
        val = {g.name: bool(g.init) for g in self.src.guards}
        val = {g: (False if g in self.engine.transient else v) for g, v in val.items()}
        state: State = {}
        for v in self.src.variables:
            state[v.name] = [float(c) for c in v.init] if v.init else [0.0]
        return val, state

    def run(self, t0: float, tend: float, dt: float, max_events: int = 1000) -> Trajectory:
        """Simulate on [t0, tend] with step ``dt``."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        traj = Trajectory(list(self.variables))
        if tend <= t0:
            return traj
        val, state = self.initial()
        t, suppress = t0, False
        while True:
            seg = self.integrate_mode(val, state, t, dt, tend, traj, suppress)
            if seg.event is None:
                return traj
            te, left, alg, new = seg.event
            final, post, rec = self.restart(val, new, left, alg, te)
            rec.left = {x: alg.get(x, left[x][0]) for x in left}
            d = self.schedule(final).d
            rec.right = {x: post[x][0] for x in post if d.get(x, 0) >= 1}
            traj.events.append(rec)
            if len(traj.events) > max_events:
                raise SimulationError(f"more than {max_events} events; the trajectory may be Zeno")
            val, state, t, suppress = final, post, te, True

    def _record(self, traj: Trajectory, t: float, state: State, alg: Mapping[str, float], label: str):
        row = [state[x][0] if x in state and x not in alg else alg.get(x, state.get(x, [math.nan])[0]) for x in traj.variables]
        traj.times.append(t)
        traj.samples.append(row)
        traj.modes.append(label)

"""Source language, expression IR and syntactic passes.

A model file is a sequence of ``;``-terminated statements::

    model clutch;
    param a1 = -0.01;
    var w1 init 1 state;
    guard g init false = time >= 5 and time < 10;
    equation e1: der(w1) = a1*w1 + b1*t1;
    equation e3: if g then w1 - w2 = 0;
    equation tau: when g then next(der(y)) = -alpha*der(y);

Expressions are parsed with :mod:`ast` after a light rewrite of the
surface syntax (``x'`` becomes ``der(x)`` and ``^`` becomes ``**``).
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Sequence

import sympy as sp

DIFF = "D"
SHIFT = "S"
PRE = "P"

FUNCTIONS = ("sin", "cos", "exp", "log", "tanh", "sinh", "cosh", "atan", "sqrt", "cbrt", "abs")


class FrontendError(Exception):
    """Base class for diagnostics raised while reading a model."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        loc = f"{line}:{col}: " if line else ""
        super().__init__(f"{loc}{message}")


class ParseError(FrontendError):
    """Syntax error, duplicate identifier or undeclared name."""


class FixpointRejection(FrontendError):
    """A guard is defined from current-instant signals that it helps determine."""

    def __init__(self, message: str, cycle: Sequence[str], line: int = 0):
        super().__init__(message, line)
        self.cycle = tuple(cycle)


# ---------------------------------------------------------------------------
# Expressions


@dataclass(frozen=True)
class Expr:
    """Base class of the numeric expression tree."""

    def children(self) -> tuple["Expr", ...]:
        return ()

    def rebuild(self, children: Sequence["Expr"]) -> "Expr":
        return self

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True)
class Num(Expr):
    value: Fraction


@dataclass(frozen=True)
class Sig(Expr):
    """Reference to a variable decorated with a word over DIFF, SHIFT and PRE."""

    base: str
    word: tuple[str, ...] = ()

    @property
    def degree(self) -> int:
        return len(self.word)

    @property
    def shift(self) -> int:
        """Net shift of a DIFF-free word (PRE counts as -1)."""
        return self.word.count(SHIFT) - self.word.count(PRE)


@dataclass(frozen=True)
class Param(Expr):
    name: str


@dataclass(frozen=True)
class Time(Expr):
    pass


@dataclass(frozen=True)
class Step(Expr):
    """The infinitesimal step, written ``∂``."""


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr

    def children(self):
        return (self.arg,)

    def rebuild(self, children):
        return Neg(children[0])


@dataclass(frozen=True)
class Add(Expr):
    args: tuple[Expr, ...]

    def children(self):
        return self.args

    def rebuild(self, children):
        return Add(tuple(children))


@dataclass(frozen=True)
class Mul(Expr):
    args: tuple[Expr, ...]

    def children(self):
        return self.args

    def rebuild(self, children):
        return Mul(tuple(children))


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exp: Fraction

    def children(self):
        return (self.base,)

    def rebuild(self, children):
        return Pow(children[0], self.exp)


@dataclass(frozen=True)
class Call(Expr):
    name: str
    args: tuple[Expr, ...]

    def children(self):
        return self.args

    def rebuild(self, children):
        return Call(self.name, tuple(children))


def sub(a: Expr, b: Expr) -> Expr:
    return Add((a, Neg(b)))


def div(a: Expr, b: Expr) -> Expr:
    return Mul((a, Pow(b, Fraction(-1))))


def walk(e: Expr) -> Iterator[Expr]:
    yield e
    for c in e.children():
        yield from walk(c)


def signals(e: Expr) -> list[Sig]:
    return [n for n in walk(e) if isinstance(n, Sig)]


def transform(e: Expr, fn: Callable[[Expr], Expr | None]) -> Expr:
    """Bottom-up rewrite; ``fn`` returns a replacement or None to keep the node."""
    kids = e.children()
    if kids:
        e = e.rebuild([transform(c, fn) for c in kids])
    out = fn(e)
    return e if out is None else out


def shift_expr(e: Expr, k: int) -> Expr:
    """Shift every signal of ``e`` by ``k`` instants (negative means PRE)."""
    if k == 0:
        return e
    letters = (SHIFT,) * k if k > 0 else (PRE,) * (-k)

    def fn(n: Expr):
        if isinstance(n, Sig):
            return Sig(n.base, n.word + letters)
        return None

    return transform(e, fn)


# ---------------------------------------------------------------------------
# Boolean expressions


@dataclass(frozen=True)
class BoolExpr:
    def __str__(self) -> str:
        return bool_source(self)


@dataclass(frozen=True)
class BConst(BoolExpr):
    value: bool


@dataclass(frozen=True)
class GuardRef(BoolExpr):
    name: str


@dataclass(frozen=True)
class BNot(BoolExpr):
    arg: BoolExpr


@dataclass(frozen=True)
class BAnd(BoolExpr):
    args: tuple[BoolExpr, ...]


@dataclass(frozen=True)
class BOr(BoolExpr):
    args: tuple[BoolExpr, ...]


@dataclass(frozen=True)
class Pred(BoolExpr):
    """Comparison ``lhs op rhs`` with op one of <, <=, >, >=, ==."""

    op: str
    lhs: Expr
    rhs: Expr


TRUE = BConst(True)


def bool_walk(b: BoolExpr) -> Iterator[BoolExpr]:
    yield b
    if isinstance(b, BNot):
        yield from bool_walk(b.arg)
    elif isinstance(b, (BAnd, BOr)):
        for a in b.args:
            yield from bool_walk(a)


def guard_refs(b: BoolExpr) -> set[str]:
    return {n.name for n in bool_walk(b) if isinstance(n, GuardRef)}


def predicates(b: BoolExpr) -> list[Pred]:
    out: list[Pred] = []
    for n in bool_walk(b):
        if isinstance(n, Pred) and n not in out:
            out.append(n)
    return out


def eval_bool(b: BoolExpr, guards: dict[str, bool], preds: Callable[[Pred], bool]) -> bool:
    if isinstance(b, BConst):
        return b.value
    if isinstance(b, GuardRef):
        return guards[b.name]
    if isinstance(b, BNot):
        return not eval_bool(b.arg, guards, preds)
    if isinstance(b, BAnd):
        return all(eval_bool(a, guards, preds) for a in b.args)
    if isinstance(b, BOr):
        return any(eval_bool(a, guards, preds) for a in b.args)
    if isinstance(b, Pred):
        return preds(b)
    raise TypeError(b)


# ---------------------------------------------------------------------------
# Model


class EqKind(str, Enum):
    IF = "if"
    WHEN = "when"


class ModeType(str, Enum):
    LONG = "long"
    TRANSIENT = "transient"


@dataclass(frozen=True)
class VarDecl:
    name: str
    init: tuple[float, ...] = ()
    kind: str | None = None  # "state", "algebraic" or None
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class GuardDef:
    """Guard definition. ``delayed`` guards define the next value; others are instantaneous."""

    name: str
    init: bool
    body: BoolExpr
    mode_type: ModeType = ModeType.LONG
    delayed: bool = True
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class GuardedEquation:
    id: str
    guard: BoolExpr
    kind: EqKind
    lhs: Expr
    rhs: Expr
    line: int = field(default=0, compare=False)

    @property
    def residual(self) -> Expr:
        if self.rhs == Num(Fraction(0)):
            return self.lhs
        if self.lhs == Num(Fraction(0)):
            return Neg(self.rhs)
        return sub(self.lhs, self.rhs)


@dataclass(frozen=True)
class FunctionDef:
    name: str
    params: tuple[str, ...]
    body: Expr


@dataclass(frozen=True)
class Model:
    name: str
    params: tuple[tuple[str, float], ...]
    variables: tuple[VarDecl, ...]
    guards: tuple[GuardDef, ...]
    equations: tuple[GuardedEquation, ...]
    functions: tuple[FunctionDef, ...] = ()
    cascade_bound: int = 0
    stretch: int = 0  # expansion parameter once expanded, else 0
    expanded: bool = False

    @property
    def param_values(self) -> dict[str, float]:
        return dict(self.params)

    @property
    def var_names(self) -> list[str]:
        return [v.name for v in self.variables]

    def var(self, name: str) -> VarDecl:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def guard(self, name: str) -> GuardDef:
        for g in self.guards:
            if g.name == name:
                return g
        raise KeyError(name)

    def equation(self, eid: str) -> GuardedEquation:
        for e in self.equations:
            if e.id == eid:
                return e
        raise KeyError(eid)

    @property
    def guard_names(self) -> list[str]:
        return [g.name for g in self.guards]

    @property
    def transient_guards(self) -> list[str]:
        return [g.name for g in self.guards if g.mode_type is ModeType.TRANSIENT]


# ---------------------------------------------------------------------------
# Parser

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_COMPARE_OPS = {ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">=", ast.Eq: "==", ast.NotEq: "!="}


def _strip_comments(src: str) -> str:
    return "\n".join(line.split("//", 1)[0] for line in src.splitlines())


def _statements(src: str) -> list[tuple[str, int]]:
    """Split into ``;``-terminated statements with their starting line."""
    out: list[tuple[str, int]] = []
    buf: list[str] = []
    start = 1
    line = 1
    for ch in src:
        if not buf and ch.isspace():
            if ch == "\n":
                line += 1
            continue
        if not buf:
            start = line
        if ch == ";":
            out.append(("".join(buf).strip(), start))
            buf = []
        else:
            buf.append(ch)
        if ch == "\n":
            line += 1
    rest = "".join(buf).strip()
    if rest:
        raise ParseError("missing ';' at end of statement", start, 1)
    return out


def _surface_to_python(text: str) -> str:
    text = re.sub(rf"({_IDENT})('+)", lambda m: "der(" * len(m.group(2)) + m.group(1) + ")" * len(m.group(2)), text)
    text = text.replace("^", "**")
    text = re.sub(r"\btrue\b", "True", text)
    text = re.sub(r"\bfalse\b", "False", text)
    return text


def _to_fraction(v: float | int) -> Fraction:
    if isinstance(v, bool):
        raise TypeError(v)
    return Fraction(v) if isinstance(v, int) else Fraction(repr(float(v)))


class _Scope:
    def __init__(self):
        self.params: dict[str, float] = {}
        self.vars: dict[str, VarDecl] = {}
        self.guards: dict[str, GuardDef | None] = {}
        self.functions: dict[str, FunctionDef] = {}
        self.locals: set[str] = set()

    def taken(self, name: str) -> bool:
        return (
            name in self.params or name in self.vars or name in self.guards
            or name in self.functions or name in ("time", "der", "next", "pre") or name in FUNCTIONS
        )


class _ExprBuilder:
    def __init__(self, scope: _Scope, line: int):
        self.scope = scope
        self.line = line

    def fail(self, msg: str, node: ast.AST | None = None) -> ParseError:
        col = getattr(node, "col_offset", 0) + 1 if node is not None else 1
        return ParseError(msg, self.line, col)

    def parse(self, text: str, boolean: bool = False):
        py = _surface_to_python(text.strip())
        if boolean:
            py = re.sub(r"(?<![<>=!])=(?!=)", "==", py)
        try:
            tree = ast.parse(py, mode="eval")
        except SyntaxError as exc:
            raise ParseError(f"syntax error in '{text.strip()}'", self.line, exc.offset or 1) from None
        return self.boolean(tree.body) if boolean else self.expr(tree.body)

    def boolean(self, n: ast.AST) -> BoolExpr:
        if isinstance(n, ast.BoolOp):
            args = tuple(self.boolean(v) for v in n.values)
            return BAnd(args) if isinstance(n.op, ast.And) else BOr(args)
        if isinstance(n, ast.UnaryOp) and isinstance(n.op, ast.Not):
            return BNot(self.boolean(n.operand))
        if isinstance(n, ast.Constant) and isinstance(n.value, bool):
            return BConst(n.value)
        if isinstance(n, ast.Name) and n.id in self.scope.guards:
            return GuardRef(n.id)
        if isinstance(n, ast.Compare):
            parts: list[BoolExpr] = []
            left = self.expr(n.left)
            for op, comp in zip(n.ops, n.comparators):
                if type(op) not in _COMPARE_OPS or isinstance(op, ast.NotEq):
                    raise self.fail("unsupported comparison", n)
                right = self.expr(comp)
                parts.append(Pred(_COMPARE_OPS[type(op)], left, right))
                left = right
            return parts[0] if len(parts) == 1 else BAnd(tuple(parts))
        if isinstance(n, ast.Name):
            raise self.fail(f"undeclared guard '{n.id}'", n)
        raise self.fail("expected a boolean expression", n)

    def expr(self, n: ast.AST) -> Expr:
        if isinstance(n, ast.Constant) and isinstance(n.value, (int, float)) and not isinstance(n.value, bool):
            return Num(_to_fraction(n.value))
        if isinstance(n, ast.Name):
            name = n.id
            if name in self.scope.locals:
                return Param(name)
            if name in self.scope.vars:
                return Sig(name)
            if name in self.scope.params:
                return Param(name)
            if name == "time":
                return Time()
            raise self.fail(f"undeclared identifier '{name}'", n)
        if isinstance(n, ast.UnaryOp):
            if isinstance(n.op, ast.USub):
                inner = self.expr(n.operand)
                if isinstance(inner, Num):
                    return Num(-inner.value)
                return Neg(inner)
            if isinstance(n.op, ast.UAdd):
                return self.expr(n.operand)
        if isinstance(n, ast.BinOp):
            a, b = self.expr(n.left), self.expr(n.right)
            if isinstance(n.op, ast.Add):
                return Add((a, b))
            if isinstance(n.op, ast.Sub):
                return sub(a, b)
            if isinstance(n.op, ast.Mult):
                return Mul((a, b))
            if isinstance(n.op, ast.Div):
                return div(a, b)
            if isinstance(n.op, ast.Pow):
                exp = self.constant(n.right)
                return Pow(a, exp)
        if isinstance(n, ast.Call) and isinstance(n.func, ast.Name):
            fname = n.func.id
            args = [self.expr(a) for a in n.args]
            if fname in ("der", "next", "pre"):
                if len(args) != 1:
                    raise self.fail(f"{fname}() takes one argument", n)
                return self.word_op(fname, args[0], n)
            if fname in FUNCTIONS or fname in self.scope.functions:
                arity = len(self.scope.functions[fname].params) if fname in self.scope.functions else 1
                if len(args) != arity:
                    raise self.fail(f"{fname}() takes {arity} argument(s)", n)
                return Call(fname, tuple(args))
            raise self.fail(f"unknown function '{fname}'", n)
        raise self.fail("unsupported expression", n)

    def word_op(self, fname: str, arg: Expr, node: ast.AST) -> Expr:
        letter = {"der": DIFF, "next": SHIFT, "pre": PRE}[fname]
        if isinstance(arg, Sig):
            return Sig(arg.base, arg.word + (letter,))
        if letter == DIFF:
            raise self.fail("der() applies to a variable", node)
        if not signals(arg):
            return arg

        def fn(x: Expr):
            if isinstance(x, Sig):
                return Sig(x.base, x.word + (letter,))
            return None

        return transform(arg, fn)

    def constant(self, n: ast.AST) -> Fraction:
        e = self.expr(n)
        try:
            val = sp.nsimplify(to_sympy(e, params=self.scope.params))
        except Exception:
            raise self.fail("exponent must be a constant", n) from None
        if not val.is_Rational:
            raise self.fail("exponent must be a rational constant", n)
        return Fraction(int(val.p), int(val.q))


_EQ_SPLIT = re.compile(r"(?<![<>=!])=(?!=)")


def _split_equation(text: str, line: int) -> tuple[str, str]:
    parts = _EQ_SPLIT.split(text)
    if len(parts) != 2:
        raise ParseError("equation must contain exactly one '='", line, 1)
    return parts[0], parts[1]


def parse_model(source: str, name: str = "model") -> Model:
    """Parse model source text into the IR."""
    stmts = _statements(_strip_comments(source))
    scope = _Scope()
    pending_guards: list[tuple[str, int]] = []
    pending_eqs: list[tuple[str, int]] = []
    pending_funcs: list[tuple[str, int]] = []
    var_order: list[VarDecl] = []
    cascade = 0
    model_name = name

    def declare(ident: str, line: int):
        if not re.fullmatch(_IDENT, ident):
            raise ParseError(f"invalid identifier '{ident}'", line, 1)
        if scope.taken(ident):
            raise ParseError(f"duplicate identifier '{ident}'", line, 1)

    # first pass: declarations that others refer to
    for text, line in stmts:
        head, _, rest = text.partition(" ")
        rest = rest.strip()
        if head == "model":
            model_name = rest
        elif head == "cascade":
            try:
                cascade = int(rest)
            except ValueError:
                raise ParseError("cascade bound must be an integer", line, 1) from None
            if cascade < 0:
                raise ParseError("cascade bound must be nonnegative", line, 1)
        elif head == "param":
            m = re.fullmatch(rf"({_IDENT})\s*=\s*(.+)", rest, re.S)
            if not m:
                raise ParseError("expected 'param name = value'", line, 1)
            declare(m.group(1), line)
            value = _ExprBuilder(scope, line).parse(m.group(2))
            try:
                scope.params[m.group(1)] = float(to_sympy(value, params=scope.params))
            except (TypeError, ValueError):
                raise ParseError("parameter value must be constant", line, 1) from None
        elif head == "var":
            m = re.fullmatch(
                rf"({_IDENT}(?:\s*,\s*{_IDENT})*)\s*(?:init\s+(\([^)]*\)|[^\s]+))?\s*(state|algebraic)?", rest, re.S
            )
            if not m:
                raise ParseError("expected 'var name [init v] [state|algebraic]'", line, 1)
            init: tuple[float, ...] = ()
            if m.group(2):
                raw = m.group(2).strip("()")
                try:
                    init = tuple(
                        float(to_sympy(_ExprBuilder(scope, line).parse(v), params=scope.params))
                        for v in raw.split(",")
                    )
                except (TypeError, ValueError):
                    raise ParseError("initial values must be constants", line, 1) from None
            for ident in re.split(r"\s*,\s*", m.group(1)):
                declare(ident, line)
                decl = VarDecl(ident, init, m.group(3), line)
                scope.vars[ident] = decl
                var_order.append(decl)
        elif head == "guard":
            m = re.match(rf"({_IDENT})\b", rest)
            if not m:
                raise ParseError("expected guard name", line, 1)
            declare(m.group(1), line)
            scope.guards[m.group(1)] = None
            pending_guards.append((rest, line))
        elif head == "function":
            m = re.match(rf"({_IDENT})\s*\(", rest)
            if not m:
                raise ParseError("expected 'function name(args) = expr'", line, 1)
            declare(m.group(1), line)
            pending_funcs.append((rest, line))
            scope.functions[m.group(1)] = FunctionDef(m.group(1), (), Num(Fraction(0)))
        elif head == "equation":
            pending_eqs.append((rest, line))
        else:
            raise ParseError(f"unknown statement '{head}'", line, 1)

    functions: list[FunctionDef] = []
    for text, line in pending_funcs:
        m = re.fullmatch(rf"({_IDENT})\s*\(([^)]*)\)\s*=\s*(.+)", text, re.S)
        if not m:
            raise ParseError("expected 'function name(args) = expr'", line, 1)
        params = tuple(p.strip() for p in m.group(2).split(",") if p.strip())
        scope.locals = set(params)
        body = _ExprBuilder(scope, line).parse(m.group(3))
        scope.locals = set()
        fdef = FunctionDef(m.group(1), params, body)
        scope.functions[fdef.name] = fdef
        functions.append(fdef)

    guards: list[GuardDef] = []
    for text, line in pending_guards:
        m = re.fullmatch(
            rf"({_IDENT})\s*(?:init\s+(true|false))?\s*(transient)?\s*=\s*(.+)", text, re.S
        )
        if not m:
            raise ParseError("expected 'guard g [init true|false] [transient] = body'", line, 1)
        body = _ExprBuilder(scope, line).parse(m.group(4), boolean=True)
        delayed = m.group(2) is not None
        gd = GuardDef(
            m.group(1),
            m.group(2) == "true",
            body,
            ModeType.TRANSIENT if m.group(3) else ModeType.LONG,
            delayed,
            line,
        )
        scope.guards[gd.name] = gd
        guards.append(gd)

    equations: list[GuardedEquation] = []
    seen_ids: set[str] = set()
    for idx, (text, line) in enumerate(pending_eqs, start=1):
        label = None
        m = re.match(rf"({_IDENT})\s*:(?!=)\s*", text)
        if m and m.group(1) not in ("if", "when"):
            label = m.group(1)
            text = text[m.end():]
        kind = EqKind.IF
        guard: BoolExpr = TRUE
        m = re.match(r"(if|when)\s+(.*?)\s+then\s+(.*)$", text, re.S)
        if not m:
            m = re.match(rf"(if|when)\s+((?:not\s+)?{_IDENT})\s+(.*)$", text, re.S)
        if m:
            kind = EqKind(m.group(1))
            guard = _ExprBuilder(scope, line).parse(m.group(2), boolean=True)
            if any(isinstance(n, Pred) for n in bool_walk(guard)):
                raise ParseError("equation guards may only combine guard names", line, 1)
            text = m.group(3)
        eid = label or f"eq{idx}"
        if eid in seen_ids or eid in scope.vars or eid in scope.params:
            raise ParseError(f"duplicate identifier '{eid}'", line, 1)
        seen_ids.add(eid)
        lhs_t, rhs_t = _split_equation(text, line)
        b = _ExprBuilder(scope, line)
        lhs, rhs = b.parse(lhs_t), b.parse(rhs_t)
        if kind is EqKind.WHEN and not isinstance(guard, GuardRef):
            raise ParseError("'when' expects a single guard name", line, 1)
        equations.append(GuardedEquation(eid, guard, kind, lhs, rhs, line))

    return Model(
        name=model_name,
        params=tuple(scope.params.items()),
        variables=tuple(var_order),
        guards=tuple(guards),
        equations=tuple(equations),
        functions=tuple(functions),
        cascade_bound=cascade,
    )


def load_model(path) -> Model:
    from pathlib import Path

    p = Path(path)
    return parse_model(p.read_text(encoding="utf-8"), name=p.stem)


# ---------------------------------------------------------------------------
# Printer

_PREC = {"add": 1, "mul": 2, "neg": 3, "pow": 4, "atom": 5}


def _fmt_num(v: Fraction) -> str:
    if v.denominator == 1:
        return str(v.numerator)
    f = float(v)
    if Fraction(repr(f)) == v:
        return repr(f)
    return f"{v.numerator}/{v.denominator}"


def _prec(e: Expr) -> int:
    if isinstance(e, Add):
        return _PREC["add"]
    if isinstance(e, Mul):
        return _PREC["mul"]
    if isinstance(e, Neg):
        return _PREC["neg"]
    if isinstance(e, Pow):
        return _PREC["pow"]
    if isinstance(e, Num) and (e.value < 0 or e.value.denominator != 1 and "/" in _fmt_num(e.value)):
        return _PREC["neg"]
    return _PREC["atom"]


def _wrap(e: Expr, level: int, pretty: bool) -> str:
    s = to_source(e, pretty)
    return f"({s})" if _prec(e) < level else s


def sig_source(s: Sig, pretty: bool = False) -> str:
    out = s.base
    for letter in s.word:
        if pretty:
            out = {DIFF: f"{out}'", SHIFT: f"•{out}", PRE: f"pre({out})"}[letter]
        else:
            out = {DIFF: "der", SHIFT: "next", PRE: "pre"}[letter] + f"({out})"
    return out


def to_source(e: Expr, pretty: bool = False) -> str:
    """Print an expression; ``pretty`` uses ``•x`` and ``∂`` for reports."""
    if isinstance(e, Num):
        return _fmt_num(e.value)
    if isinstance(e, Sig):
        return sig_source(e, pretty)
    if isinstance(e, Param):
        return e.name
    if isinstance(e, Time):
        return "time"
    if isinstance(e, Step):
        return "∂" if pretty else "step"
    if isinstance(e, Neg):
        return "-" + _wrap(e.arg, _PREC["neg"] + 1, pretty)
    if isinstance(e, Add):
        parts = [to_source(e.args[0], pretty)]
        for a in e.args[1:]:
            if isinstance(a, Neg):
                parts.append(" - " + _wrap(a.arg, _PREC["add"] + 1, pretty))
            else:
                parts.append(" + " + _wrap(a, _PREC["add"] + 1 if isinstance(a, Add) else _PREC["add"], pretty))
        return "".join(parts)
    if isinstance(e, Mul):
        parts = [_wrap(e.args[0], _PREC["mul"], pretty)]
        for a in e.args[1:]:
            if isinstance(a, Pow) and a.exp == -1:
                parts.append("/" + _wrap(a.base, _PREC["mul"] + 1, pretty))
            else:
                parts.append("*" + _wrap(a, _PREC["mul"] + 1 if isinstance(a, Mul) else _PREC["mul"], pretty))
        return "".join(parts)
    if isinstance(e, Pow):
        if e.exp == -1:
            return "1/" + _wrap(e.base, _PREC["mul"] + 1, pretty)
        ex = _fmt_num(e.exp)
        ex = ex if e.exp.denominator == 1 and e.exp >= 0 else f"({ex})"
        return _wrap(e.base, _PREC["pow"] + 1, pretty) + "^" + ex
    if isinstance(e, Call):
        return f"{e.name}(" + ", ".join(to_source(a, pretty) for a in e.args) + ")"
    raise TypeError(e)


def bool_source(b: BoolExpr, pretty: bool = False) -> str:
    if isinstance(b, BConst):
        return "true" if b.value else "false"
    if isinstance(b, GuardRef):
        return b.name
    if isinstance(b, BNot):
        inner = bool_source(b.arg, pretty)
        return f"not {inner}" if isinstance(b.arg, (GuardRef, BConst)) else f"not ({inner})"
    if isinstance(b, (BAnd, BOr)):
        op = " and " if isinstance(b, BAnd) else " or "
        parts = []
        for a in b.args:
            s = bool_source(a, pretty)
            parts.append(f"({s})" if isinstance(a, (BAnd, BOr)) else s)
        return op.join(parts)
    if isinstance(b, Pred):
        return f"{to_source(b.lhs, pretty)} {b.op} {to_source(b.rhs, pretty)}"
    raise TypeError(b)


def print_model(m: Model) -> str:
    """Render a model back to source text (inverse of :func:`parse_model`)."""
    lines = [f"model {m.name};"]
    if m.cascade_bound:
        lines.append(f"cascade {m.cascade_bound};")
    for k, v in m.params:
        lines.append(f"param {k} = {v!r};")
    for f in m.functions:
        lines.append(f"function {f.name}({', '.join(f.params)}) = {to_source(f.body)};")
    for v in m.variables:
        s = f"var {v.name}"
        if v.init:
            s += " init " + (repr(v.init[0]) if len(v.init) == 1 else "(" + ", ".join(map(repr, v.init)) + ")")
        if v.kind:
            s += f" {v.kind}"
        lines.append(s + ";")
    for g in m.guards:
        s = f"guard {g.name}"
        if g.delayed:
            s += " init " + ("true" if g.init else "false")
        if g.mode_type is ModeType.TRANSIENT:
            s += " transient"
        lines.append(s + f" = {bool_source(g.body)};")
    for e in m.equations:
        s = f"equation {e.id}: "
        if e.guard != TRUE or e.kind is EqKind.WHEN:
            s += f"{e.kind.value} {bool_source(e.guard)} then "
        lines.append(s + f"{to_source(e.lhs)} = {to_source(e.rhs)};")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Passes


def desugar_when(m: Model) -> Model:
    """Turn every ``when g`` equation into ``if up_g`` with a fresh transient guard."""
    whens = [e for e in m.equations if e.kind is EqKind.WHEN]
    if not whens:
        return m
    guards = list(m.guards)
    names = {g.name for g in guards}
    up_of: dict[str, str] = {}
    for e in whens:
        assert isinstance(e.guard, GuardRef)
        g = e.guard.name
        if g in up_of:
            continue
        up = f"up_{g}"
        while up in names:
            up += "_"
        src = m.guard(g)
        body = BAnd((BNot(GuardRef(g)), src.body)) if src.delayed else src.body
        guards.append(GuardDef(up, False, body, ModeType.TRANSIENT, src.delayed, src.line))
        names.add(up)
        up_of[g] = up
    eqs = tuple(
        replace(e, guard=GuardRef(up_of[e.guard.name]), kind=EqKind.IF) if e.kind is EqKind.WHEN else e
        for e in m.equations
    )
    return replace(m, guards=tuple(guards), equations=eqs)


def expand_signal(s: Sig, stretch: int = 0) -> Expr:
    """Rewrite DIFF letters of ``s`` with the forward difference quotient.

    With ``stretch`` N the derivative becomes ``(•^(N+1) x - •^N x)/∂``.
    """
    e: Expr = Sig(s.base)
    for letter in s.word:
        if letter == DIFF:
            e = div(sub(shift_expr(e, stretch + 1), shift_expr(e, stretch)), Step())
        elif letter == SHIFT:
            e = shift_expr(e, 1)
        else:
            e = shift_expr(e, -1)
    return normalize_shifts(e)


def normalize_shifts(e: Expr) -> Expr:
    """Cancel SHIFT/PRE pairs in DIFF-free words."""

    def fn(n: Expr):
        if isinstance(n, Sig) and DIFF not in n.word:
            k = n.shift
            word = (SHIFT,) * k if k >= 0 else (PRE,) * (-k)
            if word != n.word:
                return Sig(n.base, word)
        return None

    return transform(e, fn)


def _expand(e: Expr, stretch: int) -> Expr:
    def fn(n: Expr):
        if isinstance(n, Sig):
            return expand_signal(n, stretch)
        return None

    return transform(e, fn)


def expand_nonstandard(m: Model, stretch: int = 0) -> Model:
    """Replace every derivative by its nonstandard difference quotient."""
    if m.expanded:
        return m
    eqs = tuple(replace(e, lhs=_expand(e.lhs, stretch), rhs=_expand(e.rhs, stretch)) for e in m.equations)

    def exp_bool(b: BoolExpr) -> BoolExpr:
        if isinstance(b, Pred):
            return Pred(b.op, _expand(b.lhs, stretch), _expand(b.rhs, stretch))
        if isinstance(b, BNot):
            return BNot(exp_bool(b.arg))
        if isinstance(b, BAnd):
            return BAnd(tuple(exp_bool(a) for a in b.args))
        if isinstance(b, BOr):
            return BOr(tuple(exp_bool(a) for a in b.args))
        return b

    guards = tuple(replace(g, body=exp_bool(g.body)) for g in m.guards)
    return replace(m, equations=eqs, guards=guards, stretch=stretch, expanded=True)


def incidence(e: Expr) -> dict[str, int]:
    """Maximal nonnegative shift degree per variable of a DIFF-free expression."""
    out: dict[str, int] = {}
    for s in signals(e):
        if DIFF in s.word:
            raise ValueError(f"incidence expects an expanded expression, got {sig_source(s)}")
        k = s.shift
        if k < 0:
            continue
        out[s.base] = max(out.get(s.base, 0), k)
    return out


def diff_degrees(m: Model) -> dict[str, int]:
    """Highest derivative count of each variable in the source equations."""
    out = {v: 0 for v in m.var_names}
    for e in m.equations:
        for s in signals(e.lhs) + signals(e.rhs):
            out[s.base] = max(out[s.base], s.word.count(DIFF))
    return out


def check_guard_causality(m: Model) -> list[FixpointRejection]:
    """Reject guards defined instantaneously from signals they help determine.

    A delayed guard (``•g = b``) is always evaluable at the start of an
    instant. An instantaneous guard ``g = b`` is rejected when some
    unknown signal of ``b`` is tied, through an equation guarded by ``g``,
    to other unknowns: deciding the mode then requires solving the very
    system the mode selects.
    """
    out: list[FixpointRejection] = []
    degrees = diff_degrees(m)
    for g in m.guards:
        if g.delayed:
            continue
        body_vars: list[str] = []
        for p in predicates(g.body):
            for s in signals(p.lhs) + signals(p.rhs):
                if s.word.count(DIFF) >= degrees[s.base] and s.base not in body_vars:
                    body_vars.append(s.base)
        cycle: list[str] = []
        for e in m.equations:
            if g.name not in guard_refs(e.guard):
                continue
            unknown = []
            for s in signals(e.lhs) + signals(e.rhs):
                if s.word.count(DIFF) >= degrees[s.base] and s.base not in unknown:
                    unknown.append(s.base)
            if any(v in body_vars for v in unknown) and len(unknown) > 1:
                for v in body_vars + unknown:
                    if v not in cycle:
                        cycle.append(v)
        if cycle:
            members = [g.name] + cycle
            out.append(
                FixpointRejection(
                    f"guard '{g.name}' is defined from current values it helps determine "
                    f"(cycle {{{', '.join(members)}}}); define its next value instead",
                    members,
                    g.line,
                )
            )
    return out


# ---------------------------------------------------------------------------
# Symbolic bridge

STEP = sp.Symbol("step_", positive=True)
TIME = sp.Symbol("time_", real=True)


def sym(base: str, shift: int = 0) -> sp.Symbol:
    """Sympy symbol of the variable ``base`` shifted ``shift`` times."""
    tag = f"{shift}" if shift >= 0 else f"m{-shift}"
    return sp.Symbol(f"{base}__{tag}", real=True)


def unsym(s: sp.Symbol) -> tuple[str, int]:
    base, _, tag = s.name.rpartition("__")
    return base, (-int(tag[1:]) if tag.startswith("m") else int(tag))


_SP_FUNCS = {
    "sin": sp.sin, "cos": sp.cos, "exp": sp.exp, "log": sp.log, "tanh": sp.tanh,
    "sinh": sp.sinh, "cosh": sp.cosh, "atan": sp.atan, "sqrt": sp.sqrt, "abs": sp.Abs,
    "cbrt": lambda x: sp.sign(x) * sp.Abs(x) ** sp.Rational(1, 3),
}


def to_sympy(
    e: Expr,
    params: dict[str, float] | None = None,
    functions: Iterable[FunctionDef] = (),
    shift: int = 0,
    keep_params: bool = False,
) -> sp.Expr:
    """Convert an expanded expression to sympy, shifting all signals by ``shift``."""
    fdefs = {f.name: f for f in functions}
    params = params or {}

    def conv(n: Expr, local: dict[str, sp.Expr]) -> sp.Expr:
        if isinstance(n, Num):
            return sp.Rational(n.value.numerator, n.value.denominator)
        if isinstance(n, Sig):
            if DIFF in n.word:
                raise ValueError(f"unexpanded derivative {sig_source(n)}")
            return sym(n.base, n.shift + shift)
        if isinstance(n, Param):
            if n.name in local:
                return local[n.name]
            if keep_params:
                return sp.Symbol(n.name, real=True)
            return sp.Float(params[n.name]) if not float(params[n.name]).is_integer() else sp.Integer(int(params[n.name]))
        if isinstance(n, Time):
            return TIME
        if isinstance(n, Step):
            return STEP
        if isinstance(n, Neg):
            return -conv(n.arg, local)
        if isinstance(n, Add):
            return sp.Add(*[conv(a, local) for a in n.args])
        if isinstance(n, Mul):
            return sp.Mul(*[conv(a, local) for a in n.args])
        if isinstance(n, Pow):
            return conv(n.base, local) ** sp.Rational(n.exp.numerator, n.exp.denominator)
        if isinstance(n, Call):
            args = [conv(a, local) for a in n.args]
            if n.name in fdefs:
                f = fdefs[n.name]
                return conv(f.body, dict(zip(f.params, args)))
            return _SP_FUNCS[n.name](*args)
        raise TypeError(n)

    return conv(e, {})


def derivative_sympy(e: Expr, params: dict[str, float], functions: Iterable[FunctionDef] = ()) -> sp.Expr:
    """Convert a source (unexpanded) expression with derivative symbols ``x__dK``."""
    fdefs = {f.name: f for f in functions}

    def conv(n: Expr, local: dict[str, sp.Expr]) -> sp.Expr:
        if isinstance(n, Sig):
            if SHIFT in n.word or PRE in n.word:
                raise ValueError(f"shifted signal {sig_source(n)} in derivative form")
            return dsym(n.base, n.word.count(DIFF))
        if isinstance(n, Num):
            return sp.Rational(n.value.numerator, n.value.denominator)
        if isinstance(n, Param):
            return local[n.name] if n.name in local else sp.Float(params[n.name])
        if isinstance(n, Time):
            return TIME
        if isinstance(n, Neg):
            return -conv(n.arg, local)
        if isinstance(n, Add):
            return sp.Add(*[conv(a, local) for a in n.args])
        if isinstance(n, Mul):
            return sp.Mul(*[conv(a, local) for a in n.args])
        if isinstance(n, Pow):
            return conv(n.base, local) ** sp.Rational(n.exp.numerator, n.exp.denominator)
        if isinstance(n, Call):
            args = [conv(a, local) for a in n.args]
            if n.name in fdefs:
                f = fdefs[n.name]
                return conv(f.body, dict(zip(f.params, args)))
            return _SP_FUNCS[n.name](*args)
        raise TypeError(n)

    return conv(e, {})


def dsym(base: str, k: int) -> sp.Symbol:
    """Sympy symbol for the k-th derivative of ``base``."""
    return sp.Symbol(f"{base}__d{k}", real=True)

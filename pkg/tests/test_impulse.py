from fractions import Fraction

import pytest
import sympy as sp
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mdaec import frontend as fe
from mdaec.impulse import (
    NEG_INF,
    POS_INF,
    Classification,
    ImpulseError,
    InfiniteOrder,
    LinForm,
    OrderConstraintSystem,
    RestartSystem,
    analyze_instant,
    build_order_constraints,
    build_restart_system,
    o_add,
    rescale,
    saturate,
    solve_orders,
)

F, T = {"g": False}, {"g": True}


def report(engine, old, new):
    return analyze_instant(engine, engine.exec_run(*engine.steady_state(old), new))


def test_order_arithmetic_conventions():
    assert o_add(NEG_INF, POS_INF) == NEG_INF
    assert o_add(Fraction(1), Fraction(1, 3)) == Fraction(4, 3)


def test_clutch_engage_orders(engines):
    rep = report(engines["clutch"], F, T)
    sol = rep.solution
    for tau in ("tau1", "tau2"):
        assert sol.order(tau) == 1 and sol.classify(tau) is Classification.IMPULSIVE
    for u in ("•w1-w1", "•w2-w2"):
        assert sol.upper[u] <= 0
    assert rep.deleted == ("e3",)


def test_clutch_release_orders(engines):
    sol = report(engines["clutch"], T, F).solution
    assert sol.order("tau1") == NEG_INF and sol.order("tau2") == NEG_INF
    assert sol.order("•w1-w1") == -1 and sol.order("•w2-w2") == -1
    assert sol.impulsive() == []


def test_nonsemilinear_orders(engines):
    sol = report(engines["clutch_nonsemilinear"], F, T).solution
    assert sol.order("tau1") == Fraction(1, 3) and sol.order("tau2") == Fraction(1, 3)
    assert sol.order("•w1-w1") == 0


@pytest.mark.parametrize("name", ["clutch", "clutch_nonsemilinear"])
def test_rescaled_system_is_non_impulsive(engines, name):
    rep = report(engines[name], F, T)
    rs = rescale(rep.system, rep.solution)
    assert set(rs.scaled) and all(n.startswith("nu[") for n in rs.unknowns.values() if "tau" in n)
    sol = solve_orders(build_order_constraints(rs))
    assert all(sol.upper[v] <= 0 for v in sol.upper)


def test_clutch_rescaled_equations_are_regular(engines):
    rep = report(engines["clutch"], F, T)
    rs = rescale(rep.system, rep.solution)
    nu1 = next(s for s, n in rs.unknowns.items() if n == "nu[tau1]")
    u1 = next(s for s, n in rs.unknowns.items() if n == "•w1-w1")
    e1 = rs.eqs[rs.names.index("e1")].subs(fe.STEP, 0)
    assert e1.has(nu1) and e1.has(u1)


def test_no_impulsive_variables_rescale_is_identity(engines):
    rep = report(engines["clutch"], T, F)
    assert rescale(rep.system, rep.solution) is rep.system


def test_saturate():
    terms = ["z", "-x", "-y"]
    sat = saturate(terms)
    assert len(sat) == 3
    assert {s[0] for s in sat} == set(terms)
    assert all(len(rest) == 2 and head not in rest for head, rest in sat)
    assert saturate(["tau1", "tau2"]) == [("tau1", ("tau2",)), ("tau2", ("tau1",))]
    assert saturate(["x"]) == [("x", ())]


def test_constant_equation_gives_no_constraint():
    x = sp.Symbol("x")
    rs = RestartSystem([sp.Integer(5) - 5], ["c"], {x: "x"}, {}, {x: ("x", 0)})
    ocs = build_order_constraints(rs)
    assert ocs.equations == [[]]
    sol = solve_orders(ocs)
    assert sol.classify("x") is Classification.UNKNOWN


def test_function_of_impulsive_is_rejected():
    ocs = OrderConstraintSystem(["w"], [[LinForm((("w", Fraction(1)),), Fraction(0)), LinForm((), Fraction(1))]], ["f"])
    ocs.lower["w"], ocs.upper["w"] = NEG_INF, POS_INF
    ocs.function_args.append({"w"})
    with pytest.raises(InfiniteOrder):
        solve_orders(ocs)


_names = ["a", "b", "c"]


@settings(max_examples=80, deadline=None)
@given(
    st.dictionaries(st.sampled_from(_names), st.integers(1, 3), min_size=1),
    st.integers(-2, 2),
    st.dictionaries(st.sampled_from(_names), st.fractions(-3, 3, max_denominator=4), min_size=3),
)
def test_product_order_is_sum_of_factor_orders(powers, step_exp, orders):
    syms = {n: sp.Symbol(n) for n in _names}
    mono = sp.Integer(2) * fe.STEP**step_exp
    for n, p in powers.items():
        mono *= syms[n] ** p
    rs = RestartSystem([mono + 1], ["m"], {s: n for n, s in syms.items()}, {}, {})
    forms = build_order_constraints(rs).equations[0]
    mono_form = next(f for f in forms if f.coeffs)
    expected = sum(Fraction(p) * orders[n] for n, p in powers.items()) - step_exp
    assert mono_form.value(orders) == expected


@st.composite
def _forms(draw):
    n = draw(st.integers(2, 3))
    out = []
    for _ in range(n):
        vs = draw(st.lists(st.sampled_from(_names), max_size=2, unique=True))
        out.append(LinForm(tuple((v, Fraction(draw(st.integers(1, 2)))) for v in sorted(vs)), Fraction(draw(st.integers(-1, 1)))))
    return out


def _ocs(eqs):
    ocs = OrderConstraintSystem(list(_names), [list(e) for e in eqs], [f"q{i}" for i in range(len(eqs))])
    for v in _names:
        ocs.lower[v], ocs.upper[v] = NEG_INF, Fraction(1)
    return ocs


@settings(max_examples=60, deadline=None)
@given(st.lists(_forms(), min_size=1, max_size=2), _forms())
def test_solve_orders_is_monotone(eqs, extra):
    try:
        base = solve_orders(_ocs(eqs))
        more = solve_orders(_ocs(eqs + [extra]))
    except ImpulseError:
        assume(False)
        return
    for v in _names:
        assert more.lower[v] >= base.lower[v] or more.lower[v] == NEG_INF == more.upper[v]
        assert more.upper[v] <= base.upper[v]


def test_report_json(engines):
    js = report(engines["clutch"], F, T).to_json()
    assert js["variables"]["tau1"]["class"] == "impulsive"
    assert js["variables"]["tau1"]["profile"] == "...,0,1,0,..."
    assert js["deleted"] == ["e3"]


def test_restart_system_uses_increments(engines):
    eng = engines["clutch"]
    rs = build_restart_system(eng, eng.exec_run(*eng.steady_state(F), T))
    assert sorted(rs.unknowns.values()) == ["tau1", "tau2", "•w1-w1", "•w2-w2"]
    assert set(rs.residuals) == {"e3"}

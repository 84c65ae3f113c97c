"""Numeric solvers, restart paths and the simulator."""

from __future__ import annotations

import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mdaec import ModeEngine, load_model
from mdaec.impulse import analyze_instant, build_restart_system
from mdaec.runtime import (
    DomainError,
    NonlinearImpulsive,
    Simulator,
    SolverConfig,
    change_system,
    compile_exprs,
    eval_residual,
    fd_jacobian,
    levelwise_plan,
    levelwise_restart,
    newton_solve,
    possibly_impulsive,
    restart_by_elimination,
    restart_delta,
    restart_rescaled,
    semilinear_restart,
)

from conftest import CLUTCH_MEAN, CLUTCH_W1, CLUTCH_W2, model_path

ENGAGE = ({"g": False}, {"g": True})
RELEASE = ({"g": True}, {"g": False})


def clutch_change(name="clutch", stretch=0, change=ENGAGE, left=None, t=5.0):
    eng = ModeEngine(load_model(model_path(name)), stretch=stretch)
    old, new = change
    r = eng.exec_run(*eng.steady_state(old), new)
    assert r.ok
    rs = build_restart_system(eng, r, keep_params=False)
    left = left or {"w1": [CLUTCH_W1], "w2": [CLUTCH_W2]}
    cs = change_system(eng, r, left, t, rs=rs)
    return eng, r, rs, cs, analyze_instant(eng, r)


# -- Jacobians and Newton ------------------------------------------------------

coef = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(coef, min_size=6, max_size=6), st.lists(coef, min_size=2, max_size=2))
def test_fd_jacobian_matches_analytic_on_polynomials(c, u):
    a, b, p, q, r, s = c

    def f(v):
        x, y = v
        return np.array([a * x**3 + b * x * y + p, q * y**2 + r * x**2 * y + s * y])

    x, y = u
    exact = np.array([[3 * a * x**2 + b * y, b * x], [2 * r * x * y, 2 * q * y + r * x**2 + s]])
    assert np.max(np.abs(fd_jacobian(f, np.array(u)) - exact)) <= 1e-5


def test_newton_linear_system():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([9.0, 8.0])
    u = newton_solve(lambda v: A @ v - b, [0.0, 0.0])
    assert np.allclose(u, np.linalg.solve(A, b), atol=1e-12)


def test_newton_cubic():
    u = newton_solve(lambda v: np.array([v[0] ** 3 - 8.0]), [1.0])
    assert abs(u[0] - 2.0) <= 1e-12


def test_domain_error_names_component():
    x = sp.Symbol("x")
    f = compile_exprs([x + 1, sp.sqrt(x)], [x])
    assert np.allclose(f(4.0), [5.0, 2.0])
    with pytest.raises(DomainError) as exc:
        f(-1.0)
    assert exc.value.index == 1


# -- Restart systems -----------------------------------------------------------


def test_clutch_residual_is_small_at_exact_jump():
    _, _, _, cs, _ = clutch_change()
    names = cs.numeric.names
    jump1, jump2 = CLUTCH_MEAN - CLUTCH_W1, CLUTCH_MEAN - CLUTCH_W2
    for h in (1e-2, 1e-4, 1e-6):
        u = np.zeros(len(names))
        u[names.index("•w1-w1")], u[names.index("•w2-w2")] = jump1, jump2
        u[names.index("tau1")], u[names.index("tau2")] = jump1 / h, -jump1 / h
        # Only the friction terms remain, and they are O(h).
        assert np.max(np.abs(eval_residual(cs.numeric, u, h))) <= 0.02 * h
    with pytest.raises(ValueError):
        eval_residual(cs.numeric, u[:-1], 0.0)


def test_torques_balance_at_every_step():
    _, _, _, cs, _ = clutch_change()
    names = cs.numeric.names
    i1, i2 = names.index("tau1"), names.index("tau2")
    u = np.zeros(cs.numeric.dim)
    h = 1e-2
    for _ in range(15):
        u = newton_solve(lambda v: cs.numeric.residual(v, h), u)
        assert abs(u[i1] + u[i2]) <= 1e-12
        # The torque impulse scales like 1/h.
        assert u[i1] * h == pytest.approx(CLUTCH_MEAN - CLUTCH_W1, rel=1e-2)
        h *= 0.5


def test_three_restart_paths_agree():
    _, _, rs, cs, rep = clutch_change()
    cfg = SolverConfig()
    elim, _ = restart_by_elimination(cs, possibly_impulsive(rs, rep.solution), cfg)
    resc, r1 = restart_rescaled(cs, rep.solution, cfg)
    delta, r2 = restart_delta(cs, cfg)
    for post in (elim, resc, delta):
        assert post["w1"] == pytest.approx(CLUTCH_MEAN, abs=1e-6)
        assert post["w2"] == pytest.approx(CLUTCH_MEAN, abs=1e-6)
    assert abs(delta["w1"] - elim["w1"]) <= 2 * cfg.eps
    assert r1.iterations <= 40 and r2.iterations <= 40


@pytest.mark.parametrize("stretch", [1, 2])
def test_stretched_restart_matches_unstretched(stretch):
    cfg = SolverConfig()
    base = clutch_change()
    other = clutch_change(stretch=stretch)
    e0 = restart_by_elimination(base[3], possibly_impulsive(base[2], base[4].solution), cfg)[0]
    e1 = restart_by_elimination(other[3], possibly_impulsive(other[2], other[4].solution), cfg)[0]
    d0, d1 = restart_delta(base[3], cfg)[0], restart_delta(other[3], cfg)[0]
    for k in ("w1", "w2"):
        assert abs(e0[k] - e1[k]) <= 1e-9
        assert abs(d0[k] - d1[k]) <= 1e-9


def test_identity_change_keeps_state():
    left = {"w1": [1.2], "w2": [1.2]}
    _, r, rs, cs, rep = clutch_change(change=RELEASE, left=left, t=10.0)
    assert r.deleted == ()
    post, _ = restart_by_elimination(cs, possibly_impulsive(rs, rep.solution), SolverConfig())
    assert post == pytest.approx({"w1": 1.2, "w2": 1.2}, abs=1e-12)
    post, _ = restart_delta(cs, SolverConfig())
    assert post == pytest.approx({"w1": 1.2, "w2": 1.2}, abs=2e-8)


def test_nonsemilinear_restart():
    _, _, rs, cs, rep = clutch_change("clutch_nonsemilinear")
    cfg = SolverConfig(eps=1e-9)
    with pytest.raises(NonlinearImpulsive):
        restart_by_elimination(cs, possibly_impulsive(rs, rep.solution), cfg)
    post, res = restart_delta(cs, cfg)
    assert res.iterations <= 40
    assert max(abs(post["w1"] - CLUTCH_W2), abs(post["w2"] - CLUTCH_W2)) < 2 * cfg.eps
    post, _ = restart_rescaled(cs, rep.solution, cfg)
    assert post["w1"] == pytest.approx(CLUTCH_W2, abs=1e-6)


# -- Level-wise restarts -------------------------------------------------------


def test_semilinear_consistent_left_limit_is_kept():
    A = np.array([[1.0, -1.0]])
    C = lambda x: np.array([x[0] + x[1] - 2.0])  # noqa: E731
    assert np.allclose(semilinear_restart(A, C, [1.0, 1.0]), [1.0, 1.0], atol=1e-13)
    assert np.allclose(semilinear_restart(A, C, [2.0, 1.0]), [1.5, 0.5], atol=1e-12)


def test_cupball_impact():
    eng = ModeEngine(load_model(model_path("cupball_inelastic")))
    new = {"rope": True}
    plan = levelwise_plan(eng, new, new)
    post = levelwise_restart(plan, {"x": [0.6, 1.0], "y": [-0.8, 0.0]}, 0.0)
    (x, xd), (y, yd) = post["x"][:2], post["y"][:2]
    assert (x, y) == pytest.approx((0.6, -0.8), abs=1e-12)
    assert (xd, yd) == pytest.approx((0.64, 0.48), abs=1e-9)
    assert abs(x * x + y * y - 1.0) <= 1e-9
    assert abs(x * xd + y * yd) <= 1e-9


# -- Simulation ----------------------------------------------------------------


def sim(name, tend, dt=1e-2, t0=0.0):
    return Simulator(ModeEngine(load_model(model_path(name)))).run(t0, tend, dt)


def test_clutch_trajectory_matches_closed_form():
    tr = sim("clutch", 15.0, dt=1e-3)
    assert [(e.time, e.source, e.target) for e in tr.events] == [(5.0, "(F)", "(T)"), (10.0, "(T)", "(F)")]
    ts, w1, w2 = np.array(tr.times), tr.column("w1"), tr.column("w2")
    before = ts < 5.0
    assert np.max(np.abs(w1[before] - np.exp(-0.01 * ts[before]))) <= 1e-4
    assert np.max(np.abs(w2[before] - 1.5 * np.exp(-0.00625 * ts[before]))) <= 1e-4
    engaged = (ts > 5.0) & (ts < 10.0)
    assert np.max(np.abs(w1[engaged] - w2[engaged])) <= 1e-9
    # Engaged: (j1 + j2) w' = -(k1 + k2) w from the weighted mean.
    ref = CLUTCH_MEAN * np.exp(-(0.0225 / 3.0) * (ts[engaged] - 5.0))
    assert np.max(np.abs(w1[engaged] - ref)) <= 1e-4
    assert tr.events[0].right["w1"] == pytest.approx(CLUTCH_MEAN, abs=1e-6)


def test_zero_length_horizon_is_empty():
    tr = sim("clutch", 0.0)
    assert tr.times == [] and tr.events == []
    assert tr.to_csv().strip() == "t,w1,w2,tau1,tau2,mode"


def test_nonsemilinear_simulation_restarts_to_second_speed():
    tr = sim("clutch_nonsemilinear", 6.0)
    ev = tr.events[0]
    assert ev.time == 5.0 and ev.path in ("rescaled", "delta-cascade")
    assert ev.right["w1"] == pytest.approx(ev.left["w2"], abs=1e-6)


def test_cupball_simulation_keeps_rope_length():
    tr = sim("cupball_inelastic", 1.0)
    assert len(tr.events) == 1 and tr.events[0].path == "level-wise"
    te = tr.events[0].time
    ts, x, y = np.array(tr.times), tr.column("x"), tr.column("y")
    after = ts > te
    assert np.max(np.abs(x[after] ** 2 + y[after] ** 2 - 1.0)) <= 1e-3
    assert math.hypot(tr.events[0].right["x"], tr.events[0].right["y"]) == pytest.approx(1.0, abs=1e-6)


def test_events_json_round_trip():
    import json

    tr = sim("clutch", 6.0)
    data = json.loads(tr.events_json())
    assert data["events"][0]["deleted"] == ["e3"]
    assert data["warnings"] == []


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(theta=1.0)
    with pytest.raises(ValueError):
        SolverConfig(eps=0.0)

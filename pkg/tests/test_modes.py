import pytest

from mdaec import ModeEngine, explore_modes, load_model
from mdaec import frontend as fe
from mdaec.modes import (
    SV,
    Status,
    exec_run_progress,
    facts,
    inst_name,
    initial_node,
    sv_leq,
    tick,
)

from conftest import model_path
from corpus_graphs import ACCEPTED

F, T = {"g": False}, {"g": True}


def latent(engine, val):
    return {inst_name(i) for i in engine.long_sigma(engine.mode_eqs(val)).latent}


def test_status_order():
    assert sv_leq(SV.I, SV.U) and sv_leq(SV.U, SV.T) and sv_leq(SV.U, SV.F)
    assert not sv_leq(SV.T, SV.F) and not sv_leq(SV.F, SV.T) and not sv_leq(SV.T, SV.U)
    a = Status({("g", "g"): SV.T})
    b = Status({("g", "g"): SV.T, ("v", "x", 0): SV.U})
    assert a.strictly_below(b) and not b.leq(a)


def test_tick_rules():
    sigma = Status({("e", "e3", 1): SV.T, ("v", "w1", 2): SV.T, ("v", "w1", 0): SV.T, ("e", "e1", 0): SV.T})
    known, delta = tick(sigma)
    assert delta == {("e3", 0)}
    assert known == {("w1", 1)}
    assert tick(Status({("e", "e1", 0): SV.T})) == (frozenset(), frozenset())


def test_facts_filter_by_guard():
    assert facts({("e3", 0)}, ["e1", "e3"]) == {("e3", 0)}
    assert facts(set(), ["e3"]) == frozenset()
    assert facts({("e3", 0)}, ["e1", "e5"]) == frozenset()


def test_clutch_modes(engines):
    eng = engines["clutch"]
    sig = eng.long_sigma(eng.mode_eqs(T))
    assert sig.index == 1 and latent(eng, T) == {"•e3"}
    assert eng.long_sigma(eng.mode_eqs(F)).index == 0


def test_clutch_changes(engines):
    eng = engines["clutch"]
    r = eng.exec_run(*eng.steady_state(F), T)
    assert r.ok and r.deleted == (("e3", 0),)
    assert set(r.H) == {("e1", 0), ("e2", 0), ("e3", 1), ("e4", 0)}
    r = eng.exec_run(*eng.steady_state(T), F)
    assert r.ok and r.deleted == ()
    assert set(r.H) == {("e1", 0), ("e2", 0), ("e5", 0), ("e6", 0)}


def test_steady_long_mode_recovers_sigma(engines):
    for name in ACCEPTED:
        eng = engines[name]
        for val in eng.long_valuations():
            r = eng.exec_run(*eng.steady_state(val), val)
            sig = eng.long_sigma(eng.mode_eqs(val))
            assert r.ok and r.deleted == ()
            assert set(r.H) | set(r.facts) == set(sig.f_sigma) | set(sig.f_bar)


def test_clutch_automaton(engines):
    aut = explore_modes(engines["clutch"])
    assert len(aut.nodes) == 2 and len(aut.edges) == 4 and not aut.failures
    changes = [e for e in aut.edges if e.result.deleted]
    assert len(changes) == 1 and changes[0].valuation == (("g", True),)
    loops = [e for e in aut.edges if e.src == e.dst]
    assert len(loops) == 2


def test_westinghouse(engines):
    eng = engines["westinghouse"]
    f, t = {"gamma": False}, {"gamma": True}
    assert eng.long_sigma(eng.mode_eqs(f)).index == 1
    assert eng.long_sigma(eng.mode_eqs(t)).index == 1
    assert latent(eng, f) == {"•l1", "•l2"}
    assert latent(eng, t) == {"•l1", "•l2", "•v1"}
    r = eng.exec_run(*eng.steady_state(f), t)
    assert r.ok and r.deleted == (("v1", 0),)


def test_cupball_inelastic_change(engines):
    eng = engines["cupball_inelastic"]
    r = eng.exec_run(*eng.steady_state({"rope": False}), {"rope": True})
    assert r.ok and set(r.deleted) == {("k1", 0), ("k1", 1)}
    assert ("k1", 2) in r.H


def test_elastic_transient_instant(engines):
    eng = engines["cupball_elastic"]
    r = eng.exec_run(*eng.steady_state({"rope": False}), {"rope": True, "up_rope": True})
    assert r.ok and r.mode_type is fe.ModeType.TRANSIENT
    assert r.deleted == (("k1", 0),)


def test_elastic_without_law_fails(engines):
    eng = engines["cupball_elastic_nolaw"]
    r = eng.exec_run(*eng.steady_state({"rope": False}), {"rope": True, "up_rope": True})
    assert not r.ok and r.stage == "index reduction" and "underdetermined" in r.reason
    assert r.diagnosis["under"]["eqs"]


def test_single_mode_model():
    m = fe.parse_model("model t; var x init 1; equation a: der(x) = -x;", "t")
    aut = explore_modes(ModeEngine(m))
    assert len(aut.nodes) == 1 and len(aut.edges) == 1 and aut.edges[0].src == aut.edges[0].dst == 0


def test_rldc2_modes_nonsingular_and_accepted(engines):
    eng = engines["rldc2"]
    vals = eng.long_valuations()
    assert len(vals) == 4
    assert all(eng.long_sigma(eng.mode_eqs(v)).success for v in vals)
    assert explore_modes(eng).accepted


@pytest.mark.parametrize("name", ACCEPTED)
def test_status_monotone_and_exploration_deterministic(engines, name):
    aut = explore_modes(engines[name])
    for e in aut.edges + aut.failures:
        sts = e.result.statuses
        assert len(sts) >= 2
        for a, b in zip(sts, sts[1:]):
            assert a.strictly_below(b)
        if e.result.ok:
            assert all(v is not SV.U for k, v in sts[-1].items() if k[0] == "g")
    again = explore_modes(ModeEngine(load_model(model_path(name))))
    assert again.signature() == aut.signature()


def test_conflict_resolution_terminates_clutch_stretched():
    eng = ModeEngine(load_model(model_path("clutch")), stretch=2)
    known, delta = eng.steady_state(F)
    counts = []
    for _ in range(6):
        r = eng.exec_run(known, delta, T)
        counts.append(len(r.deleted))
        known, delta = r.next_known, r.next_delta
    assert counts[:4] == [3, 2, 1, 0] and counts[4:] == [0, 0]


@pytest.mark.parametrize("stretch", [0, 1, 2])
def test_stretching_preserves_deleted_names_and_blocks(stretch):
    eng = ModeEngine(load_model(model_path("clutch")), stretch=stretch)
    aut = explore_modes(eng)
    assert aut.accepted
    deleted = {i[0] for e in aut.edges for i in e.result.deleted}
    assert deleted == {"e3"}
    shapes = {tuple(sorted(tuple(sorted(i[0] for i in b[0])) for b in e.result.blocks)) for e in aut.edges}
    assert shapes == {(("e1",), ("e2",), ("e5",), ("e6",)), (("e1", "e2", "e3", "e4"),)}


def test_progressive_clutch_matches_exec_run(engines):
    eng = engines["clutch"]
    known, delta = eng.steady_state(F)
    p = exec_run_progress(eng, known, delta, {"g": True})
    r = eng.exec_run(known, delta, T)
    assert p.ok and p.final[0].H == r.H and p.final[0].deleted == r.deleted


def test_progressive_original_cupball_is_stuck(models):
    eng = ModeEngine(models["cupball_original"])
    known, delta = eng.steady_state({"rope": False})
    p = exec_run_progress(eng, known, delta, {"rope": None})
    assert not p.ok and "underdetermined" in p.reason
    assert set(p.subsystem) == {"e1", "e2"}
    assert p.stuck_guards == ("rope",)


def test_initial_node_is_steady(engines):
    key, val = initial_node(engines["clutch"])
    assert val == F and key.depth == 0

"""Command-line interface: reports, exit codes and output files."""

from __future__ import annotations

import json
import os
from pathlib import Path

import networkx as nx
import pytest

from mdaec import cli
from mdaec.cli import EXIT_INPUT, EXIT_OK, EXIT_REJECTED, TOO_LARGE, analyze, cmd_check, cmd_graph, load, main

from conftest import CORPUS, model_path

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("MDAEC_REGEN_GOLDEN") == "1"


def dump(rep: dict) -> str:
    return json.dumps(rep, indent=2, ensure_ascii=False, default=str) + "\n"


@pytest.mark.parametrize("name", CORPUS)
def test_check_matches_golden(name):
    text = dump(cmd_check(load(str(model_path(name)))))
    path = GOLDEN / f"{name}.check.json"
    if REGEN:
        path.write_text(text, encoding="utf-8")
    assert text == path.read_text(encoding="utf-8")


def test_check_is_deterministic():
    m = load(str(model_path("rldc2")))
    assert dump(cmd_check(m)) == dump(cmd_check(m, jobs=4))


@pytest.mark.parametrize(
    "name, code",
    [("clutch", EXIT_OK), ("cupball_elastic_nolaw", EXIT_REJECTED), ("westinghouse_original", EXIT_REJECTED)],
)
def test_check_exit_codes(name, code, capsys):
    assert main(["check", str(model_path(name))]) == code
    out = capsys.readouterr().out
    assert ("accepted" in out) == (code == EXIT_OK)


def test_missing_file_is_input_error(tmp_path, capsys):
    assert main(["check", str(tmp_path / "absent.mdae")]) == EXIT_INPUT
    assert "cannot read" in capsys.readouterr().err


def test_parse_error_is_input_error(tmp_path, capsys):
    bad = tmp_path / "bad.mdae"
    bad.write_text("model bad; equation e1: = ;\n")
    assert main(["check", str(bad)]) == EXIT_INPUT


def test_bad_solver_option_is_input_error(capsys):
    assert main(["simulate", str(model_path("clutch")), "--theta", "1.5"]) == EXIT_INPUT


def test_json_format(capsys):
    assert main(["check", str(model_path("clutch")), "--format", "json"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["accepted"] is True


def test_simulate_writes_header_only_csv(tmp_path, capsys):
    code = main(["simulate", str(model_path("clutch")), "--t0", "1", "--tend", "1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "clutch.csv").read_text() == "t,w1,w2,tau1,tau2,mode\n"
    assert json.loads((tmp_path / "clutch.events.json").read_text()) == {"events": [], "warnings": []}


def test_simulate_reports_events(tmp_path, capsys):
    code = main(["simulate", str(model_path("clutch")), "--tend", "12", "--dt", "0.01", "--out", str(tmp_path), "--format", "json"])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert [e["time"] for e in summary["events"]] == [5.0, 10.0]
    rows = (tmp_path / "clutch.csv").read_text().splitlines()
    assert rows[0] == "t,w1,w2,tau1,tau2,mode" and len(rows) > 1000


def test_simulate_rejected_model(tmp_path, capsys):
    assert main(["simulate", str(model_path("cupball_elastic_nolaw")), "--out", str(tmp_path)]) == EXIT_REJECTED
    assert not (tmp_path / "cupball_elastic_nolaw.csv").exists()


def btf_digraph(mode: dict) -> nx.DiGraph:
    g = nx.DiGraph()
    for i, b in enumerate(mode["blocks"]):
        g.add_node(i, size=len(b["eqs"]))
    g.add_edges_from(map(tuple, mode["edges"]))
    return g


def test_rldc2_extreme_modes_have_different_btf():
    rep, dots = cmd_graph(load(str(model_path("rldc2"))))
    tt, ff = btf_digraph(rep["modes"]["(T,T)"]), btf_digraph(rep["modes"]["(F,F)"])
    same = nx.is_isomorphic(tt, ff, node_match=lambda a, b: a["size"] == b["size"])
    assert not same
    assert {"mode_TT.dot", "mode_FF.dot", "merged.dot"} <= set(dots)


def test_clutch_merged_graph_labels():
    rep, dots = cmd_graph(load(str(model_path("clutch"))))
    labels = {(tuple(b["eqs"]), tuple(b["vars"])): b["label"] for b in rep["merged"]["blocks"]}
    assert labels[(("e1", "e2", "e4", "•e3"), ("tau1", "tau2", "•w1", "•w2"))] == "(g)"
    assert labels[(("e5",), ("tau1",))] == "(not g)"
    assert "(not g)" in dots["merged.dot"]


def test_graph_files(tmp_path, capsys):
    assert main(["graph", str(model_path("clutch")), "--out", str(tmp_path)]) == EXIT_OK
    assert {p.name for p in tmp_path.iterdir()} == {"graph.json", "mode_F.dot", "mode_T.dot", "merged.dot"}
    assert capsys.readouterr().out.startswith("// ")


def test_impulse_report(capsys):
    assert main(["impulse", str(model_path("clutch")), "--format", "json"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    engage = next(c for c in rep["changes"] if c["from"] == "(F)" and c["to"] == "(T)")
    assert set(engage["impulsive"]) == {"tau1", "tau2"}


def test_automaton_dot(capsys):
    assert main(["automaton", str(model_path("clutch")), "--format", "dot"]) == EXIT_OK
    dot = capsys.readouterr().out
    assert dot.startswith('digraph "clutch"')
    assert dot.count("->") == 4
    assert "-e3" in dot


def test_enumeration_cap(tmp_path, capsys):
    an = analyze(load(str(model_path("rldc2"))), cap=2)
    assert not an.accepted and TOO_LARGE in an.diagnostics[0].message
    guards = "\n".join(f"guard g{k} init false = time >= {k};" for k in range(13))
    eqs = "\n".join(f"equation e{k}: if g{k} then der(x) = {k};" for k in range(13))
    src = tmp_path / "wide.mdae"
    src.write_text(f"model wide;\nvar x init 0 state;\n{guards}\n{eqs}\nequation base: 0 = 0*x;\n")
    assert main(["check", str(src)]) == EXIT_REJECTED
    assert TOO_LARGE in capsys.readouterr().out


def test_module_entry_point():
    assert callable(cli.main)

"""Shared fixtures: corpus models and engines."""

from __future__ import annotations

import math
import sys
from importlib.resources import files
from pathlib import Path

import pytest

from mdaec import ModeEngine, load_model

MODELS = Path(str(files("mdaec") / "models"))
CORPUS = sorted(p.stem for p in MODELS.glob("*.mdae"))

# Clutch left limits at t = 5 from the closed-form decay w(t) = w0 exp(-(k/j) t).
CLUTCH_W1 = 1.0 * math.exp(-(0.01 / 1.0) * 5.0)
CLUTCH_W2 = 1.5 * math.exp(-(0.0125 / 2.0) * 5.0)
CLUTCH_MEAN = (0.5 * CLUTCH_W1 + 1.0 * CLUTCH_W2) / 1.5


def model_path(name: str) -> Path:
    return MODELS / f"{name}.mdae"


@pytest.fixture(scope="session")
def models():
    return {name: load_model(model_path(name)) for name in CORPUS}


@pytest.fixture(scope="session")
def engines(models):
    return {name: ModeEngine(m) for name, m in models.items()}


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.line(k))

import json
from pathlib import Path

import numpy as np
import pytest

from gridkal.network import BOUNDARY, INTERIOR, Node, PipeEdge, PipeNetwork

DATA = Path(__file__).resolve().parents[1] / "src" / "gridkal" / "data"


def single_pipe(length=1.0, a=1.0, b=1.0, d=1.5, d_lin=None):
    return PipeNetwork((Node("v1", BOUNDARY), Node("v2", BOUNDARY)),
                       (PipeEdge("e1", "v1", "v2", length, a, b, d, d_lin),))


def two_pipe(a=1.0, b=1.0, d=1.0, d_lin=None):
    nodes = (Node("v1", BOUNDARY), Node("v2", INTERIOR), Node("v3", BOUNDARY))
    edges = (PipeEdge("e1", "v1", "v2", 1.0, a, b, d, d_lin),
             PipeEdge("e2", "v2", "v3", 2.0, a, b, d, d_lin))
    return PipeNetwork(nodes, edges)


def diamond_scenario_dict(**overrides):
    data = json.loads((DATA / "diamond.scn.json").read_text())
    data["network"] = str(DATA / "diamond.json")
    for key, value in overrides.items():
        data[key] = value
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)

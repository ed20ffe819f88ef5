import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dsse import load_feeder, solve_power_flow
from dsse.fixtures import fixture_path


@pytest.fixture(scope="session")
def six_bus():
    return load_feeder(fixture_path("six_bus"))


@pytest.fixture(scope="session")
def thirteen_bus():
    return load_feeder(fixture_path("thirteen_bus"))


@pytest.fixture(scope="session")
def six_bus_pf(six_bus):
    return solve_power_flow(six_bus)


@pytest.fixture(scope="session")
def thirteen_bus_pf(thirteen_bus):
    return solve_power_flow(thirteen_bus)


def two_bus_doc(r=1.0, x=0.0, p=100_000.0, q=0.0, v=2400.0):
    return {
        "buses": [
            {"id": 1, "phases": "A", "kind": "source", "base_voltage_v": v},
            {"id": 2, "phases": "A", "kind": "load", "base_voltage_v": v},
        ],
        "branches": [
            {"from": 1, "to": 2, "phases": "A", "impedance": [[[r, x]]]},
        ],
        "loads": [{"bus": 2, "power": {"A": [p, q]}}],
    }

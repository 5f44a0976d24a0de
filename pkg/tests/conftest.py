import json
import sys
from pathlib import Path

import numpy as np
import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

import make_frozen  # noqa: E402


@pytest.fixture(scope="session")
def frozen():
    return json.loads((HERE / "frozen" / "oracle_values.json").read_text())


@pytest.fixture(scope="session")
def seeded():
    return make_frozen.inputs()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)

import sys
import numpy as np
import pytest

from lps.nn import MlpSpec, init_mlp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_mlp(rng, in_dim, out_dim, widths=(5, 4), activation="gelu"):
    return init_mlp(MlpSpec(in_dim, widths, out_dim, activation), rng, np.float64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

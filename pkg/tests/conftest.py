import json
from pathlib import Path

import numpy as np
import pytest

from sail.geometry import build_reference_domain, eval_weight, select_time_params

CALIBRATION = json.loads((Path(__file__).parent / "calibration.json").read_text())

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def g17():
    return build_reference_domain(17, 17)


@pytest.fixture(scope="session")
def g33():
    return build_reference_domain(33, 33)


@pytest.fixture(scope="session")
def weight33(g33):
    return eval_weight(g33, (-1.0, 0.0))


@pytest.fixture(scope="session")
def params33(weight33):
    return select_time_params(weight33, 4.6)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")


def standard_source(g, T=4.6):
    """f = exp(-10 |x - (.5, .5)|^2), R = 1 + (t - T/2)."""
    from sail.forward import PolynomialProfile, SeparableSource, SourceSpec
    X, Y = g.mesh
    f = np.exp(-10 * ((X - 0.5) ** 2 + (Y - 0.5) ** 2))
    return SourceSpec(f, SeparableSource(np.ones(g.shape), PolynomialProfile((1.0, 1.0), T / 2)),
                      1.0, 1.0)


@pytest.fixture(scope="session")
def standard_run(g33):
    """Linear coupled system, zero data, two-sided window, no damping."""
    from sail.forward import simulate_coupled
    src = standard_source(g33)
    return simulate_coupled(g33, None, src, None, 4.6, 1 / 128, "two_sided", 0.0), src

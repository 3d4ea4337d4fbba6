import math

import pytest

from kfcool.model import MBAR, ParticleSpec, PhysicalParams
from kfcool.scenario import ScenarioConfig

TS = 2.275e-6
F0 = 38e3


@pytest.fixture(scope="session")
def params_ref():
    """Default particle at 3 mbar, 300 K."""
    return PhysicalParams.from_experiment(ParticleSpec(pressure=3 * MBAR))


@pytest.fixture(scope="session")
def params_low():
    """Default particle at 5.7e-5 mbar, 300 K."""
    return PhysicalParams.from_experiment(ParticleSpec(pressure=5.7e-5 * MBAR))


def short_config(**overrides) -> ScenarioConfig:
    """Default scenario with short captures (4096-sample segments), for tests."""
    base = {"run.capture_s": 8 * 4096 / (1 / TS), "run.cooling_s": 0.02, "analysis.segment_len": 4096}
    base.update(overrides)
    return ScenarioConfig().replace(**base)


@pytest.fixture
def small_config():
    return short_config()


def period(params) -> float:
    return 2 * math.pi / params.omega


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

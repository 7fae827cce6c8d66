"""Shared small fixtures; everything here is cheap enough for session scope."""
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hydot import born, grid, optics

settings.register_profile(
    "hydot", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("hydot")


@pytest.fixture(scope="session")
def table():
    return optics.default_table()


@pytest.fixture(scope="session")
def params():
    return optics.OpticalParams()


@pytest.fixture(scope="session")
def small_grid():
    return grid.build_grid(8, 8, 6, 2.0, 2.0, 2.0)


@pytest.fixture(scope="session")
def small_system(small_grid):
    return grid.assemble_system(small_grid)


@pytest.fixture(scope="session")
def cube10():
    """The 10^3 grid used by the compression fixtures."""
    g = grid.build_grid(10, 10, 10, 3.0, 3.0, 3.0)
    return g, grid.assemble_system(g)


@pytest.fixture(scope="session")
def born_fixture(cube10, table):
    """N_s = 4, N_ds = 9, N_lambda = 11 on the 10^3 grid, with the dense H."""
    g, S = cube10
    setup = born.make_setup(g, 4, np.linspace(650, 950, 11), table)
    provider = born.BlockProvider(g, S, setup, method="direct", cache=True)
    H = born.dense_H(provider)
    return g, S, setup, provider, H


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with its measured values."""
    reports = [r for key in ("passed", "failed") for r in terminalreporter.stats.get(key, [])
               if r.when == "call" and "test_acceptance.py" in r.nodeid]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    rows = []
    for r in reports:
        props = dict(r.user_properties)
        rows.append((props.get("criterion", 0), r.passed, props.get("detail", ""), r.nodeid.split("::")[-1]))
    for num, ok, detail, name in sorted(rows):
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {name}  {detail}")

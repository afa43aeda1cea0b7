import numpy as np
import pytest

from bilayer.mesh import DomainSpec, Segment, build_mesh

LEFT = (Segment("x", -5.0, -2.0, 2.0),)


def benchmark_mesh(k, dirichlet=LEFT):
    return build_mesh(DomainSpec.rectangle(-5, 5, -2, 2, k, dirichlet))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def mesh2():
    return benchmark_mesh(2)


@pytest.fixture(scope="session")
def mesh3():
    return benchmark_mesh(3)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long flow runs (minutes)")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

from __future__ import annotations

import numpy as np
import pytest

from skippy.instances import InstanceSpec, fig1, generate, random_tabular


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fig1_pair():
    return fig1()


@pytest.fixture(scope="session")
def linear_instance():
    return generate(InstanceSpec(kind="linear_mdp_random", d=3, H=3, seed=7))


def small_mdp(rng, H=3, A=2, max_states=3):
    sizes = [1] + [int(rng.integers(1, max_states + 1)) for _ in range(H - 1)] + [1]
    return random_tabular(sizes, A, rng)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

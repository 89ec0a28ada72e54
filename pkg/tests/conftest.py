import numpy as np
import pytest

from fedsel.synthgen import PopulationSpec, generate_population, solve_target_optimum


@pytest.fixture(scope="session")
def small_spec():
    return PopulationSpec(num_clients=40, samples_per_client=50, master_seed=7)


@pytest.fixture(scope="session")
def small_pop(small_spec):
    return generate_population(small_spec)


@pytest.fixture(scope="session")
def small_oracle(small_pop, small_spec):
    return solve_target_optimum(small_pop, small_spec.ridge)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one verdict line per acceptance criterion for the terminal summary."""

    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

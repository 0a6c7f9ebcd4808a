import numpy as np
import pytest

from expa.policy import PolicyConfig, init_params
from expa.tasks import task_catalog

ACCEPTANCE_LINES: list[str] = []

SMALL = PolicyConfig(d=16, heads=2, ff=12, conv=3, max_len=96)


@pytest.fixture
def sort_catalog():
    return task_catalog("sort", 3)


@pytest.fixture
def sort4_catalog():
    return task_catalog("sort", 4)


@pytest.fixture
def calc_catalog():
    return task_catalog("arithmetic")


def small_params(catalog, seed=0, expanded="random", config=SMALL):
    return init_params(catalog, config, np.random.default_rng(seed), expanded=expanded)


@pytest.fixture
def acceptance_report():
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)

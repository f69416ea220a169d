import hypothesis
import numpy as np
import pytest

from lightgcl.data import InteractionSet, normalize

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def toy():
    """Two users, two items, edges (0,0), (0,1), (1,1)."""
    return InteractionSet.from_pairs(2, 2, [0, 0, 1], [0, 1, 1])


@pytest.fixture
def toy_adj(toy):
    return normalize(toy)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def record(label, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)

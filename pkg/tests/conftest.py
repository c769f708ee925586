import os

import numpy as np
import pytest

from dpcn.data import channel_stats, normalize_channels, synthetic_splits


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_splits():
    """A few hundred small synthetic images, normalized with train statistics."""
    train, test = synthetic_splits(24, 8, 3, image_size=16, seed=5)
    means, stds = channel_stats(train)
    return normalize_channels(train, means, stds), normalize_channels(test, means, stds)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, passed, detail):
        line = f"ACCEPTANCE criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        log = os.environ.get("DPCN_ACCEPTANCE_LOG")
        if log:
            with open(log, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

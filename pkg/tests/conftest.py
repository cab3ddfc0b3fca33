import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from tfcompress.synthdata import generate_dataset, train_sync_expert


@pytest.fixture(scope="session")
def small_ds():
    """Small dataset for fast unit tests."""
    return generate_dataset(7, n_identities=8, clips_per_identity=2, clip_len=16)


@pytest.fixture(scope="session")
def default_ds():
    return generate_dataset(0)


@pytest.fixture(scope="session")
def trained_expert(default_ds):
    return train_sync_expert(default_ds, steps=1000, seed=0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from asymloss.data import make_splits  # noqa: E402
from asymloss.experiment import ExperimentConfig, run  # noqa: E402

ACCEPTANCE_LINES: list[str] = []
_RUNS: dict = {}


@pytest.fixture(scope="session")
def default_splits():
    return make_splits(ExperimentConfig().data)


@pytest.fixture(scope="session")
def reference_run(default_splits):
    """``reference_run(preset, fraction, seed)`` on the default task, cached for the session."""
    train_images, test_images = default_splits

    def get(preset: str, fraction: float, seed: int):
        key = (preset, fraction, seed)
        if key not in _RUNS:
            base = ExperimentConfig(preset=preset, seed=seed)
            cfg = replace(base, train=replace(base.train, fraction=fraction))
            _RUNS[key] = run(cfg, train_images, test_images)
        return _RUNS[key]

    return get


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

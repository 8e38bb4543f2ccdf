import pytest

from singan_seg.toy import make_toy_sample
from singan_seg.trainer import TrainConfig, train_all


@pytest.fixture(scope="session")
def smoke_checkpoint():
    """Three-level stack trained for a couple of epochs per scale (structure, not quality)."""
    cfg = TrainConfig(epochs_per_scale=2, width=8, seed=1, min_dim=16)
    return train_all(make_toy_sample("img000", 32, seed=0), cfg)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one (criterion, passed, detail) line per acceptance criterion."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

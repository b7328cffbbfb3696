import numpy as np
import pytest

from ihf_harmony.data import DatasetConfig, make_dataset
from ihf_harmony.encoder import FixedEncoder


@pytest.fixture(scope="session")
def encoder():
    return FixedEncoder()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3 sites x 5 subjects of 8x32x32 volumes."""
    out = tmp_path_factory.mktemp("tiny") / "data"
    cfg = DatasetConfig(out_dir=str(out), subjects_per_site=5, seed=3, shape=(8, 32, 32))
    return make_dataset(cfg)


ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance_log():
    """Record one summary line per acceptance criterion, printed at session end."""
    def record(key, passed, detail):
        ACCEPTANCE_LINES[key] = f"{key}: {'PASS' if passed else 'FAIL'}  {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (not k.startswith("criterion"), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])

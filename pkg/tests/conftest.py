import numpy as np
import pytest

from covidcxr.phantoms import make_corpus

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def phantom_corpus(tmp_path_factory):
    """90 phantoms (30 per class) with masks and a manifest, written once per session."""
    root = tmp_path_factory.mktemp("phantoms")
    records = make_corpus(root, n_per_class=30, seed=11)
    return root, records


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

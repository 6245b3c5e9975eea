import numpy as np
import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record(request):
    """``record(n, ok, detail)`` stores one acceptance verdict and prints it."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def _record(n: int, ok: bool, detail: str) -> None:
        results[n] = (bool(ok), detail)
        print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

import os

import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def record():
    """Acceptance tests call ``record(num, title, detail)`` just before asserting."""
    def _record(num: int, title: str, detail: str, ok: bool):
        _RESULTS[num] = (title, ("PASS" if ok else "FAIL") + f"  {detail}")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        title, line = _RESULTS[num]
        terminalreporter.write_line(f"[{num:2d}] {title:<34} {line}")


@pytest.fixture(autouse=True)
def _quiet_threads(monkeypatch):
    monkeypatch.delenv("DESKMAE_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("DESKMAE_THREADS", raising=False)
    yield


def pytest_report_header(config):
    from deskmae import _kernels
    return f"deskmae kernel backend: {_kernels.backend_name()} (DESKMAE_NUMBA={os.environ.get('DESKMAE_NUMBA', '1')})"

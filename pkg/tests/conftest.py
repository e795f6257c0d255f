import numpy as np
import pytest

from smrlnn import _backend, _fallback

BACKENDS = ["python"] + (["compiled"] if _backend.COMPILED else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per available kernel implementation."""
    impl = _fallback if request.param == "python" else _backend.compiled
    for name in ("jacobi_eigh", "cholesky", "cho_solve_factored", "greedy_match"):
        monkeypatch.setattr(_backend, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_CRITERIA = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` logs one acceptance line and returns ``ok``."""
    def log(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append((n, request.node.name, line))
        print(line)
        return ok
    return log


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)

import contextlib
import os
import sys
from pathlib import Path

import pytest

# one BLAS thread, set before any test module imports numpy
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("TROI_THREADS", "1"))

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        notes = []
        try:
            yield notes
        except BaseException as e:
            detail = str(e).splitlines()[0] if str(e) else type(e).__name__
            _ACCEPTANCE[number] = f"criterion {number} FAIL  {title}: {'; '.join(notes + [detail])}"
            raise
        _ACCEPTANCE[number] = f"criterion {number} PASS  {title}: {'; '.join(notes)}"
        print(_ACCEPTANCE[number])

    return run


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])

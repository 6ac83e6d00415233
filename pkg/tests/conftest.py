import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.fixture
def acceptance(request):
    """``record(number, passed, detail)`` for the end-of-run criterion listing.

    ``passed`` is True, False, None (skipped) or a status string such as
    ``"REPORT"`` for informational outcomes.
    """

    def record(number, passed, detail=""):
        request.config.acceptance_results[number] = (passed, detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        status = passed if isinstance(passed, str) else {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

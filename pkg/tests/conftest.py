import numpy as np
import pytest

from diffdistill.scores import AnalyticScoreModel
from diffdistill.sde import default_schedule
from diffdistill.tasks import make_rings_and_blobs

# collected (criterion, passed, detail) lines, printed in the terminal summary
ACCEPTANCE_RESULTS = []


def record_acceptance(name: str, passed: bool, detail: str = ""):
    ACCEPTANCE_RESULTS.append((name, passed, detail))
    print(f"{'PASS' if passed else 'FAIL'} {name}" + (f": {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        line = f"{'PASS' if passed else 'FAIL'} {name}"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_task():
    return make_rings_and_blobs()


@pytest.fixture(scope="session")
def schedule():
    return default_schedule()


@pytest.fixture(scope="session")
def analytic_score(default_task, schedule):
    return AnalyticScoreModel(default_task.gmm, schedule)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)

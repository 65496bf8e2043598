import re

import pytest

ACCEPTANCE_RESULTS = {}
N_CRITERIA = 12


@pytest.fixture
def record_criterion(request):
    """Store ``(passed, detail)`` for an acceptance criterion and print its line.

    The criterion number is taken from the test name (``test_criterion_NN_...``)
    and marked as failed until the test records a result.
    """
    number = int(re.match(r"test_criterion_(\d+)", request.node.name).group(1))
    ACCEPTANCE_RESULTS[number] = (False, "(did not complete)")

    def record(passed, detail):
        ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
        print(_line(number))
        return bool(passed)

    return record


def _line(number):
    if number not in ACCEPTANCE_RESULTS:
        return f"criterion {number:2d}: not run"
    passed, detail = ACCEPTANCE_RESULTS[number]
    return f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(_line(number))

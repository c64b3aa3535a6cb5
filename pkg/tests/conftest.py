import pytest

_CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Store one pass/fail line per acceptance criterion and print it immediately."""

    def record(number, passed, detail, notes=()):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        _CRITERIA[number] = [line, *notes]
        print("\n".join(_CRITERIA[number]))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            for line in _CRITERIA[number]:
                terminalreporter.write_line(line)

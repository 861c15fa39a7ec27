import pytest

ACCEPTANCE_CRITERIA = 12
_acceptance: dict[int, tuple[str, bool, str]] = {}


class AcceptanceRecorder:
    """Stores one verdict per acceptance criterion for the end-of-run summary."""

    def __call__(self, number: int, name: str, passed: bool, detail: str) -> None:
        _acceptance[number] = (name, bool(passed), detail)
        print(_line(number, name, passed, detail))
        assert passed, detail


def _line(number, name, passed, detail):
    return f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"


@pytest.fixture
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, ACCEPTANCE_CRITERIA + 1):
        if number in _acceptance:
            terminalreporter.write_line(_line(number, *_acceptance[number]))
        else:
            terminalreporter.write_line(f"criterion {number:2d} FAIL  not run or raised before reporting")

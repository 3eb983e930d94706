import pytest

_VERDICTS = {}


class CriterionRecorder:
    """Stores one verdict per acceptance criterion for the end-of-session report."""

    def record(self, number: int, passed: bool, detail: str) -> bool:
        _VERDICTS[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")
        return passed

    def skip(self, number: int, reason: str):
        _VERDICTS[number] = (None, reason)
        pytest.skip(reason)


@pytest.fixture
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        passed, detail = _VERDICTS[number]
        tag = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {number:2d}: {tag} | {detail}")

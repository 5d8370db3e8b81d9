import pytest

from assoclearn.runner import RunCache

# one line per acceptance criterion, printed in the terminal summary
VERDICTS: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    VERDICTS[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"


@pytest.fixture(scope="session")
def run_cache():
    return RunCache()


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])

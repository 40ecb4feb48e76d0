import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, ok, detail)."""
    results = request.config.stash[_RESULTS]

    def record(number: int, ok: bool, detail: str) -> None:
        results[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])

import pytest

_CRITERIA: dict[int, tuple[str, str]] = {}


class Criterion:
    """Records one acceptance line; ``check`` asserts after recording so failures are still reported."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        _CRITERIA[number] = ("FAIL", f"{title}: did not complete")

    def check(self, ok: bool, detail: str) -> None:
        _CRITERIA[self.number] = ("PASS" if ok else "FAIL", f"{self.title}: {detail}")
        assert ok, detail


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {text}")

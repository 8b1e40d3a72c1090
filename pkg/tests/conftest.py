import pytest

_LINES: list[str] = []


class Report:
    """Collects one PASS/FAIL line per acceptance check, printed at session end."""

    def __init__(self, criterion: str):
        self.criterion = criterion
        self.failed: list[str] = []

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {self.criterion}.{name}  {detail}".rstrip()
        _LINES.append(line)
        print(line)
        if not ok:
            self.failed.append(name)
        return ok

    def finish(self) -> None:
        assert not self.failed, f"criterion {self.criterion} failed: {', '.join(self.failed)}"


@pytest.fixture
def report(request):
    return Report(request.node.name.removeprefix("test_criterion_").split("_")[0])


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)

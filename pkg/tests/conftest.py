import pytest

ACCEPTANCE_LINES: list[str] = []


class Verdicts:
    """One line per acceptance criterion, echoed in the terminal summary."""

    def __call__(self, criterion: str, ok: bool, detail: str, proxy: str | None = None) -> bool:
        label = f"{criterion} [proxy: {proxy}]" if proxy else criterion
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL':<12}{label}: {detail}")
        return ok

    def not_verified(self, criterion: str, reason: str) -> None:
        ACCEPTANCE_LINES.append(f"{'NOT VERIFIED':<12}{criterion}: {reason}")
        pytest.skip(f"NOT VERIFIED: {reason}")


@pytest.fixture(scope="session")
def verdict():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

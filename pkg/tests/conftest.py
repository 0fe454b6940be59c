ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

"""Shared test plumbing: the acceptance-verdict summary block."""

ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail=""):
    """Log one acceptance verdict; echoed in the terminal summary."""
    verdict = "pass" if ok else "FAIL"
    line = f"[criterion {number}] {name}: {verdict}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

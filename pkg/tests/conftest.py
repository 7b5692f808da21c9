"""Shared pytest hooks: the acceptance suite reports one verdict per criterion."""

VERDICTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store a verdict; a criterion fails if any of its checks fails."""
    prev_ok, prev_detail = VERDICTS.get(criterion, (True, ""))
    VERDICTS[criterion] = (prev_ok and ok, "; ".join(d for d in (prev_detail, detail) if d))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(VERDICTS):
        ok, detail = VERDICTS[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")

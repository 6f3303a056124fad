"""One pass/fail line per acceptance criterion, echoed in the terminal summary."""

LINES: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)

"""Shared store for the one-line-per-criterion acceptance summary."""

LINES = {}


def record(number: int, passed: bool, detail: str):
    status = "PASS" if passed else "FAIL"
    line = f"criterion {number}: {status} - {detail}"
    LINES[number] = line
    print(line)
    return passed

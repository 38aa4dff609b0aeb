"""Collects one PASS/FAIL line per acceptance criterion for the run summary."""

LINES = []


def report(criterion: str, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    LINES.append(line)
    print(line)

"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    RESULTS[criterion] = (bool(ok), detail)
    return bool(ok)


def lines() -> list[str]:
    return [f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}" for n, (ok, detail) in sorted(RESULTS.items())]

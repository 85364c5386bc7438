"""Shared PASS/FAIL ledger for the acceptance suite; printed at session end."""
from __future__ import annotations

LINES: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    LINES[number] = line
    print(line, flush=True)
    return line

"""Append-only JSON-lines run history."""
from __future__ import annotations

import json
from pathlib import Path

SCHEMA_VERSION = 1
VOLATILE_KEYS = ("time",)


class HistoryError(ValueError):
    pass


def write_history(record: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps({"v": SCHEMA_VERSION, **record}, sort_keys=True)
    with open(path, "a") as f:
        f.write(line + "\n")


def read_history(path: str | Path) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise HistoryError(f"{path}:{lineno}: corrupt record ({e.msg})") from e
            if not isinstance(rec, dict) or "v" not in rec:
                raise HistoryError(f"{path}:{lineno}: record lacks schema field 'v'")
            if rec["v"] != SCHEMA_VERSION:
                raise HistoryError(f"{path}:{lineno}: schema version {rec['v']} unsupported")
            records.append(rec)
    return records


def strip_volatile(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in VOLATILE_KEYS} for r in records]

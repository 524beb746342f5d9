"""CSV report schemas."""
from __future__ import annotations

import csv
import io
from pathlib import Path

from .formats import atomic_write

RUN_COLUMNS = (
    "run_id", "seed", "lift_mode", "rank", "alpha", "trainable_params", "total_params",
    "epoch", "train_loss", "val_loss", "val_acc", "wall_ms",
)
VERIFY_COLUMNS = ("suite", "check", "passed", "value", "threshold", "detail")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "pass" if value else "FAIL"
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def to_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        missing = set(columns) - set(row)
        if missing:
            raise ValueError(f"row lacks columns {sorted(missing)}")
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, columns, rows) -> None:
    atomic_write(path, to_csv(columns, rows))


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
        return header, [dict(zip(header, r)) for r in reader]


def validate_csv(path) -> list[str]:
    """Problems found in a report file; empty when it matches a known schema."""
    path = Path(path)
    try:
        header, rows = read_csv(path)
    except (OSError, csv.Error, UnicodeDecodeError) as exc:
        return [f"{path}: unreadable ({exc})"]
    if tuple(header) == RUN_COLUMNS:
        numeric = ("seed", "rank", "alpha", "trainable_params", "total_params", "train_loss", "val_loss", "val_acc", "wall_ms")
    elif tuple(header) == VERIFY_COLUMNS:
        numeric = ()
    else:
        return [f"{path}: header {header} matches no report schema"]
    problems = []
    with open(path, newline="") as fh:
        widths = [len(r) for r in csv.reader(fh)]
    if any(w != len(header) for w in widths):
        problems.append(f"{path}: ragged rows")
    for i, row in enumerate(rows, start=2):
        for col in numeric:
            try:
                float(row[col])
            except (TypeError, ValueError):
                problems.append(f"{path}:{i}: column {col} is not numeric: {row.get(col)!r}")
        if tuple(header) == VERIFY_COLUMNS and row["passed"] not in ("pass", "FAIL", "info"):
            problems.append(f"{path}:{i}: passed must be pass/FAIL/info")
    return problems

"""CSV serialization for evaluation records.

Floats are written with repr (shortest round-trip form), so reruns with
identical seeds produce byte-identical files.
"""

from __future__ import annotations

import csv
import io


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(row[c]) if c in row else "" for c in columns])
    return buf.getvalue()


def write_metrics_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    with open(path, "w", newline="") as f:
        f.write(rows_to_csv(rows, columns))

"""Run measurement plumbing: per-stratum metrics CSV, stable result files,
digests, and the bandwidth summary.

Result files sort rows by the full row value and print floats with nine
significant digits, so a byte-level diff (or the sha256 digest) is a
meaningful equality check between runs, worker counts, and modes.
"""

from __future__ import annotations

import hashlib
import logging

from deltaflow import core

log = logging.getLogger(__name__)

METRICS_HEADER = "stratum,admitted,processed,bytes,ms"


# ---------------------------------------------------------------------------
# Result formatting


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def result_lines(schema, rows) -> list:
    """Sorted, stably formatted text rows (no header) for a result set."""
    ordered = sorted(rows, key=schema.canon)
    return [",".join(format_value(v) for v in row) for row in ordered]


def result_digest(schema, rows) -> str:
    """sha256 over the sorted formatted rows — the run's identity."""
    h = hashlib.sha256()
    for line in result_lines(schema, rows):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def write_result(path, schema, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(name for name, _ in schema.fields) + "\n")
        for line in result_lines(schema, rows):
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# Metrics


def metrics_lines(metrics_rows) -> list:
    lines = [METRICS_HEADER]
    for row in metrics_rows:
        lines.append("%d,%d,%d,%d,%.3f" % (
            row["stratum"], row["admitted"], row["processed"],
            row["bytes"], row["ms"]))
    return lines


def write_metrics(path, metrics_rows):
    with open(path, "w", encoding="utf-8") as fh:
        for line in metrics_lines(metrics_rows):
            fh.write(line + "\n")


def totals(metrics_rows) -> dict:
    """Column sums over the per-stratum rows."""
    out = {"admitted": 0, "processed": 0, "bytes": 0, "ms": 0.0}
    for row in metrics_rows:
        for k in out:
            out[k] += row[k]
    out["strata"] = len(metrics_rows)
    return out


def report_bandwidth(result) -> float:
    """Average bytes per second per worker: everything any worker sent,
    divided by worker count and wall duration."""
    if result.duration_s <= 0.0:
        log.warning("zero-duration run: bandwidth undefined, reporting 0")
        return 0.0
    return result.bytes_total / (result.worker_count * result.duration_s)

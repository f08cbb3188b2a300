"""Evaluation tables as CSV files plus a plain-text summary."""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from graphbid import __version__


@dataclass
class Table:
    header: list[str]
    rows: list[list] = field(default_factory=list)


@dataclass
class MetricsReport:
    config_hash: str
    seed: int
    n_seeds: int
    tables: dict[str, Table] = field(default_factory=dict)

    def provenance(self) -> str:
        """Short id of what produced the report: package version, config and content."""
        digest = hashlib.sha1()
        for name in sorted(self.tables):
            digest.update(name.encode())
            digest.update(_csv_text(self.tables[name]).encode())
        return f"graphbid-{__version__}+cfg.{self.config_hash[:12]}.seed{self.seed}" \
               f".{digest.hexdigest()[:12]}"


def _cell(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def _csv_text(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.header)
    writer.writerows([[_cell(v) for v in row] for row in table.rows])
    return buf.getvalue()


def export_report(report: MetricsReport, out_dir) -> list[Path]:
    """Write ``<table>.csv`` for every table and ``summary.txt``; returns the paths written.

    Output depends only on the report, so exporting the same results twice
    gives byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(report.tables):
        path = out_dir / f"{name}.csv"
        path.write_text(_csv_text(report.tables[name]))
        written.append(path)
    lines = [f"provenance: {report.provenance()}",
             f"config_hash: {report.config_hash}",
             f"seed: {report.seed}",
             f"n_seeds: {report.n_seeds}", ""]
    for name in sorted(report.tables):
        table = report.tables[name]
        lines.append(f"{name}: {len(table.rows)} rows")
        if len(table.rows) <= 24:
            width = [max(len(h), *(len(_short(r[j])) for r in table.rows)) if table.rows
                     else len(h) for j, h in enumerate(table.header)]
            lines.append("  " + "  ".join(h.ljust(w) for h, w in zip(table.header, width)))
            for row in table.rows:
                lines.append("  " + "  ".join(_short(v).ljust(w) for v, w in zip(row, width)))
        lines.append("")
    summary = out_dir / "summary.txt"
    summary.write_text("\n".join(lines))
    written.append(summary)
    return written


def _short(value) -> str:
    return f"{value:.4f}" if isinstance(value, float) and math.isfinite(value) else _cell(value)

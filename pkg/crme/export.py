from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .evaluation import NMSE, EvalReport, EvalRow
from .utils import dump_json


@dataclass
class ReportOptions:
    metric: str = NMSE
    precision: int = 4
    title: str | None = None


def _cell(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_report_csv(report: EvalReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(EvalRow)]
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for row in report.rows:
            data = asdict(row)
            writer.writerow(
                [_cell(data[n]) if isinstance(data[n], float) or data[n] is None else data[n] for n in names]
            )
    return path


def summary_payload(report: EvalReport) -> dict:
    return {
        "metric_domain": report.metric_domain,
        "records": len({row.record_id for row in report.rows}),
        "rows": len(report.rows),
        "skipped": report.skipped,
        "undefined_nmse": report.undefined,
        "aggregates": [asdict(agg) for agg in report.aggregates()],
    }


def write_summary_json(report: EvalReport, path: Path) -> Path:
    return dump_json(path, summary_payload(report))


def _format_header(report: EvalReport, options: ReportOptions) -> list[str]:
    lines: list[str] = []
    lines.append(f"# {options.title or 'Method comparison'}")
    lines.append("")
    lines.append(f"- Metric: median {options.metric.upper()} ({report.metric_domain} domain)")
    records = len({row.record_id for row in report.rows})
    lines.append(f"- Records: {records}")
    if report.skipped:
        lines.append(f"- Skipped: {report.skipped}")
    lines.append("")
    return lines


def report_to_markdown(report: EvalReport, options: ReportOptions | None = None) -> str:
    options = options or ReportOptions()
    lines = _format_header(report, options)
    ks = report.k_values
    lines.append("| method | " + " | ".join(f"K={k}" for k in ks) + " |")
    lines.append("|---" * (len(ks) + 1) + "|")
    for method in report.methods:
        cells = []
        for k in ks:
            value = report.median(options.metric, method=method, k=k)
            cells.append("n/a" if value != value else f"{value:.{options.precision}g}")
        lines.append(f"| {method} | " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def export_report(report: EvalReport, out_dir: Path, options: ReportOptions | None = None) -> list[Path]:
    """Write report.csv, summary.json and report.md under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "report.md"
    table.write_text(report_to_markdown(report, options), encoding="utf-8")
    return [
        write_report_csv(report, out_dir / "report.csv"),
        write_summary_json(report, out_dir / "summary.json"),
        table,
    ]

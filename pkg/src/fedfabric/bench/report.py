"""Report emission: ``summary.csv`` (one row per topic, metric, percentile) and
a short human-readable ``summary.txt``."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

COLUMNS = ("topic", "metric", "percentile", "value")
PCT_KEYS = ("p40", "p50", "p60")

HEADER_NOTE = (
    "spans: serialization=created..serialized, thinker_to_server=serialized..sent_to_server, "
    "server_to_worker=sent_to_server..started_on_worker, time_on_worker=started_on_worker..result_serialized, "
    "worker_to_server=result_serialized..result_posted, server_to_thinker=result_posted..result_received"
)


def csv_rows(percentiles: dict) -> list[tuple[str, str, str, float]]:
    rows = []
    for topic in sorted(percentiles):
        for metric in sorted(percentiles[topic]):
            stats = percentiles[topic][metric]
            for p in PCT_KEYS:
                if p in stats:
                    rows.append((topic, metric, p, float(stats[p])))
    return rows


def write_csv(percentiles: dict, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for topic, metric, pct, value in csv_rows(percentiles):
        w.writerow((topic, metric, pct, repr(value)))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_csv(text: str) -> dict:
    """Inverse of :func:`write_csv` (sample counts are not stored)."""
    out: dict = {}
    for row in csv.DictReader(io.StringIO(text)):
        out.setdefault(row["topic"], {}).setdefault(row["metric"], {})[row["percentile"]] = float(row["value"])
    return out


def read_csv(path: str | Path) -> dict:
    return parse_csv(Path(path).read_text())


def summary_text(metrics: dict) -> str:
    lines = [f"scenario: {metrics.get('scenario', '?')}", HEADER_NOTE, ""]
    for a in metrics.get("assertions", []):
        lines.append(f"[{'PASS' if a['passed'] else 'FAIL'}] {a['name']}: {a.get('detail', '')}")
    if metrics.get("assertions"):
        lines.append("")
    pct = metrics.get("percentiles", {})
    for topic in sorted(pct):
        lines.append(f"{topic}:")
        for metric in sorted(pct[topic]):
            s = pct[topic][metric]
            med = s.get("p50", math.nan)
            lines.append(f"  {metric:<24} p50={med:10.3f}  [p40={s.get('p40', math.nan):.3f}, p60={s.get('p60', math.nan):.3f}]")
    return "\n".join(lines) + "\n"


def emit_report(metrics: dict, out_dir: str | Path | None = None) -> tuple[str, str]:
    """Write summary.csv and summary.txt under ``out_dir``; returns both texts."""
    pct = metrics.get("percentiles", {})
    csv_text = write_csv(pct)
    text = summary_text(metrics)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(csv_text)
        (out / "summary.txt").write_text(text)
    return csv_text, text


def report_dir(run_dir: str | Path) -> str:
    """Regenerate the report of a finished run from its metrics.json."""
    metrics = json.loads((Path(run_dir) / "metrics.json").read_text())
    _, text = emit_report(metrics, run_dir)
    return text

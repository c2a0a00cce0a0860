"""CSV, gnuplot script and markdown summary for a run."""

from __future__ import annotations

import csv
import io
import os

from dlsm.bench.metrics import RunMetrics
from dlsm.errors import IoError

BASE_COLUMNS = ["second", "ops_per_s", "errors", "p50_us", "p90_us", "p99_us", "ltcs", "backlog"]

_PLOT = """\
# gnuplot -p {script}
set datafile separator ","
set key autotitle columnhead
set xlabel "time (s)"
set multiplot layout 2,1 title "{title}"
set ylabel "ops/s"
plot "{csv}" using 1:2 with steps lw 2 title "throughput", \\
     "{csv}" using 1:7 axes x1y2 with steps dt 2 title "LTCs"
set y2tics
set ylabel "latency (us)"
set logscale y
plot "{csv}" using 1:4 with lines title "p50", \\
     "{csv}" using 1:5 with lines title "p90", \\
     "{csv}" using 1:6 with lines title "p99"
unset multiplot
"""


def _fmt(x: float) -> str:
    return f"{x:.1f}"


def render_csv(metrics: RunMetrics) -> str:
    names = sorted({n for row in metrics.seconds for n in row.utilization})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BASE_COLUMNS + [f"util_{n}" for n in names])
    for row in metrics.seconds:
        w.writerow([row.second, row.ops, row.errors, _fmt(row.p50_us), _fmt(row.p90_us), _fmt(row.p99_us),
                    row.ltcs, f"{row.backlog:.2f}"]
                   + [f"{row.utilization.get(n, 0.0):.3f}" for n in names])
    return buf.getvalue()


def render_summary(metrics: RunMetrics, title: str = "benchmark run") -> str:
    p50, p90, p99 = metrics.latency_percentiles()
    lines = [
        f"# {title}",
        "",
        "| metric | value |",
        "|---|---|",
        f"| duration (s) | {metrics.duration:.1f} |",
        f"| completed ops | {metrics.total_ops} |",
        f"| errors | {metrics.errors} |",
        f"| mean throughput (ops/s) | {metrics.throughput():.1f} |",
        f"| p50 / p90 / p99 (us) | {p50:.1f} / {p90:.1f} / {p99:.1f} |",
        f"| mean compaction backlog | {metrics.mean_backlog():.2f} |",
        f"| oracle mismatches | {len(metrics.mismatches)} |",
    ]
    by_kind = metrics.ops_by_kind()
    lines += ["", "| op | count | p50 (us) | p99 (us) |", "|---|---|---|---|"]
    for kind, n in by_kind.items():
        if n:
            k50, _, k99 = metrics.latency_percentiles(kind)
            lines.append(f"| {kind} | {n} | {k50:.1f} | {k99:.1f} |")
    if metrics.events:
        lines += ["", "## Events", ""]
        lines += [f"- t={t:.1f}s {text}" for t, text in metrics.events]
    return "\n".join(lines) + "\n"


def emit_report(metrics: RunMetrics, out_dir: str, title: str = "benchmark run") -> dict:
    """Write ``metrics.csv``, ``plot.gp`` and ``summary.md``; returns their paths.

    Output depends only on ``metrics``, so re-emitting is byte-identical.
    """
    files = {
        "metrics.csv": render_csv(metrics),
        "plot.gp": _PLOT.format(script="plot.gp", csv="metrics.csv", title=title),
        "summary.md": render_summary(metrics, title),
    }
    paths = {}
    try:
        os.makedirs(out_dir, exist_ok=True)
        for name, text in files.items():
            path = os.path.join(out_dir, name)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            paths[name] = path
    except OSError as exc:
        raise IoError(f"cannot write report to {out_dir}: {exc}") from exc
    return paths

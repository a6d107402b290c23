"""Report artifacts: JSON, a Markdown summary and SVG plots."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .rollout import EmptyResultsError, EvalReport  # noqa: E402

REPORT_FILES = ("report.json", "summary.md", "success_in_row.svg", "progress_traces.svg")


def markdown_summary(report: EvalReport) -> str:
    lines = ["# Evaluation summary", ""]
    if report.perturbation:
        lines.append(f"Perturbation: {report.perturbation}")
    if report.phi is not None:
        lines.append(f"Progress threshold: {report.phi:g}")
    lines += [f"Episodes: {len(report.completed)}", "", "| depth | success rate |", "|---|---|"]
    lines += [f"| {k} | {sr:.3f} |" for k, sr in enumerate(report.success_rates, 1)]
    lines += ["", f"Avg. Len.: {report.avg_len:.3f}", ""]
    return "\n".join(lines)


def table_markdown(rows: list[dict], key: str) -> str:
    """Markdown table of success rates and Avg. Len. with one row per ``key`` value."""
    if not rows:
        raise EmptyResultsError("no rows")
    K = max(len(r["success_rates"]) for r in rows)
    head = f"| {key} | " + " | ".join(f"SR({k})" for k in range(1, K + 1)) + " | Avg. Len. |"
    out = [head, "|" + "---|" * (K + 2)]
    for r in rows:
        rates = " | ".join(f"{v:.3f}" for v in r["success_rates"])
        out.append(f"| {r[key]} | {rates} | {r['avg_len']:.3f} |")
    return "\n".join(out) + "\n"


def _bar_chart(report: EvalReport, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    depths = list(range(1, len(report.success_rates) + 1))
    ax.bar(depths, report.success_rates, color="#4c72b0")
    ax.set_xticks(depths)
    ax.set_ylim(0, 1)
    ax.set_xlabel("tasks completed in a row")
    ax.set_ylabel("success rate")
    ax.set_title(f"Avg. Len. {report.avg_len:.2f}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _trace_plot(report: EvalReport, path: Path, max_traces: int = 8) -> None:
    fig, ax = plt.subplots(figsize=(6, 3))
    for i, trace in enumerate(report.traces[:max_traces]):
        (line,) = ax.plot(range(1, len(trace) + 1), trace, lw=1)
        marks = report.injections[i] if i < len(report.injections) else []
        for m in marks:
            ax.axvline(m, color=line.get_color(), ls="--", lw=0.8)
    if report.phi is not None:
        ax.axhline(report.phi, color="k", lw=0.8, ls=":")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("step")
    ax.set_ylabel("predicted progress")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write every report file into ``out_dir``.

    Files are rendered in a scratch directory first; an empty report raises
    before anything is written.
    """
    if not report.success_rates:
        raise EmptyResultsError("report has no results")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".report-", dir=out))
    try:
        (scratch / "report.json").write_text(report.to_json())
        (scratch / "summary.md").write_text(markdown_summary(report))
        # fixed salt so SVG element ids, and hence file bytes, repeat across runs
        with plt.rc_context({"svg.hashsalt": "palm"}):
            _bar_chart(report, scratch / "success_in_row.svg")
            _trace_plot(report, scratch / "progress_traces.svg")
        paths = []
        for name in REPORT_FILES:
            os.replace(scratch / name, out / name)
            paths.append(out / name)
        return paths
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))

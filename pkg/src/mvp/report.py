"""CSV outputs: evaluation reports, loss traces, benchmark tables.

Every file is a header row, data rows, then a summary header and value row
``mean,half_width,n,seed,config_digest``. Reals are written with six
decimal places; timings are stored in microseconds so they keep resolution.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from mvp.augment import BenchRow
from mvp.pipeline import EvalReport, TraceRow

SUMMARY_HEADER = "mean,half_width,n,seed,config_digest"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if not np.isfinite(x):
            return "nan" if np.isnan(x) else ("inf" if x > 0 else "-inf")
        return f"{float(x):.6f}"
    return str(x)


def _write(path, header: Sequence[str], rows: Sequence[Sequence], summary: Sequence) -> None:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    lines += [SUMMARY_HEADER, ",".join(fmt(v) for v in summary)]
    Path(path).write_text("\n".join(lines) + "\n")


def summary_line(report: EvalReport) -> str:
    return ",".join(fmt(v) for v in (report.mean, report.half_width, report.n, report.seed,
                                     report.config_digest))


def emit_report(report, path, seed: int = 0, config_digest: str = "") -> None:
    """Write an :class:`EvalReport` or a loss trace (list of :class:`TraceRow`) as CSV.

    A loss trace is summarised by its mean loss and 95% half-width.
    """
    if isinstance(report, EvalReport):
        rows = [(t.task, t.way, t.shot, t.accuracy, t.lr, t.alpha) for t in report.tasks]
        _write(path, ("task", "way", "shot", "accuracy", "lr", "alpha"), rows,
               (report.mean, report.half_width, report.n, report.seed, report.config_digest))
        return
    trace: list[TraceRow] = list(report)
    losses = np.array([r.loss for r in trace], dtype=np.float64)
    n = losses.size
    mean = float(losses.mean()) if n else float("nan")
    half = 1.96 * losses.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    rows = [(r.episode, r.source, r.way, r.shot, r.loss, r.accuracy) for r in trace]
    _write(path, ("episode", "source", "way", "shot", "loss", "accuracy"), rows,
           (mean, float(half), n, seed, config_digest))


def emit_bench(rows: Sequence[BenchRow], path, seed: int = 0, config_digest: str = "") -> None:
    """Per-task mean microseconds for both methods; the summary holds the mean speed-up."""
    ratios = np.array([r.ratio for r in rows])
    half = 1.96 * ratios.std(ddof=1) / np.sqrt(ratios.size) if ratios.size > 1 else 0.0
    _write(path, ("way", "shot", "batch", "rpr_us", "pixel_us"),
           [(r.way, r.shot, r.batch, r.rpr_seconds * 1e6, r.pixel_seconds * 1e6) for r in rows],
           (float(ratios.mean()), float(half), len(rows), seed, config_digest))

"""Run reports: latency samples, per-thread averages and the files written for plotting."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOGGER = logging.getLogger(__name__)

LATENCY_HEADER = ("request_id", "thread", "kind", "bytes", "latency_us")
THREAD_HEADER = ("thread", "samples", "average_us", "normalized")


@dataclass(frozen=True)
class LatencySample:
    request_id: int
    thread: int
    kind: str
    bytes: int
    latency_us: float
    submit_ts_us: float = 0.0


@dataclass
class RunReport:
    label: str = "run"
    samples: list = field(default_factory=list)
    elapsed_us: float = 0.0
    gc_blocks: int = 0
    write_amplification: float = 0.0
    bytes_written: int = 0
    bytes_read: int = 0
    errors: list = field(default_factory=list)
    threshold_us: float = 2000.0
    stats: dict = field(default_factory=dict)

    @property
    def elapsed_seconds(self):
        return self.elapsed_us / 1e6

    def latencies(self, kind=None):
        return np.array([s.latency_us for s in self.samples if kind is None or s.kind == kind], dtype=float)

    def over_threshold(self, threshold_us=None, kind="write"):
        """Samples slower than the threshold (2ms by default)."""
        threshold = self.threshold_us if threshold_us is None else threshold_us
        return int((self.latencies(kind) > threshold).sum())

    def thread_averages(self, kind="write"):
        per_thread = {}
        for sample in self.samples:
            if kind is None or sample.kind == kind:
                per_thread.setdefault(sample.thread, []).append(sample.latency_us)
        return {thread: float(np.mean(values)) for thread, values in sorted(per_thread.items())}

    def throughput_mb_s(self, kind="write"):
        moved = self.bytes_written if kind == "write" else self.bytes_read
        span = self._span(kind)
        return moved / span / 1.048576 if span else 0.0

    def _span(self, kind):
        chosen = [s for s in self.samples if s.kind == kind]
        if not chosen:
            return 0.0
        first = min(s.submit_ts_us for s in chosen)
        last = max(s.submit_ts_us + s.latency_us for s in chosen)
        return last - first


def normalize(averages):
    """Divide every average by the smallest one, so the fastest thread reads exactly 1.0."""
    if not averages:
        return {}
    floor = min(averages.values())
    if floor <= 0:
        return {key: 1.0 for key in averages}
    return {key: value / floor for key, value in averages.items()}


def render_summary(report):
    lines = [
        f"run: {report.label}",
        f"elapsed: {report.elapsed_seconds:.6f} s",
        f"samples: {len(report.samples)}",
        f"bytes written: {report.bytes_written}",
        f"bytes read: {report.bytes_read}",
        f"blocks garbage collected: {report.gc_blocks}",
        f"write amplification: {report.write_amplification:.4f}",
        f"writes over {report.threshold_us / 1000:g}ms: {report.over_threshold()}",
        f"errors: {len(report.errors)}",
    ]
    normalized = normalize(report.thread_averages())
    if normalized:
        lines.append(f"max normalized thread latency: {max(normalized.values()):.4f}")
    return "\n".join(lines) + "\n"


def emit_report(report, out_dir, prefix=None):
    """
    Write the latency CSV, the per-thread CSV and the summary text.

    param report: RunReport to write.
    param out_dir: directory created when missing.
    param prefix: file name prefix, defaults to the report label.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = prefix or report.label
    latency_path = out / f"{stem}-latency.csv"
    thread_path = out / f"{stem}-threads.csv"
    summary_path = out / f"{stem}-summary.txt"
    with open(latency_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(LATENCY_HEADER)
        for s in report.samples:
            writer.writerow((s.request_id, s.thread, s.kind, s.bytes, f"{s.latency_us:.3f}"))
    averages = report.thread_averages()
    normalized = normalize(averages)
    counts = {}
    for s in report.samples:
        if s.kind == "write":
            counts[s.thread] = counts.get(s.thread, 0) + 1
    with open(thread_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(THREAD_HEADER)
        for thread, average in averages.items():
            writer.writerow((thread, counts[thread], f"{average:.3f}", f"{normalized[thread]:.6f}"))
    summary_path.write_text(render_summary(report), encoding="utf-8")
    LOGGER.info("report %s written to %s", report.label, out)
    return [latency_path, thread_path, summary_path]


def summarize_latency_csv(path, threshold_us=2000.0):
    """Re-read a latency CSV written by emit_report and summarize its write samples."""
    with open(path, newline="", encoding="utf-8") as handle:
        rows = [row for row in csv.DictReader(handle) if row.get("kind", "write") == "write"]
    values = np.array([float(row["latency_us"]) for row in rows], dtype=float)
    if not values.size:
        return {"count": 0, "mean_us": 0.0, "p50_us": 0.0, "p99_us": 0.0, "over_threshold": 0}
    return {
        "count": int(values.size),
        "mean_us": float(values.mean()),
        "p50_us": float(np.percentile(values, 50)),
        "p99_us": float(np.percentile(values, 99)),
        "over_threshold": int((values > threshold_us).sum()),
    }

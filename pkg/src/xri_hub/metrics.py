"""Run-log export and summarization.

Demos and the live hub write two CSVs: events.csv (one row per update,
command, press, outage, assertion) and coherence.csv (one row per link
over the run window). The metrics command folds them back into per-link
noise scores, convergence latencies, and command counts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

from .hub import EventRecorder, SyncHub


class MetricsError(Exception):
    pass


def write_event_csv(recorder: EventRecorder, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EventRecorder.COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(recorder.rows)
    return path


COHERENCE_COLUMNS = [
    "link",
    "window_start_ms",
    "window_end_ms",
    "grace_ms",
    "samples",
    "incoherent_ms",
    "noise_score",
    "spans",
]


def write_coherence_csv(hub: SyncHub, path: Path, window: tuple[int, int]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COHERENCE_COLUMNS)
        for link_id in hub.links:
            report = hub.coherence_report(link_id, window=window)
            tracker = hub.trackers[link_id]
            incoherent = sum(e - s for s, e in report.incoherent_spans)
            writer.writerow(
                [
                    link_id,
                    window[0],
                    window[1],
                    hub.grace_ms,
                    len([s for s in tracker.samples if window[0] <= s[0] < window[1]]),
                    incoherent,
                    repr(report.noise_score),
                    ";".join(f"{s}-{e}" for s, e in report.incoherent_spans),
                ]
            )
    return path


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile; q in (0, 1]."""
    if not values:
        raise MetricsError("no samples")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


@dataclass
class LinkSummary:
    link: str
    delivered: int = 0
    failed: int = 0
    latencies_ms: list[float] = field(default_factory=list)
    noise_score: float | None = None
    incoherent_ms: int | None = None
    window_ms: int | None = None


@dataclass
class RunSummary:
    links: dict[str, LinkSummary]
    updates_applied: int
    updates_dropped: int
    presses: int
    total_rows: int


def load_summary(log_path) -> RunSummary:
    """Read events.csv (+ sibling coherence.csv) from a file or directory."""
    p = Path(log_path)
    if p.is_dir():
        events_path = p / "events.csv"
        coherence_path = p / "coherence.csv"
    else:
        events_path = p
        coherence_path = p.parent / "coherence.csv"
    if not events_path.exists():
        raise MetricsError(f"log not found: {events_path}")

    links: dict[str, LinkSummary] = {}
    applied = dropped = presses = total = 0
    try:
        with open(events_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != EventRecorder.COLUMNS:
                raise MetricsError(f"unexpected event log header in {events_path}")
            for row in reader:
                total += 1
                kind = row["kind"]
                if kind == "command" and row["link"]:
                    summary = links.setdefault(row["link"], LinkSummary(row["link"]))
                    if row["status"] == "delivered":
                        summary.delivered += 1
                        if row["latency_ms"] != "":
                            summary.latencies_ms.append(float(row["latency_ms"]))
                    elif row["status"] == "failed":
                        summary.failed += 1
                elif kind == "update":
                    applied += 1
                elif kind == "update_dropped":
                    dropped += 1
                elif kind == "press":
                    presses += 1
    except (OSError, csv.Error, ValueError) as exc:
        raise MetricsError(f"corrupt event log {events_path}: {exc}") from exc
    if total == 0:
        raise MetricsError("no samples")

    if coherence_path.exists():
        try:
            with open(coherence_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    summary = links.setdefault(row["link"], LinkSummary(row["link"]))
                    summary.noise_score = float(row["noise_score"])
                    summary.incoherent_ms = int(row["incoherent_ms"])
                    summary.window_ms = int(row["window_end_ms"]) - int(row["window_start_ms"])
        except (OSError, csv.Error, ValueError, KeyError) as exc:
            raise MetricsError(f"corrupt coherence log {coherence_path}: {exc}") from exc

    return RunSummary(
        links=links,
        updates_applied=applied,
        updates_dropped=dropped,
        presses=presses,
        total_rows=total,
    )


def render_summary(summary: RunSummary) -> str:
    lines = []
    for link in sorted(summary.links):
        s = summary.links[link]
        lines.append(f"link {link}:")
        if s.noise_score is not None:
            lines.append(
                f"  noise_score {s.noise_score:.4f}"
                f" ({s.incoherent_ms} ms incoherent of {s.window_ms} ms)"
            )
        lines.append(f"  commands: {s.delivered} delivered, {s.failed} failed")
        if s.latencies_ms:
            lines.append(
                "  convergence latency ms:"
                f" p50 {percentile(s.latencies_ms, 0.50):.0f}"
                f" p95 {percentile(s.latencies_ms, 0.95):.0f}"
            )
    lines.append(
        f"updates: {summary.updates_applied} applied, {summary.updates_dropped} dropped"
    )
    lines.append(f"button presses: {summary.presses}")
    lines.append(f"log rows: {summary.total_rows}")
    return "\n".join(lines)

"""Figures for the billing report and simulated runs, written straight to files."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .ledger import LedgerReport, SessionRecord  # noqa: E402

log = logging.getLogger(__name__)

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    log.info("wrote %s", path)
    return path


def earnings_figure(report: LedgerReport, path: str | Path) -> Path:
    """Bar chart of rupees earned per node, summed over sessions."""
    earned: dict[str, int] = {}
    for row in report.rows:
        earned[row.label] = earned.get(row.label, 0) + row.cost
    labels = list(earned) or ["(no nodes)"]
    values = [earned.get(k, 0) / 100 for k in labels]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(labels) + 2), 3.0))
        ax.bar(range(len(labels)), values, color="#4c72b0")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_ylabel("earned (Rs)")
        ax.set_title(f"Earnings per node, total Rs {report.total_minor / 100:.2f}")
        return _save(fig, path)


def timeline_figure(sessions: Sequence[SessionRecord], labels: dict[str, str], path: str | Path, *,
                    origin: float = 0.0, events: Iterable[tuple[float, str]] = ()) -> Path:
    """Gantt-style chart of billed work per executor, with scenario events marked."""
    nodes = list(dict.fromkeys(s.node for s in sessions))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.4 * max(len(nodes), 1) + 1.5))
        for i, node in enumerate(nodes):
            spans = [(s.start - origin, max(s.stop - s.start, 0.05)) for s in sessions if s.node == node]
            ax.broken_barh(spans, (i - 0.35, 0.7), color="#55a868")
        for t, name in events:
            ax.axvline(t, color="#c44e52", lw=0.8, ls="--")
            ax.text(t, len(nodes) - 0.4, name, rotation=90, va="top", ha="right", fontsize=7,
                    color="#c44e52")
        ax.set_yticks(range(len(nodes)))
        ax.set_yticklabels([labels.get(n, n[:8]) for n in nodes])
        ax.set_xlabel("virtual time (s)")
        ax.set_ylim(-0.6, max(len(nodes), 1) - 0.4)
        ax.set_title("Executor work sessions")
        return _save(fig, path)

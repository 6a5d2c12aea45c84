"""Figure rendering for campaign reports.

Renders the aggregated report rows as stacked-bar PNGs next to the CSV:
one figure for outcome fractions, one for failure-mode fractions.  Uses
the Agg backend so it works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 - backend must be pinned first

__all__ = ["render_report_figures"]

_OUTCOME_SERIES = (
    ("frac_unchanged", "Unchanged", "#4c9f70"),
    ("frac_changed", "Changed", "#e0a23c"),
    ("frac_crashed", "Crashed", "#c0504d"),
)

_MODE_SERIES = (
    ("frac_mode_benign", "Benign", "#4c9f70"),
    ("frac_mode_spike_recover", "SpikeRecover", "#7fb3d5"),
    ("frac_mode_spike_degrade", "SpikeDegrade", "#e0a23c"),
    ("frac_mode_silent_degradation", "SilentDegradation", "#8e5ea2"),
    ("frac_mode_gradual_drift", "GradualDrift", "#b5a642"),
    ("frac_mode_crashed", "Crashed", "#c0504d"),
)


def _stacked_bars(rows: Sequence[dict], series, title: str, path: Path) -> None:
    labels = [f"{r['format']}\nr={r['rate']:g}" for r in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.8 * len(rows) + 2.0), 4.0))
    bottom = [0.0] * len(rows)
    for col, label, color in series:
        vals = [r[col] for r in rows]
        ax.bar(x, vals, bottom=bottom, label=label, color=color, width=0.7)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("fraction of runs")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=3, loc="upper center", bbox_to_anchor=(0.5, -0.18))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report_figures(rows: Sequence[dict], out_dir, stem: str = "report") -> list[Path]:
    """Write the report figures; returns the paths (empty if no rows)."""
    if not rows:
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}_outcomes.png", out / f"{stem}_modes.png"]
    _stacked_bars(rows, _OUTCOME_SERIES, "Outcome fractions by format and rate", paths[0])
    _stacked_bars(rows, _MODE_SERIES, "Failure-mode fractions by format and rate", paths[1])
    return paths

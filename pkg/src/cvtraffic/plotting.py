"""Static SVG line charts with byte-stable output."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .measures import WINDOW_MEASURES, parse_time  # noqa: E402

_STABLE = {"svg.hashsalt": "cvtraffic", "svg.fonttype": "none", "path.simplify": False}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_series(series: pd.DataFrame, out: str | Path, link_id: str | None = None, measure: str = "control_delay_s",
                flags: pd.DataFrame | None = None, days: Sequence[int] | None = None) -> None:
    """One link's measure over time; imputed cells hollow, flagged cells marked."""
    if measure not in WINDOW_MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    link_id = link_id or str(series["link_id"].iloc[0])
    s = series[series["link_id"].astype(str) == link_id]
    if s.empty:
        raise ValueError(f"link {link_id!r} not in series")
    t = parse_time(s["window_start"])
    day = (t - (t.min() - t.min() % 86400)) // 86400
    keep = np.ones(len(s), dtype=bool) if days is None else np.isin(day, list(days))
    x = (t[keep] - t[keep].min()) / 3600.0 if keep.any() else t[keep]
    y = s[measure].to_numpy(float)[keep]
    imputed = s["imputed"].to_numpy(int)[keep] == 1
    with plt.rc_context(_STABLE):
        fig, ax = plt.subplots(figsize=(10, 3.5))
        ax.plot(x, y, color="#1f4e79", lw=0.8)
        ax.plot(x[~imputed], y[~imputed], "o", ms=2.5, color="#1f4e79", label="observed")
        ax.plot(x[imputed], y[imputed], "o", ms=2.5, mfc="none", color="#7f7f7f", label="imputed")
        if flags is not None and len(flags):
            f = flags[(flags["link_id"].astype(str) == link_id) & (flags["measure"] == measure) & (flags["flag"] == 1)]
            if len(f):
                ft = parse_time(f["window_start"])
                idx = pd.Index(t[keep]).get_indexer(ft)
                idx = idx[idx >= 0]
                ax.plot(x[idx], y[idx], "x", ms=5, color="#c00000", label="flagged")
        ax.set_xlabel("hours since first window")
        ax.set_ylabel(measure)
        ax.set_title(f"{link_id}: {measure}")
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        _save(fig, out)


def plot_lines(table: pd.DataFrame, x: str, ys: Sequence[str], out: str | Path, title: str = "",
               ylabel: str = "") -> None:
    """Generic multi-line chart (training curves, sensitivity tables)."""
    with plt.rc_context(_STABLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for col in ys:
            ax.plot(table[x].to_numpy(float), table[col].to_numpy(float), marker="o", ms=3, lw=1, label=col)
        ax.set_xlabel(x)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
        _save(fig, out)

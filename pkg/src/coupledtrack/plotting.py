"""Figures for evaluation reports, rendered off-screen to image files."""
from __future__ import annotations

import math

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import MotReport


def range_label(lo: float, hi: float) -> str:
    return f"{lo:g}+ m" if math.isinf(hi) else f"{lo:g}-{hi:g} m"


def plot_by_range(reports: dict[str, MotReport], path, title: str | None = None):
    """MOTP-3D and MOTP-2D per distance range, one bar group per named report."""
    names = list(reports)
    ranges = reports[names[0]].by_range
    x = np.arange(len(ranges))
    width = 0.8 / len(names)
    fig = Figure(figsize=(9, 3.5), layout="constrained")
    FigureCanvasAgg(fig)
    ax3, ax2 = fig.subplots(1, 2)
    top = np.nanmax([r.motp3d for m in reports.values() for r in m.by_range] + [0.0])
    ymax3 = max(top * 1.15, 0.1)
    for k, name in enumerate(names):
        rs = reports[name].by_range
        off = x - 0.4 + width * (k + 0.5)
        for ax, vals, ymax, fmt in ((ax3, [r.motp3d for r in rs], ymax3, "{:.2f}"),
                                    (ax2, [r.motp2d for r in rs], 1.0, "{:.2f}")):
            ax.bar(off, np.nan_to_num(vals), width, label=name)
            for xi, v in zip(off, vals):
                # empty ranges would otherwise look like a perfect zero
                text = "n/a" if math.isnan(v) else fmt.format(v)
                ax.text(xi, (0.0 if math.isnan(v) else v) + 0.01 * ymax, text,
                        ha="center", va="bottom", fontsize=7,
                        color="0.5" if math.isnan(v) else "0.15")
    labels = [range_label(r.lo, r.hi) for r in ranges]
    for ax, ylabel in ((ax3, "MOTP-3D [m] (lower is better)"),
                       (ax2, "MOTP-2D [IoU] (higher is better)")):
        ax.set_xticks(x, labels)
        ax.set_xlabel("object distance")
        ax.set_ylabel(ylabel)
        ax.spines[["top", "right"]].set_visible(False)
    ax3.set_ylim(0, ymax3)
    ax2.set_ylim(0, 1.08)
    if len(names) > 1:
        fig.legend(*ax3.get_legend_handles_labels(), loc="outside lower center",
                   ncols=len(names), frameon=False)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=120, metadata={"Software": None})

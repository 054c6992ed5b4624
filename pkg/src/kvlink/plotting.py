"""Figures for benchmark reports, written to files next to the CSV."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchReport  # noqa: E402

STYLE = {
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def plot_report(report: BenchReport, path, dpi: int = 150) -> None:
    """TTFT per mode (left) and reduction versus full prefill (right)."""
    lengths = report.context_lengths
    with plt.rc_context(STYLE):
        fig, (ax_t, ax_r) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        for i, mode in enumerate(report.modes):
            style = {"marker": "o", "ms": 3, "label": mode, "color": f"C{i}"}
            ax_t.plot(lengths, [report.row(mode, n).mean_ttft_us / 1e3 for n in lengths], **style)
            red = [report.row(mode, n).reduction_pct for n in lengths]
            if mode != "full" and not any(math.isnan(v) for v in red):
                ax_r.plot(lengths, red, **style)
        ax_t.set_yscale("log")
        ax_t.set_xlabel("context length (tokens)")
        ax_t.set_ylabel("TTFT (ms)")
        ax_t.legend()
        ax_r.set_xlabel("context length (tokens)")
        ax_r.set_ylabel("TTFT reduction vs full (%)")
        ax_r.set_ylim(0, 100)
        if ax_r.lines:
            ax_r.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, dpi=dpi)
        plt.close(fig)

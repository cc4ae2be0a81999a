"""Figure rendering for the command-line reports.

All figures are written to files (Agg backend); charts with more than
two coordinates are skipped since there is no faithful flat rendering.
Each function returns the written path or ``None`` when skipped.
"""

from __future__ import annotations

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "figure_rank_map",
    "figure_sections",
    "figure_witness",
    "figure_transport",
]

_DPI = 150


def _extent(chart):
    # imshow extent for ij-indexed grids: axis 0 vertical, axis 1 horizontal
    return (chart.lows[1], chart.highs[1], chart.lows[0], chart.highs[0])


def figure_rank_map(report, path):
    """Final fiber rank per node, with irregular nodes hatched out."""
    chart = report.chart
    if chart.ndim > 2:
        return None
    field = report.field
    ranks = np.where(field.mask, field.ranks, np.nan).astype(float)
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    if chart.ndim == 1:
        xs = chart.axes()[0]
        ax.step(xs, ranks, where="mid")
        ax.set_xlabel(chart.coords[0])
        ax.set_ylabel("fiber rank")
        ax.set_ylim(-0.5, field.dimension + 0.5)
    else:
        cmap = plt.get_cmap("viridis", field.dimension + 1)
        im = ax.imshow(ranks.T, origin="lower", aspect="auto",
                       extent=(chart.lows[0], chart.highs[0],
                               chart.lows[1], chart.highs[1]),
                       cmap=cmap, vmin=-0.5, vmax=field.dimension + 0.5)
        fig.colorbar(im, ax=ax, ticks=range(field.dimension + 1),
                     label="fiber rank")
        ax.set_xlabel(chart.coords[0])
        ax.set_ylabel(chart.coords[1])
    regular = 100.0 * field.regular_fraction()
    ax.set_title(f"stable subbundle rank (regular nodes: {regular:.1f}%)")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def figure_sections(sections, chart, path):
    """Component heatmaps (or line plots) of the parallel sections."""
    if chart.ndim > 2 or not sections:
        return None
    n_sec = len(sections)
    n_comp = sections[0].rank
    fig, axes = plt.subplots(n_sec, n_comp,
                             figsize=(3.0 * n_comp, 2.6 * n_sec),
                             squeeze=False)
    for r, section in enumerate(sections):
        vals = section.sample()
        for c in range(n_comp):
            ax = axes[r][c]
            comp = vals[..., c]
            if chart.ndim == 1:
                ax.plot(chart.axes()[0], comp)
                ax.set_xlabel(chart.coords[0])
            else:
                im = ax.imshow(comp.T, origin="lower", aspect="auto",
                               extent=(chart.lows[0], chart.highs[0],
                                       chart.lows[1], chart.highs[1]))
                fig.colorbar(im, ax=ax, shrink=0.85)
                ax.set_xlabel(chart.coords[0])
                ax.set_ylabel(chart.coords[1])
            ax.set_title(f"section {r + 1}, component {c + 1}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def figure_witness(witness_grid, chart, path):
    """Smallest eigenvalue of the witness tensor across the chart."""
    if chart.ndim > 2:
        return None
    eigs = np.linalg.eigvalsh(witness_grid)[..., 0]
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    if chart.ndim == 1:
        ax.plot(chart.axes()[0], eigs)
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel(chart.coords[0])
        ax.set_ylabel("min eigenvalue")
    else:
        im = ax.imshow(eigs.T, origin="lower", aspect="auto",
                       extent=(chart.lows[0], chart.highs[0],
                               chart.lows[1], chart.highs[1]))
        fig.colorbar(im, ax=ax, label="min eigenvalue")
        ax.set_xlabel(chart.coords[0])
        ax.set_ylabel(chart.coords[1])
    ax.set_title("witness tensor: smallest eigenvalue")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def figure_transport(chart, vertices, path):
    """The transport polyline drawn over the chart box."""
    if chart.ndim != 2:
        return None
    vertices = np.asarray(vertices, dtype=float)
    fig, ax = plt.subplots(figsize=(5.4, 4.8))
    ax.plot(vertices[:, 0], vertices[:, 1], "o-", ms=4)
    ax.plot(vertices[0, 0], vertices[0, 1], "s", ms=8, mfc="none", mec="C3")
    ax.set_xlim(chart.lows[0], chart.highs[0])
    ax.set_ylim(chart.lows[1], chart.highs[1])
    ax.set_xlabel(chart.coords[0])
    ax.set_ylabel(chart.coords[1])
    ax.set_title("transport path")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path

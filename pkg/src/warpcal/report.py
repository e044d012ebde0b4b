"""Static report rendering: posterior heatmaps, energy traces, CV diagnostics.

Figures are built through the object-oriented matplotlib API and written as
SVG with a fixed hash salt and no date metadata, so regenerating a report
from unchanged inputs is byte-identical.
"""

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

_SVG_RC = {"svg.hashsalt": "warpcal", "svg.fonttype": "path"}


def save_svg(fig: Figure, path) -> None:
    """Write a figure as deterministic SVG (no date metadata, fixed hash salt)."""
    FigureCanvasSVG(fig)
    with matplotlib.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def posterior_density_figure(joint, truth=None, title: str = "") -> Figure:
    """Heatmap of the 2-D posterior density over the input box, with an
    optional truth marker (drawn as a magenta plus)."""
    fig = Figure(figsize=(5.0, 4.2))
    ax = fig.add_subplot(111)
    extent = (joint.x_grid[0], joint.x_grid[-1], joint.y_grid[0], joint.y_grid[-1])
    im = ax.imshow(
        joint.density.T,
        origin="lower",
        extent=extent,
        aspect="auto",
        cmap="viridis",
    )
    fig.colorbar(im, ax=ax, label="posterior density")
    if truth is not None:
        ax.plot([truth[0]], [truth[1]], marker="+", color="magenta", markersize=14,
                markeredgewidth=2.5, linestyle="none", label="truth")
        ax.legend(loc="upper right", framealpha=0.6)
    ax.set_xlabel(joint.x_name)
    ax.set_ylabel(joint.y_name)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig


def marginal_figure(params, title: str = "") -> Figure:
    """One panel per parameter: KDE curve, mode line, 95% interval band."""
    n = len(params)
    fig = Figure(figsize=(4.0 * n, 3.2))
    axes = fig.subplots(1, n, squeeze=False)[0]
    for ax, param in zip(axes, params):
        ax.plot(param.grid, param.density, color="tab:blue")
        ax.axvline(param.mode, color="tab:red", linestyle="--", linewidth=1.0)
        ax.axvspan(param.ci_low, param.ci_high, color="tab:blue", alpha=0.15)
        ax.set_xlabel(param.name)
        ax.set_yticks([])
    axes[0].set_ylabel("density")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return fig


def energy_trace_figure(traces: dict) -> Figure:
    """Registration energy per iteration for every run, on a log scale."""
    fig = Figure(figsize=(5.5, 4.0))
    ax = fig.add_subplot(111)
    for name in sorted(traces):
        trace = np.asarray(traces[name], dtype=float)
        ax.plot(np.arange(len(trace)), np.maximum(trace, 1e-300), linewidth=0.7, alpha=0.6)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("registration energy")
    ax.set_title(f"energy traces ({len(traces)} registrations)")
    fig.tight_layout()
    return fig


def cv_figure(cv_reports: dict) -> Figure:
    """Cross-validation scores per metric and transform candidate."""
    metrics = sorted(cv_reports)
    fig = Figure(figsize=(4.0 * max(len(metrics), 1), 3.4))
    axes = fig.subplots(1, len(metrics), squeeze=False)[0]
    for ax, metric in zip(axes, metrics):
        report = cv_reports[metric]
        labels = [c["transform"] for c in report["candidates"]]
        rmse = [c["rmse"] for c in report["candidates"]]
        coverage = [c["coverage"] for c in report["candidates"]]
        x = np.arange(len(labels))
        ax.bar(x - 0.2, rmse, width=0.4, label="RMSE", color="tab:blue")
        twin = ax.twinx()
        twin.bar(x + 0.2, coverage, width=0.4, label="coverage", color="tab:orange")
        twin.axhline(0.95, color="tab:orange", linestyle=":", linewidth=1.0)
        twin.set_ylim(0.0, 1.05)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_title(f"{metric} (selected: {report['selected']})")
        ax.set_ylabel("RMSE")
        twin.set_ylabel("95% coverage")
    fig.tight_layout()
    return fig

"""Matplotlib figures written next to the delimited reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .coverage import pct  # noqa: E402

BY_FUNCTION = "coverage_by_function.png"
PROGRESS = "coverage_progress.png"


def plot_by_function(report, path: Path) -> None:
    funcs = report.functions
    names = [f.function for f in funcs]
    st = [pct(f.statements_covered, f.statements_total) or 0.0 for f in funcs]
    br = [pct(f.branches_covered, f.branches_total) or 0.0 for f in funcs]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.28 * len(names) + 2), 4.5))
    xs = range(len(names))
    ax.bar([x - 0.2 for x in xs], st, width=0.4, label="statement")
    ax.bar([x + 0.2 for x in xs], br, width=0.4, label="branch")
    ax.axhline(90.0, color="tab:blue", linestyle=":", linewidth=1)
    ax.axhline(80.0, color="tab:orange", linestyle=":", linewidth=1)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_ylim(0, 105)
    ax.set_ylabel("coverage (%)")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_progress(functions, path: Path) -> None:
    """Branch directions covered by each session against executions used."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for r in functions:
        if r.progress:
            xs = [p[0] for p in r.progress]
            ys = [p[2] for p in r.progress]
            ax.step(xs, ys, where="post", linewidth=0.8)
    ax.set_xscale("symlog")
    ax.set_xlabel("executions")
    ax.set_ylabel("branch directions covered")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_figures(result, out: Path) -> list[Path]:
    paths = [out / BY_FUNCTION, out / PROGRESS]
    plot_by_function(result.report, paths[0])
    plot_progress(result.functions, paths[1])
    return paths

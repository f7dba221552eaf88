"""Static figures for the report paths (saved to files, SVG by default)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .tasks import MAZE_SYMBOLS, SUDOKU_BLANK

_MAZE_COLORS = {
    "#": (0.1, 0.1, 0.1),
    ".": (1.0, 1.0, 1.0),
    "*": (0.2, 0.53, 1.0),
    "S": (0.87, 0.13, 0.13),
    "G": (0.13, 0.8, 0.13),
    "?": (0.5, 0.5, 0.5),
}


def save(fig, path):
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def render_freeze_figure(report: dict, path):
    """Totals and per-update content-change series, normal vs freeze."""
    fig, (ax_tot, ax_series) = plt.subplots(1, 2, figsize=(9, 3.2))
    labels = ["normal", "freeze"]
    totals = [report["normal"]["total_mean"], report["freeze"]["total_mean"]]
    ax_tot.bar(labels, totals, color=["tab:blue", "tab:orange"])
    ax_tot.set_ylabel(f"total content changes (z_{report['normal']['measured_state']})")
    ax_tot.set_title(f"{report['kind']}: {report['which']}")
    for label, color in zip(labels, ("tab:blue", "tab:orange")):
        series = report[label]["per_update_mean"]
        ax_series.plot(range(1, len(series) + 1), series, label=label, color=color)
    ax_series.set_xlabel("update index")
    ax_series.set_ylabel("content change per update")
    ax_series.legend()
    save(fig, path)


def render_contrast_figure(summary: list, path, metrics=None):
    """Grouped bars with CI whiskers, one panel per metric."""
    metrics = metrics or sorted({row["metric"] for row in summary})
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.2), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        rows = [r for r in summary if r["metric"] == metric]
        klasses = sorted({r["klass"] for r in rows})
        layers = sorted({r["layer"] for r in rows})
        width = 0.8 / max(len(klasses), 1)
        for i, klass in enumerate(klasses):
            xs, ys, es = [], [], []
            for j, layer in enumerate(layers):
                match = [r for r in rows if r["klass"] == klass and r["layer"] == layer]
                if match:
                    xs.append(j + i * width)
                    ys.append(match[0]["mean"])
                    es.append(match[0]["ci95"])
            ax.bar(xs, ys, width=width, yerr=es, capsize=2, label=klass)
        ax.axhline(0.0, color="gray", lw=0.5)
        ax.set_xticks([j + width * (len(klasses) - 1) / 2 for j in range(len(layers))])
        ax.set_xticklabels([f"L{l}" for l in layers])
        ax.set_title(metric)
    axes[0][0].legend(fontsize=7)
    save(fig, path)


def render_training_curves(metrics: list, path):
    fig, ax_loss = plt.subplots(figsize=(5, 3.2))
    steps = [r["step"] for r in metrics]
    ax_loss.plot(steps, [r["loss"] for r in metrics], color="tab:red", label="loss")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss", color="tab:red")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(steps, [r["exact_match"] for r in metrics], color="tab:blue", label="exact match")
    ax_acc.set_ylabel("exact match", color="tab:blue")
    ax_acc.set_ylim(0, 1.05)
    save(fig, path)


def render_direction_figure(report: dict, path):
    """Mean exact match with CI whiskers for the compared injection variants."""
    fig, ax = plt.subplots(figsize=(4, 3.2))
    names = [v["variant"] for v in report["variants"]]
    means = [v["mean"] for v in report["variants"]]
    cis = [v["ci95"] for v in report["variants"]]
    ax.bar(names, means, yerr=cis, capsize=3, color="tab:blue")
    ax.set_ylabel("exact match")
    ax.set_ylim(0, 1.05)
    ax.set_title("injection variants" + (" (expected direction)" if report["expected_direction"] else ""))
    save(fig, path)


def _sudoku_rgb(grid: np.ndarray, side: int) -> np.ndarray:
    img = np.ones((side, side, 3))
    img[grid.reshape(side, side) == SUDOKU_BLANK] = (0.75, 0.75, 0.75)
    return img


def render_decoded_grids(trace, puzzle, path, max_panels: int = 6):
    """Decoded-state panels across sub-steps (both states side by side)."""
    side = puzzle.side
    keys = sorted(trace.records[0].decoded)
    picks = np.linspace(0, len(trace.records) - 1, min(max_panels, len(trace.records)), dtype=int)
    fig, axes = plt.subplots(len(keys), len(picks), figsize=(1.6 * len(picks), 1.6 * len(keys)),
                             squeeze=False)
    for row, key in enumerate(keys):
        for col, t in enumerate(picks):
            ax = axes[row][col]
            grid = trace.records[t].decoded[key]
            if puzzle.kind == "sudoku":
                ax.imshow(_sudoku_rgb(grid, side))
                if side <= 9:
                    for idx, val in enumerate(grid):
                        if val != SUDOKU_BLANK:
                            ax.text(idx % side, idx // side, str(int(val)),
                                    ha="center", va="center", fontsize=5)
            else:
                img = np.zeros((side, side, 3))
                for idx, tok in enumerate(grid):
                    img[idx // side, idx % side] = _MAZE_COLORS[MAZE_SYMBOLS[int(tok)]]
                ax.imshow(img)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(f"t={trace.records[t].t}", fontsize=6)
            if col == 0:
                ax.set_ylabel(f"z_{key}" if key != "z" else "z", fontsize=7)
    save(fig, path)

"""Report figures. Every function writes one image file and returns its path."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.0),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_complexity(report, path) -> Path:
    """Per-layer parameter and FLOP bars."""
    rows = report.rows
    names = [r.name.replace(".blocks", ".b") for r in rows]
    y = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, sharey=True, figsize=(9.0, max(3.0, 0.22 * len(rows) + 1)))
        ax1.barh(y, [r.params / 1e6 for r in rows], color="tab:blue")
        ax1.set_xlabel("parameters (M)")
        ax2.barh(y, [r.flops / 1e9 for r in rows], color="tab:orange")
        ax2.set_xlabel(f"FLOPs (G, {report.convention})")
        ax1.set_yticks(y, names)
        ax1.invert_yaxis()
        fig.suptitle(f"total {report.total_params / 1e6:.2f} M params, {report.total_flops / 1e9:.3f} G FLOPs")
        return _save(fig, path)


def plot_trace(trace, path) -> Path:
    """U per evaluation (feasible vs not) with the best-so-far curve."""
    idx = np.arange(len(trace))
    U = np.array([e.U for e in trace])
    ok = np.array([e.feasible for e in trace], dtype=bool)
    best = np.full(len(trace), np.nan)
    cur = -np.inf
    for i, e in enumerate(trace):
        if e.feasible:
            cur = max(cur, e.U)
        if np.isfinite(cur):
            best[i] = cur
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(idx[~ok], U[~ok], s=6, color="0.7", label="violates constraints")
        ax.scatter(idx[ok], U[ok], s=6, color="tab:blue", label="feasible")
        ax.plot(idx, best, color="tab:red", lw=1.5, label="best feasible")
        ax.set_xlabel("evaluation")
        ax.set_ylabel("U")
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_latency(reports, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for r in reports:
            ax.hist(r.samples_ms, bins=min(50, max(5, r.n_runs // 10)), alpha=0.6,
                    label=f"batch {r.batch_size} (mean {r.mean_ms:.2f} ms)")
        ax.set_xlabel("latency (ms)")
        ax.set_ylabel("runs")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_loss(losses, path, num_classes: int = 4) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.arange(len(losses)), losses, color="tab:blue")
        ax.axhline(np.log(num_classes), color="0.5", ls="--", lw=1, label=f"ln {num_classes}")
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.legend(frameon=False)
        return _save(fig, path)

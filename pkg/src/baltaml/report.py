"""Delimited text blocks and matplotlib figures for eval and sweep reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BEGIN = "=== BEGIN {} ==="
END = "=== END {} ==="


def block(name: str, rows: dict) -> str:
    """``key=value`` lines between BEGIN/END markers, floats at 6 significant digits."""
    lines = [BEGIN.format(name)]
    for k, v in rows.items():
        lines.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    lines.append(END.format(name))
    return "\n".join(lines)


def eval_figures(report, out_dir, prefix: str = "eval") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(report.accuracies, bins=20, range=(0, 1), color="tab:blue", alpha=0.8)
    ax.axvline(report.mean_accuracy, color="k", lw=1)
    ax.set_xlabel("episode accuracy")
    ax.set_ylabel("episodes")
    ax.set_title(f"{report.mode} (S={report.samples}): {report.mean_accuracy:.3f} ± {report.ci95:.3f}")
    paths.append(_save(fig, out / f"{prefix}_accuracy.png"))

    if report.class_acc_vs_count:
        n, a = np.array(report.class_acc_vs_count, dtype=float).T
        fig, ax = plt.subplots(figsize=(5, 3.5))
        _binned(ax, n, a)
        ax.set_xlabel("class support size")
        ax.set_ylabel("class accuracy")
        paths.append(_save(fig, out / f"{prefix}_class_accuracy.png"))

    if report.omega_vs_count:
        _, n, w = np.array(report.omega_vs_count, dtype=float).T
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter(n, w, s=4, alpha=0.3)
        _binned(ax, n, w)
        ax.set_xlabel("class support size")
        ax.set_ylabel("E[omega]")
        paths.append(_save(fig, out / f"{prefix}_omega.png"))

    if report.task_gamma:
        g = np.asarray(report.task_gamma)
        s = np.asarray(report.task_sizes)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for l in range(g.shape[1]):
            ax.scatter(s, g[:, l], s=5, alpha=0.5, label=f"layer {l}")
        ax.set_xlabel("task support size")
        ax.set_ylabel("E[gamma]")
        ax.legend(fontsize=7)
        paths.append(_save(fig, out / f"{prefix}_gamma.png"))
    return paths


def sweep_figure(rows: list[dict], out_dir, metric: str = "mean_accuracy") -> Path | None:
    ok = [r for r in rows if r.get("status") == "ok" and metric in r]
    if not ok:
        return None
    cells = sorted({r["cell"] for r in ok})
    means = [np.mean([r[metric] for r in ok if r["cell"] == c]) for c in cells]
    errs = [np.mean([r.get("ci95", 0.0) for r in ok if r["cell"] == c]) for c in cells]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(cells) + 2), 3.5))
    ax.bar(range(len(cells)), means, yerr=errs, color="tab:gray")
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels(cells, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    return _save(fig, Path(out_dir) / f"sweep_{metric}.png")


def _binned(ax, x, y, bins: int = 10):
    edges = np.unique(np.quantile(x, np.linspace(0, 1, bins + 1)))
    if len(edges) < 2:
        ax.plot(x.mean(), y.mean(), "o-", color="tab:red")
        return
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
    cx = [x[idx == i].mean() for i in range(len(edges) - 1) if np.any(idx == i)]
    cy = [y[idx == i].mean() for i in range(len(edges) - 1) if np.any(idx == i)]
    ax.plot(cx, cy, "o-", color="tab:red")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path

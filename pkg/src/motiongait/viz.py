"""Figure rendering for the report paths: rank-1 heatmaps per condition and
the training loss curve, written as PNG next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def save_rank1_heatmaps(report: EvalReport, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, result in report.conditions.items():
        fig, ax = plt.subplots(figsize=(5.2, 4.4))
        cmap = plt.get_cmap("viridis").copy()
        cmap.set_bad(color="lightgray")
        shown = np.ma.masked_invalid(result.matrix)
        im = ax.imshow(shown, vmin=0, vmax=100, cmap=cmap)
        ticks = range(len(report.views))
        ax.set_xticks(ticks, [str(v) for v in report.views], rotation=45,
                      fontsize=7)
        ax.set_yticks(ticks, [str(v) for v in report.views], fontsize=7)
        ax.set_xlabel("gallery view (deg)")
        ax.set_ylabel("probe view (deg)")
        mean = result.mean
        title = f"rank-1 (%), {name}"
        if not np.isnan(mean):
            title += f", mean {mean:.1f}"
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.85)
        fig.tight_layout()
        path = out_dir / f"rank1_{name.lower()}.png"
        fig.savefig(path, dpi=130)
        plt.close(fig)
        paths.append(path)
    return paths


def save_loss_curve(log: dict[str, np.ndarray], out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    it = log["iteration"]
    for key, style in (("joint", "-"), ("triplet", "--"), ("ce", ":")):
        ax.plot(it, log[key], style, label=key, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if np.all(np.asarray(log["joint"]) > 0):
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path

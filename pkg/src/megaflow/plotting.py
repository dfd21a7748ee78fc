"""Matplotlib figures written next to the evaluation and training reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from megaflow.flowio import error_heatmap, flow_to_color  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _figure(width=4.5, height=None, **kw):
    golden = (math.sqrt(5) - 1) / 2
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height or width * golden), **kw)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(history, path, smooth=25):
    loss = np.array([h["loss"] for h in history], dtype=float)
    fig, ax = _figure()
    ax.plot(loss, lw=0.6, alpha=0.4, color="0.4", label="per step")
    if len(loss) >= smooth:
        k = np.ones(smooth) / smooth
        ax.plot(np.arange(smooth - 1, len(loss)), np.convolve(loss, k, mode="valid"), color="C0", label=f"mean of {smooth}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_bucket_epe(summary, path):
    names = list(summary["epe_by_bucket"])
    vals = [summary["epe_by_bucket"][n] for n in names]
    counts = [summary["bucket_count"][n] for n in names]
    fig, ax = _figure()
    bars = ax.bar(names, [0 if math.isnan(v) else v for v in vals], color=["C0", "C1", "C2"])
    for bar, v, c in zip(bars, vals, counts):
        label = "n/a" if math.isnan(v) else f"{v:.2f}"
        ax.annotate(f"{label}\n({c} px)", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=7)
    ax.axhline(summary["epe"], color="k", lw=0.8, ls="--", label=f"all: {summary['epe']:.2f}")
    ax.set_ylabel("EPE (px)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_iteration_curve(per_iter, path):
    """Mean EPE after each refinement iteration; ``per_iter`` is samples x K."""
    arr = np.asarray(per_iter, dtype=float)
    k = np.arange(1, arr.shape[1] + 1)
    fig, ax = _figure()
    ax.plot(k, arr.T, color="0.6", lw=0.4, alpha=0.5)
    ax.plot(k, arr.mean(0), "o-", color="C3", label="mean")
    ax.set_xlabel("refinement iteration")
    ax.set_ylabel("EPE (px)")
    ax.set_xticks(k)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_delta_curve(result, path):
    ks = list(result["delta"])
    fig, ax = _figure()
    ax.plot(ks, [result["delta"][k] for k in ks], "o-")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("threshold (px)")
    ax.set_ylabel("points within threshold (%)")
    ax.set_ylim(0, 102)
    ax.set_title(f"delta_avg = {result['delta_avg']:.1f}")
    return _save(fig, path)


def plot_flow_panel(frame, pred, gt, path, title=None):
    """Frame, predicted flow, gt flow and error map side by side."""
    vmax = max(float(np.linalg.norm(gt.to_numpy(), axis=-1).max()), 1e-6)
    err, legend, _ = error_heatmap(pred, gt)
    fig, axes = _figure(10, 2.8, ncols=4)
    panels = [(frame, "frame"), (flow_to_color(pred, vmax), "prediction"),
              (flow_to_color(gt, vmax), "ground truth"), (err, f"EPE (max {legend['vmax']:.2f} px)")]
    for ax, (img, name) in zip(axes, panels):
        ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    return _save(fig, path)

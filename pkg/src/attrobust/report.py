"""Report rendering: tables (CSV + JSON), plots, qualitative heatmap panels."""

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from attrobust.models import SOFTPLUS, input_gradient
from attrobust.utils import atomic_open, write_json

log = logging.getLogger(__name__)


def render_report(report, out_dir, bundles=None, test_ds=None, cfg=None):
    """Write report.csv / report.json and any plots the records support."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", {"rows": report.rows, "metadata": report.metadata})
    if report.rows:
        fields = sorted({k for row in report.rows for k in row}, key=_field_order)
        with atomic_open(out / "report.csv") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(report.rows)

    plot_dir = out / "plots"
    try:
        _plot_eps_sweep(report, plot_dir)
        _plot_metric_boxes(report, plot_dir)
    except Exception:
        log.exception("plot rendering failed")
    if bundles and test_ds is not None and cfg is not None:
        try:
            render_qualitative_panel(bundles, test_ds, plot_dir / "qualitative.png", cfg)
        except Exception:
            log.exception("qualitative panel failed")
    return out


def _field_order(name):
    order = ["name", "kind", "clean_acc", "pgd40_acc", "spsa_acc", "ifia_topk_in",
             "ifia_kendall", "cosine_alignment", "targeted_gain_frac",
             "targeted_sim_original", "gt_known_loc", "top1_loc", "top1_acc"]
    return (order.index(name), name) if name in order else (len(order), name)


def _plot_eps_sweep(report, plot_dir):
    """One curve per model: post-attack top-k intersection across radii."""
    series = {name: recs for (name, stage), recs in report.records.items()
              if stage == "eps_sweep"}
    if not series:
        return
    plot_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for metric, ax in zip(("topk_in", "kendall"), axes):
        for name, recs in sorted(series.items()):
            eps = [float(r["epsilon"]) * 255 for r in recs]
            vals = [100 * float(r[metric]) for r in recs]
            ax.plot(eps, vals, marker="o", label=name)
        ax.set_xlabel("attack radius (x 1/255)")
        ax.set_ylabel(f"{metric} (%)")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(plot_dir / "eps_sweep.png", dpi=120)
    plt.close(fig)


def _plot_metric_boxes(report, plot_dir):
    """Per-model spread of the attribution-robustness measures."""
    per_model = {}
    for (name, stage), recs in report.records.items():
        if stage != "ifia":
            continue
        active = [r for r in recs if not int(r["skipped"])]
        if active:
            per_model[name] = ([100 * float(r["topk_in"]) for r in active],
                               [100 * float(r["kendall"]) for r in active])
    if not per_model:
        return
    plot_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(per_model)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for i, title in enumerate(("top-k intersection", "rank correlation")):
        axes[i].boxplot([per_model[n][i] for n in names], tick_labels=names)
        axes[i].set_ylabel(f"{title} (%)")
        axes[i].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(plot_dir / "ifia_boxplot.png", dpi=120)
    plt.close(fig)


def render_qualitative_panel(bundles, test_ds, path, cfg, n_cols=6):
    """Images in the top row, one row of gradient heatmaps per model below."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    idx = np.arange(min(n_cols, len(test_ds)))
    x = torch.from_numpy(test_ds.images[idx])
    y = torch.from_numpy(test_ds.labels[idx])
    names = sorted(bundles)
    fig, axes = plt.subplots(1 + len(names), len(idx),
                             figsize=(1.6 * len(idx), 1.6 * (1 + len(names))))
    axes = np.atleast_2d(axes)
    for j in range(len(idx)):
        axes[0, j].imshow(np.transpose(test_ds.images[idx[j]], (1, 2, 0)))
        axes[0, j].set_title(f"y={int(y[j])}", fontsize=8)
    for i, name in enumerate(names):
        bundle = bundles[name]
        with bundle.activation(SOFTPLUS):
            g = input_gradient(bundle, x, y, create_graph=False).detach().numpy()
        for j in range(len(idx)):
            hm = np.abs(g[j]).mean(axis=0)
            axes[i + 1, j].imshow(hm, cmap="inferno")
        axes[i + 1, 0].set_ylabel(name, fontsize=8)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

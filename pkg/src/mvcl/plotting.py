"""Report figures, rendered to files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width=5.0, height=None):
    golden = (np.sqrt(5) - 1) / 2
    return plt.subplots(figsize=(width, height or width * golden))


def plot_fraction_sweep(rows, path, metric="accuracy"):
    """Mean +/- std of ``metric`` against label fraction, one line per protocol.

    ``rows`` are dicts with ``protocol``, ``fraction``, ``<metric>_mean`` and
    ``<metric>_std`` keys (the report CSV rows).
    """
    with plt.rc_context(RC):
        fig, ax = _figure()
        for protocol in sorted({r["protocol"] for r in rows}):
            sub = sorted((r for r in rows if r["protocol"] == protocol), key=lambda r: float(r["fraction"]))
            x = np.array([float(r["fraction"]) * 100 for r in sub])
            y = np.array([float(r[f"{metric}_mean"]) for r in sub])
            e = np.array([float(r[f"{metric}_std"]) for r in sub])
            ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=protocol)
        ax.set_xscale("log")
        ax.set_xlabel("labelled training samples (%)")
        ax.set_ylabel(metric)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_loss_curve(log_rows, path):
    with plt.rc_context(RC):
        fig, ax = _figure()
        steps = [r["step"] for r in log_rows]
        ax.plot(steps, [r["loss"] for r in log_rows], lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("contrastive loss")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_embedding(pca_rows, path, max_lesions=30):
    """2D PCA scatter: colour = lesion, marker = view."""
    markers = "o^sDv<>Px"
    lesions = sorted({r["lesion_id"] for r in pca_rows})[:max_lesions]
    views = sorted({int(r["view_id"]) for r in pca_rows})
    cmap = plt.get_cmap("tab20", max(len(lesions), 1))
    with plt.rc_context(RC):
        fig, ax = _figure(5.0, 5.0)
        for r in pca_rows:
            if r["lesion_id"] not in lesions:
                continue
            ax.scatter(float(r["x"]), float(r["y"]), s=18,
                       color=cmap(lesions.index(r["lesion_id"])),
                       marker=markers[views.index(int(r["view_id"])) % len(markers)])
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)

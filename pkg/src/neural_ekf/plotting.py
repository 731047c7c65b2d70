"""Static figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(history: list[dict], path) -> Path:
    epochs = [r["epoch"] for r in history]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.6))
    ax0.plot(epochs, [r["loss"] for r in history], color="k")
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("negative ELBO")
    for key in ("reconstruction", "overshoot", "kl"):
        ax1.plot(epochs, [r[key] for r in history], label=key)
    ax1.set_xlabel("epoch")
    ax1.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_prediction(t, actual, mean, variance, names, path, title: str = "") -> Path:
    """One panel per channel: measurement, predicted mean and a 2-sigma band."""
    actual, mean, variance = (np.asarray(a, float) for a in (actual, mean, variance))
    d = mean.shape[1]
    fig, axes = plt.subplots(d, 1, figsize=(9, 2.4 * d), sharex=True, squeeze=False)
    sd = np.sqrt(np.clip(variance, 0.0, None))
    for j, ax in enumerate(axes[:, 0]):
        if actual is not None and actual.size:
            ax.plot(t, actual[:, j], color="k", lw=1.0, label="measured")
        ax.plot(t, mean[:, j], color="tab:red", lw=1.0, ls="--", label="predicted")
        ax.fill_between(t, mean[:, j] - 2 * sd[:, j], mean[:, j] + 2 * sd[:, j], color="tab:red", alpha=0.2)
        ax.set_ylabel(names[j])
    axes[0, 0].legend(loc="upper right")
    axes[-1, 0].set_xlabel("time [s]")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_clusters(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    P = report.projection
    for j, members in enumerate(report.clusters()):
        idx = [report.labels.index(m) for m in members]
        y = P[idx, 1] if P.shape[1] > 1 else np.zeros(len(idx))
        ax.scatter(P[idx, 0], y, label=f"cluster {j}", s=28)
    c = report.centroids
    ax.scatter(c[:, 0], c[:, 1] if c.shape[1] > 1 else np.zeros(len(c)), marker="x", color="k", s=60)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)

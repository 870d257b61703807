"""Report figures rendered to PNG with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_deviation_boxes(reports, path, threshold_mm=2.0):
    """Box plot of per-case deviations, one box per method."""
    ordered = sorted(reports, key=lambda r: r.method)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.boxplot([r.deviations_mm for r in ordered], whis=(10, 90), showfliers=True)
    ax.set_xticks(np.arange(1, len(ordered) + 1), [r.method for r in ordered], rotation=30)
    ax.axhline(threshold_mm, color="tab:red", ls="--", lw=1, label=f"{threshold_mm:g} mm threshold")
    ax.set_yscale("symlog", linthresh=1.0)
    ax.set_ylabel("deviation (mm)")
    ax.legend(loc="upper right")
    return _save(fig, path)


def plot_cnn_iterations(reports, path):
    """Mean deviation and FPR against the number of CNN iterations."""
    its = np.arange(1, len(reports) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(its, [r.mean_mm for r in reports], "o-", label="mean deviation (mm)")
    ax.set_xlabel("iterations")
    ax.set_xticks(its)
    ax.set_ylabel("mean deviation (mm)")
    ax2 = ax.twinx()
    ax2.plot(its, [r.fpr_percent for r in reports], "s--", color="tab:orange", label="FPR (%)")
    ax2.set_ylabel("FPR (%)")
    ax2.set_ylim(0, 100)
    fig.legend(loc="upper right")
    return _save(fig, path)


def plot_loss(history, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(np.arange(1, len(history) + 1), history, "o-")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training MSE (mm$^2$)")
    return _save(fig, path)


def plot_images(images, titles, path):
    """Row of grayscale panels."""
    fig, axes = plt.subplots(1, len(images), figsize=(3.2 * len(images), 3.4))
    for ax, img, title in zip(np.atleast_1d(axes), images, titles):
        ax.imshow(img, cmap="gray")
        ax.set_title(title)
        ax.axis("off")
    return _save(fig, path)

"""Report figures: axial triptychs (gCT / sCT / |diff|) and the CDVH curve."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

HU_WINDOW = (-1000.0, 1500.0)
DIFF_MAX = 500.0


def _style(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)


def triptych(gct, sct, z_index, path, title=None):
    """Axial slice ``z_index`` of both volumes and their absolute difference, written to ``path``."""
    g = np.asarray(getattr(gct, "data", gct))[:, :, z_index].T
    s = np.asarray(getattr(sct, "data", sct))[:, :, z_index].T
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.3))
    panels = ((g, "gCT", "gray", HU_WINDOW), (s, "sCT", "gray", HU_WINDOW),
              (np.abs(s - g), "|sCT - gCT|", "magma", (0.0, DIFF_MAX)))
    for ax, (img, label, cmap, (lo, hi)) in zip(axes, panels):
        im = ax.imshow(img, cmap=cmap, vmin=lo, vmax=hi, origin="lower", interpolation="nearest")
        ax.set_title(label, fontsize=10)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.03).ax.tick_params(labelsize=7)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def cdvh_plot(threshold_hu, fraction, path, label="sCT vs gCT"):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(threshold_hu, 100.0 * np.asarray(fraction), lw=1.5, label=label)
    ax.set_xlabel("|difference| threshold (HU)")
    ax.set_ylabel("voxels above threshold (%)")
    ax.set_xlim(threshold_hu[0], threshold_hu[-1])
    ax.set_ylim(0, None)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path

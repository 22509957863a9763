"""Mid-slice overlay figures for best/worst case reports."""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _overlay(ax, image_slice, label_slice, title):
    ax.imshow(image_slice, cmap="gray", interpolation="nearest")
    masked = np.ma.masked_where(label_slice == 0, label_slice)
    ax.imshow(masked, cmap="tab10", alpha=0.45, interpolation="nearest",
              vmin=1, vmax=10)
    ax.set_title(title, fontsize=9)
    ax.axis("off")


def save_case_overlay(image, gt_label, pred_label, out_path, case_title="") -> str:
    """Write a GT-vs-prediction mid-slice PNG; returns the path."""
    mid = image.shape[-3] // 2
    img = image[0, mid] if image.ndim == 4 else image[mid]
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.6))
    _overlay(axes[0], img, gt_label[mid], "ground truth")
    _overlay(axes[1], img, pred_label[mid], "prediction")
    if case_title:
        fig.suptitle(case_title, fontsize=10)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path

"""Segmentation quality metrics and per-split aggregation.

Conventions (documented in the report schema): dice of two empty masks is
1.0; Hausdorff distance is the exact symmetric max over boundary voxel sets
under anisotropic spacing, with ``inf`` as sentinel when either set is empty
(sentinels are excluded from means and counted separately). The
generalization gap G of a task is signed: mean ExVal dice minus mean InVal
dice.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from . import synthdata

REPORT_SCHEMA_VERSION = 1

HD_SENTINEL = math.inf


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray, label: int) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|) for one label; both empty -> 1.0."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    a = pred_mask == label
    b = gt_mask == label
    sa = int(np.count_nonzero(a))
    sb = int(np.count_nonzero(b))
    if sa + sb == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (sa + sb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices [n,3] of foreground voxels with a 6-neighbor outside the mask.

    Volume-border foreground voxels count as surface.
    """
    mask = mask.astype(bool)
    if not mask.any():
        return np.zeros((0, 3), dtype=np.int64)
    structure = generate_binary_structure(3, 1)
    interior = binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def hausdorff(
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
    label: int,
    spacing: tuple[float, float, float],
) -> float:
    """Symmetric Hausdorff distance (mm) between the label's surfaces."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    pa = surface_voxels(pred_mask == label)
    pb = surface_voxels(gt_mask == label)
    if len(pa) == 0 or len(pb) == 0:
        return HD_SENTINEL
    sp = np.asarray(spacing, dtype=np.float64)
    pa = pa.astype(np.float64) * sp
    pb = pb.astype(np.float64) * sp
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class CaseMetrics:
    sample_id: str
    task_id: str
    center_id: str
    split: str
    dsc: dict[int, float] = field(default_factory=dict)
    hd: dict[int, float] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(list(self.dsc.values())))

    @property
    def mean_hd(self) -> float | None:
        finite = [v for v in self.hd.values() if math.isfinite(v)]
        return float(np.mean(finite)) if finite else None


def case_metrics(
    pred_label: np.ndarray,
    gt_sample: synthdata.VolumeSample,
    labels: list[int],
    split: str,
) -> CaseMetrics:
    cm = CaseMetrics(
        sample_id=gt_sample.sample_id,
        task_id=gt_sample.task_id,
        center_id=gt_sample.center_id,
        split=split,
    )
    for lab in labels:
        cm.dsc[lab] = dice(pred_label, gt_sample.label, lab)
        cm.hd[lab] = hausdorff(pred_label, gt_sample.label, lab, gt_sample.spacing)
    return cm


def resolve_split(split_map: dict, sample: synthdata.VolumeSample) -> str:
    """Sample-id entries take precedence over center-id entries."""
    if sample.sample_id in split_map:
        return split_map[sample.sample_id]
    if sample.center_id in split_map:
        return split_map[sample.center_id]
    key = f"{sample.task_id}/{sample.center_id}"
    return split_map.get(key, "InVal")


def evaluate_dataset(pred_dir: str, gt_dir: str, split_map: dict | None = None) -> dict:
    """Per-case DSC/HD plus per-task, per-split means and generalization gaps.

    Predictions and ground truth pair by sample id. Unmatched cases on either
    side are listed in the report and warned about; evaluation continues.
    """
    split_map = split_map or {}
    gt_samples = {s.sample_id: s for s in synthdata.read_dataset(gt_dir)}
    pred_samples = {s.sample_id: s for s in synthdata.read_dataset(pred_dir)}

    unmatched = sorted(set(pred_samples) ^ set(gt_samples))
    if unmatched:
        warnings.warn(f"{len(unmatched)} unmatched case(s): {unmatched}", stacklevel=2)

    task_labels: dict[str, set[int]] = {}
    for s in gt_samples.values():
        task_labels.setdefault(s.task_id, set()).update(
            int(l) for l in np.unique(s.label) if l != 0)

    cases = []
    for sid in sorted(set(pred_samples) & set(gt_samples)):
        gt = gt_samples[sid]
        labels = sorted(task_labels[gt.task_id])
        cases.append(case_metrics(pred_samples[sid].label, gt, labels, resolve_split(split_map, gt)))

    aggregate: dict[str, dict[str, dict]] = {}
    for cm in cases:
        agg = aggregate.setdefault(cm.task_id, {}).setdefault(cm.split, {
            "dsc": [], "hd": [], "n_hd_undefined": 0})
        agg["dsc"].append(cm.mean_dsc)
        if cm.mean_hd is not None:
            agg["hd"].append(cm.mean_hd)
        agg["n_hd_undefined"] += sum(1 for v in cm.hd.values() if not math.isfinite(v))

    agg_out = {}
    for task, per_split in aggregate.items():
        agg_out[task] = {}
        for split, a in per_split.items():
            agg_out[task][split] = {
                "n_cases": len(a["dsc"]),
                "mean_dsc": float(np.mean(a["dsc"])),
                "mean_hd": float(np.mean(a["hd"])) if a["hd"] else None,
                "n_hd_undefined": a["n_hd_undefined"],
            }

    generalization = {}
    for task, per_split in agg_out.items():
        if "InVal" in per_split and "ExVal" in per_split:
            generalization[task] = per_split["ExVal"]["mean_dsc"] - per_split["InVal"]["mean_dsc"]
        else:
            generalization[task] = None

    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "pred_dir": os.path.abspath(pred_dir),
        "gt_dir": os.path.abspath(gt_dir),
        "conventions": {
            "dice_both_empty": 1.0,
            "hd_empty_set": "inf (serialized as null, excluded from means)",
        },
        "cases": [
            {
                "sample_id": cm.sample_id,
                "task_id": cm.task_id,
                "center_id": cm.center_id,
                "split": cm.split,
                "dsc": {str(k): v for k, v in cm.dsc.items()},
                "hd": {str(k): (v if math.isfinite(v) else None) for k, v in cm.hd.items()},
                "mean_dsc": cm.mean_dsc,
                "mean_hd": cm.mean_hd,
            }
            for cm in cases
        ],
        "aggregate": agg_out,
        "generalization": generalization,
        "unmatched": unmatched,
    }


def write_report(report: dict, json_path: str, csv_path: str | None = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    with open(json_path, "w") as f:
        json.dump(report, f, indent=1)
    if csv_path is None:
        return
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["sample_id", "task_id", "center_id", "split", "label", "dsc", "hd"])
        for case in report["cases"]:
            for lab in sorted(case["dsc"], key=int):
                hd_v = case["hd"][lab]
                wr.writerow([
                    case["sample_id"], case["task_id"], case["center_id"], case["split"],
                    lab, f"{case['dsc'][lab]:.6f}",
                    "" if hd_v is None else f"{hd_v:.6f}",
                ])


def format_generalization_table(report: dict) -> str:
    """Plain-text table: per task, InVal / ExVal mean dice and the signed gap."""
    lines = [f"{'task':<12} {'InVal':>8} {'ExVal':>8} {'G':>8}"]
    for task in sorted(report["aggregate"]):
        per_split = report["aggregate"][task]
        inval = per_split.get("InVal", {}).get("mean_dsc")
        exval = per_split.get("ExVal", {}).get("mean_dsc")
        g = report["generalization"].get(task)
        fmt = lambda v: f"{100 * v:8.1f}" if v is not None else f"{'-':>8}"
        arrow = "" if g is None else (f" (↓{-100 * g:.1f})" if g < 0 else f" (↑{100 * g:.1f})")
        lines.append(f"{task:<12} {fmt(inval)} {fmt(exval)} {fmt(g)}{arrow}")
    return "\n".join(lines)

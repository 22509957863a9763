"""Expert-free inference and mask post-processing.

At inference the cross-attention fusion blocks do not exist in the executed
path: volume -> encoder -> self-attention -> decoder -> prompt fusion ->
mask decoder. Only the student checkpoint is ever read, so predictions are
a pure function of (student, volume, prompt).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .foundation import StudentModel
from .synthdata import PromptBox, VolumeSample, write_dataset


@dataclass
class SegmentationResult:
    labels: np.ndarray       # [D, H, W] original label ids
    probs: np.ndarray        # [L+1, D, H, W] per-class probabilities
    binary: np.ndarray       # [D, H, W] bool mask of the prompt's target label
    task_id: str
    target_label: int


def universal_infer(
    x,
    prompt: PromptBox,
    student: StudentModel,
    task_id: str,
) -> SegmentationResult:
    """Segment one volume with the frozen student; no expert is ever touched."""
    if prompt is None:
        raise ValueError("universal inference requires a prompt box")
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    x = x.float()
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[0] != 1:
        raise ValueError(f"expected one volume [*, D, H, W], got shape {tuple(x.shape)}")
    volume_shape = tuple(x.shape[2:])
    prompt.validate_bounds(volume_shape)

    student.eval()
    with torch.no_grad():
        skips, f_s = student.student_tokens(x)
        dense = student.decoder_forward(f_s, skips)
        e_pro = student.encode_prompt(prompt, volume_shape)
        fused = student.fuse_prompt(dense, e_pro)
        logits, binary = student.mask_decode(fused, e_pro, task_id,
                                             target_label=prompt.target_label)
        probs = torch.softmax(logits, dim=1)
        labels = student.label_map_from_logits(logits, task_id)

    return SegmentationResult(
        labels=labels[0].numpy().astype(np.uint8),
        probs=probs[0].numpy(),
        binary=binary[0].numpy(),
        task_id=task_id,
        target_label=prompt.target_label,
    )


def postprocess_largest_cc(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest connected component of each foreground label.

    Size ties go to the component whose first voxel (raster order) comes
    earliest. Background is untouched; an empty mask passes through.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, 3 if connectivity == 26 else 1)
    out = np.zeros_like(mask)
    for lab in np.unique(mask):
        if lab == 0:
            continue
        comp, n = ndimage.label(mask == lab, structure=structure)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel())[1:]  # component ids are 1-based
        best_size = sizes.max()
        candidates = np.flatnonzero(sizes == best_size) + 1
        if len(candidates) == 1:
            keep = candidates[0]
        else:
            flat = comp.ravel()
            keep = min(candidates, key=lambda c: int(np.argmax(flat == c)))
        out[comp == keep] = lab
    return out


def infer_dataset(
    student: StudentModel,
    samples: list[VolumeSample],
    out_dir: str,
    prompts: dict[str, PromptBox] | None = None,
    postprocess: bool = False,
) -> dict:
    """Predict every sample; write predictions in the dataset raw+sidecar format.

    Prompts default to each sample's ground-truth-derived box; a mapping of
    sample_id -> PromptBox overrides (deployment mode).
    """
    preds = []
    entries = []
    for s in samples:
        box = prompts.get(s.sample_id) if prompts else s.prompt
        if box is None:
            raise ValueError(f"no prompt for sample {s.sample_id}")
        result = universal_infer(s.image, box, student, s.task_id)
        label = result.labels
        if postprocess:
            label = postprocess_largest_cc(label)
        preds.append(VolumeSample(
            sample_id=s.sample_id,
            image=s.image,
            label=label.astype(np.uint8),
            task_id=s.task_id,
            center_id=s.center_id,
            spacing=s.spacing,
            prompt=box,
        ))
        entries.append({"sample_id": s.sample_id, "task_id": s.task_id,
                        "target_label": box.target_label})
    manifest = write_dataset(preds, out_dir)
    pred_manifest = {
        "n_predictions": len(entries),
        "postprocess": bool(postprocess),
        "predictions": entries,
    }
    with open(os.path.join(out_dir, "pred_manifest.json"), "w") as f:
        json.dump(pred_manifest, f, indent=1)
    return manifest

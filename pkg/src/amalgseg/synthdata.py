"""Synthetic multi-task, multi-center volumetric segmentation data.

Each task owns a disjoint set of foreground labels; each center imposes its
own intensity shift, noise level, and bias-field strength on top of shared
geometry, giving controlled domain shift between centers of the same task.
All generation is a pure function of (spec, seed).

On-disk layout per sample: ``<id>.img.raw`` (little-endian float32, C order),
``<id>.lbl.raw`` (little-endian uint8), and an ``<id>.json`` sidecar carrying
shape, spacing, task/center ids, the prompt box, and the sha256 of each raw
file. ``manifest.json`` at the dataset root lists every sample.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter


class ChecksumError(ValueError):
    """A raw file on disk does not match the checksum in its sidecar."""


@dataclass(frozen=True)
class IntensityProfile:
    """Per-center intensity knobs: additive offset, noise sigma, bias strength."""

    mean: float
    std: float
    bias_field_strength: float

    def __post_init__(self):
        if not 0.0 <= self.bias_field_strength <= 1.0:
            raise ValueError(f"bias_field_strength must be in [0,1], got {self.bias_field_strength}")


@dataclass(frozen=True)
class PromptBox:
    """Axis-aligned voxel box (hi exclusive) around one foreground label."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    target_label: int

    def __post_init__(self):
        if not all(l < h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box: lo={self.lo} hi={self.hi}")

    def validate_bounds(self, shape: tuple[int, int, int]) -> None:
        if any(l < 0 for l in self.lo) or any(h > s for h, s in zip(self.hi, shape)):
            raise ValueError(f"box {self.lo}..{self.hi} outside volume {shape}")


@dataclass(frozen=True)
class TaskSpec:
    """One sub-task: its labels, its centers, and per-center intensity profiles."""

    task_id: str
    label_ids: tuple[int, ...]
    center_ids: tuple[str, ...]
    intensity_profiles: dict[str, IntensityProfile] = field(hash=False)

    def __post_init__(self):
        if len(self.label_ids) == 0:
            raise ValueError("task needs at least one foreground label")
        if 0 in self.label_ids:
            raise ValueError("label 0 is reserved for background")
        if any(l <= 0 for l in self.label_ids):
            raise ValueError("label ids must be positive integers")
        if len(set(self.label_ids)) != len(self.label_ids):
            raise ValueError("duplicate label ids")
        if set(self.intensity_profiles) != set(self.center_ids):
            raise ValueError("intensity_profiles must cover exactly the center_ids")

    @property
    def num_structures(self) -> int:
        return len(self.label_ids)


@dataclass
class VolumeSample:
    """One volume: image [C,D,H,W] float32, label [D,H,W] uint8, metadata."""

    sample_id: str
    image: np.ndarray
    label: np.ndarray
    task_id: str
    center_id: str
    spacing: tuple[float, float, float]
    prompt: PromptBox

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image.ndim != 4:
            raise ValueError(f"image must be [C,D,H,W], got shape {self.image.shape}")
        d, h, w = self.image.shape[1:]
        if min(d, h, w) < 32:
            raise ValueError(f"spatial dims must be >= 32, got {(d, h, w)}")
        if d % 32 != 0:
            raise ValueError(f"depth must be a multiple of 32, got {d}")
        if self.label.shape != (d, h, w):
            raise ValueError("label shape does not match image")
        if not np.isfinite(self.image).all():
            raise ValueError("image contains NaN/Inf")
        self.prompt.validate_bounds((d, h, w))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.image.shape[1:])


def _check_shape(shape: tuple[int, int, int]) -> None:
    d, h, w = shape
    if min(d, h, w) < 32 or d % 32 != 0:
        raise ValueError(f"shape must have all dims >= 32 and D a multiple of 32, got {shape}")


def gen_task_suite(n_tasks: int, n_centers_per_task: int, seed: int) -> list[TaskSpec]:
    """Generate ``n_tasks`` TaskSpecs with pairwise-disjoint label sets.

    Label ids are handed out as consecutive blocks of 1..3 labels per task,
    so disjointness holds by construction. Deterministic given ``seed``.
    """
    if n_tasks <= 0:
        raise ValueError(f"n_tasks must be >= 1, got {n_tasks}")
    if n_centers_per_task <= 0:
        raise ValueError(f"n_centers_per_task must be >= 1, got {n_centers_per_task}")

    rng = np.random.default_rng(seed)
    specs = []
    next_label = 1
    for t in range(n_tasks):
        n_labels = int(rng.integers(1, 4))
        labels = tuple(range(next_label, next_label + n_labels))
        next_label += n_labels
        centers = tuple(f"c{j}" for j in range(n_centers_per_task))
        profiles = {}
        for j, c in enumerate(centers):
            # shifts stay below the structure contrast so tasks remain learnable
            profiles[c] = IntensityProfile(
                mean=float(rng.uniform(-0.25, 0.25)),
                std=float(rng.uniform(0.01, 0.05)),
                bias_field_strength=float(rng.uniform(0.0, 0.3)),
            )
        specs.append(TaskSpec(
            task_id=f"task{t}",
            label_ids=labels,
            center_ids=centers,
            intensity_profiles=profiles,
        ))
    return specs


def stable_seed(*parts) -> int:
    """Process-independent 64-bit seed from arbitrary printable parts.

    Python's builtin ``hash`` is salted per interpreter run; this is not.
    """
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _label_base_intensities(spec: TaskSpec) -> dict[int, float]:
    # Canonical per-label contrast, fixed by the task identity (not the seed)
    # so every center of a task shares the same clean content. Tasks get
    # distinct levels, mirroring sub-tasks split by modality/sequence.
    rng = np.random.default_rng(stable_seed("bases", spec.task_id))
    order = list(spec.label_ids)
    lo = rng.uniform(0.4, 0.7)
    levels = np.linspace(lo, lo + 0.8, num=len(order))
    rng.shuffle(levels)
    return {lab: float(v) for lab, v in zip(order, levels)}


def _smooth_field(shape, rng, sigma_frac=0.15):
    field = rng.standard_normal(shape).astype(np.float32)
    sigma = tuple(max(1.0, s * sigma_frac) for s in shape)
    field = gaussian_filter(field, sigma=sigma)
    peak = np.abs(field).max()
    if peak > 0:
        field /= peak
    return field


def _place_structures(spec: TaskSpec, shape, rng):
    """Lay out one smooth-boundary ellipsoid blob per foreground label.

    Centers are rejection-sampled so bounding spheres stay disjoint; radii
    shrink on repeated failure, so placement always terminates.
    """
    d, h, w = shape
    label = np.zeros(shape, dtype=np.uint8)
    perturb = _smooth_field(shape, rng, sigma_frac=0.12)

    max_r = min(d, h, w) / 4.0
    min_r = max(2.5, 0.55 * max_r)
    shrink = 1.0
    for _ in range(40):
        radii = [rng.uniform(min_r * shrink, max_r * shrink, size=3) for _ in spec.label_ids]
        centers = []
        ok = True
        for r in radii:
            placed = False
            for _ in range(200):
                c = np.array([
                    rng.uniform(r[0] + 1, d - r[0] - 1),
                    rng.uniform(r[1] + 1, h - r[1] - 1),
                    rng.uniform(r[2] + 1, w - r[2] - 1),
                ])
                # 1.12 covers the worst-case boundary perturbation (sqrt(1.25))
                if all(np.linalg.norm(c - c2) > 1.12 * (r.max() + r2.max()) + 1.5
                       for c2, r2 in zip(centers, radii)):
                    centers.append(c)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            break
        shrink *= 0.8
    else:
        raise RuntimeError(f"could not place {spec.num_structures} structures in volume {shape}")

    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float32),
        np.arange(h, dtype=np.float32),
        np.arange(w, dtype=np.float32),
        indexing="ij",
    )
    for lab, c, r in zip(spec.label_ids, centers, radii):
        q = ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2
        inside = q <= 1.0 + 0.25 * perturb
        label[inside] = lab
    return label


def tight_box(label: np.ndarray, target_label: int) -> PromptBox:
    """Smallest box (hi exclusive) containing every voxel of ``target_label``."""
    idx = np.argwhere(label == target_label)
    if idx.size == 0:
        raise ValueError(f"label {target_label} has no voxels")
    lo = tuple(int(v) for v in idx.min(axis=0))
    hi = tuple(int(v) + 1 for v in idx.max(axis=0))
    return PromptBox(lo=lo, hi=hi, target_label=int(target_label))


def _jitter_box(box: PromptBox, shape, rng, max_jitter: int = 2) -> PromptBox:
    lo, hi = [], []
    for axis in range(3):
        l = box.lo[axis] + int(rng.integers(-max_jitter, max_jitter + 1))
        u = box.hi[axis] + int(rng.integers(-max_jitter, max_jitter + 1))
        l = max(0, min(l, shape[axis] - 1))
        u = max(l + 1, min(u, shape[axis]))
        lo.append(l)
        hi.append(u)
    return PromptBox(lo=tuple(lo), hi=tuple(hi), target_label=box.target_label)


def synth_volume(
    spec: TaskSpec,
    center_id: str,
    shape: tuple[int, int, int],
    rng_seed: int,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    sample_id: str | None = None,
) -> VolumeSample:
    """Render one sample of ``spec`` as seen from ``center_id``.

    Geometry (label map, bias field, prompt choice) depends only on
    (spec, shape, rng_seed); the center contributes its intensity profile,
    so two centers at the same seed share label maps exactly. The image is
    ``bias * clean + offset + noise`` with the bias field scaled by the
    center's strength and noise drawn at the center's sigma.
    """
    if center_id not in spec.center_ids:
        raise ValueError(f"unknown center {center_id!r} for task {spec.task_id!r}")
    _check_shape(shape)

    geo_rng = np.random.default_rng((rng_seed, stable_seed("geo", spec.task_id)))
    label = _place_structures(spec, shape, geo_rng)
    bases = _label_base_intensities(spec)

    clean = np.zeros(shape, dtype=np.float32)
    for lab, base in bases.items():
        clean[label == lab] = base

    raw_bias = _smooth_field(shape, geo_rng, sigma_frac=0.3)
    target = int(geo_rng.choice([l for l in spec.label_ids if (label == l).any()]))
    box = _jitter_box(tight_box(label, target), shape, geo_rng)

    profile = spec.intensity_profiles[center_id]
    bias = 1.0 + profile.bias_field_strength * raw_bias
    noise_rng = np.random.default_rng((rng_seed, stable_seed("noise", spec.task_id, center_id)))
    noise = noise_rng.standard_normal(shape).astype(np.float32) * profile.std

    image = (bias * clean + profile.mean + noise).astype(np.float32)[np.newaxis]

    if sample_id is None:
        sample_id = f"{spec.task_id}-{center_id}-{rng_seed}"
    return VolumeSample(
        sample_id=sample_id,
        image=image,
        label=label,
        task_id=spec.task_id,
        center_id=center_id,
        spacing=tuple(float(s) for s in spacing),
        prompt=box,
    )


def synth_dataset(
    specs: list[TaskSpec],
    n_per_center: int,
    shape: tuple[int, int, int],
    seed: int,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> list[VolumeSample]:
    """All (task, center, index) combinations, each with its own derived seed."""
    samples = []
    for spec in specs:
        for center in spec.center_ids:
            for i in range(n_per_center):
                s = stable_seed("sample", seed, spec.task_id, center, i)
                samples.append(synth_volume(
                    spec, center, shape, rng_seed=s, spacing=spacing,
                    sample_id=f"{spec.task_id}-{center}-{i:03d}",
                ))
    return samples


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def sidecar_dict(sample: VolumeSample, img_sha: str, lbl_sha: str) -> dict:
    return {
        "sample_id": sample.sample_id,
        "shape": list(sample.shape),
        "channels": int(sample.image.shape[0]),
        "spacing": list(sample.spacing),
        "task_id": sample.task_id,
        "center_id": sample.center_id,
        "prompt": {
            "lo": list(sample.prompt.lo),
            "hi": list(sample.prompt.hi),
            "target_label": sample.prompt.target_label,
        },
        "sha256": {"img": img_sha, "lbl": lbl_sha},
    }


def write_dataset(samples: list[VolumeSample], dir_path: str, suite: list[TaskSpec] | None = None) -> dict:
    """Write samples + manifest.json to ``dir_path``; returns the manifest."""
    os.makedirs(dir_path, exist_ok=True)
    entries = []
    for s in samples:
        img_bytes = np.ascontiguousarray(s.image, dtype="<f4").tobytes()
        lbl_bytes = np.ascontiguousarray(s.label, dtype=np.uint8).tobytes()
        img_sha, lbl_sha = _sha256(img_bytes), _sha256(lbl_bytes)
        _atomic_write(os.path.join(dir_path, f"{s.sample_id}.img.raw"), img_bytes)
        _atomic_write(os.path.join(dir_path, f"{s.sample_id}.lbl.raw"), lbl_bytes)
        side = sidecar_dict(s, img_sha, lbl_sha)
        _atomic_write(os.path.join(dir_path, f"{s.sample_id}.json"),
                      json.dumps(side, indent=1).encode())
        entries.append({
            "sample_id": s.sample_id,
            "task_id": s.task_id,
            "center_id": s.center_id,
            "sha256": {"img": img_sha, "lbl": lbl_sha},
        })
    manifest = {"n_samples": len(entries), "samples": entries}
    if suite is not None:
        manifest["tasks"] = [
            {
                "task_id": sp.task_id,
                "label_ids": list(sp.label_ids),
                "center_ids": list(sp.center_ids),
                "intensity_profiles": {c: asdict(p) for c, p in sp.intensity_profiles.items()},
            }
            for sp in suite
        ]
    _atomic_write(os.path.join(dir_path, "manifest.json"),
                  json.dumps(manifest, indent=1).encode())
    return manifest


def read_sample(dir_path: str, sample_id: str) -> VolumeSample:
    side_path = os.path.join(dir_path, f"{sample_id}.json")
    if not os.path.exists(side_path):
        raise FileNotFoundError(f"missing sidecar {side_path}")
    with open(side_path) as f:
        side = json.load(f)

    sample = {}
    for kind, suffix, dtype in (("img", "img.raw", "<f4"), ("lbl", "lbl.raw", np.uint8)):
        path = os.path.join(dir_path, f"{sample_id}.{suffix}")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing raw file {path}")
        with open(path, "rb") as f:
            data = f.read()
        if _sha256(data) != side["sha256"][kind]:
            raise ChecksumError(f"checksum mismatch for {path}")
        sample[kind] = np.frombuffer(data, dtype=dtype)

    d, h, w = side["shape"]
    c = side.get("channels", 1)
    image = sample["img"].reshape(c, d, h, w).astype(np.float32)
    label = sample["lbl"].reshape(d, h, w)
    p = side["prompt"]
    return VolumeSample(
        sample_id=side["sample_id"],
        image=image,
        label=np.array(label, dtype=np.uint8),
        task_id=side["task_id"],
        center_id=side["center_id"],
        spacing=tuple(side["spacing"]),
        prompt=PromptBox(lo=tuple(p["lo"]), hi=tuple(p["hi"]), target_label=p["target_label"]),
    )


def read_dataset(dir_path: str) -> list[VolumeSample]:
    """Read every sample listed in manifest.json (or found via sidecars)."""
    manifest_path = os.path.join(dir_path, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
        ids = [e["sample_id"] for e in manifest["samples"]]
    else:
        ids = sorted(p[:-len(".json")] for p in os.listdir(dir_path) if p.endswith(".json")) \
            if os.path.isdir(dir_path) else []
    if not ids:
        warnings.warn(f"no samples found in {dir_path}", stacklevel=2)
        return []
    return [read_sample(dir_path, sid) for sid in ids]


def read_suite(dir_path: str) -> list[TaskSpec]:
    """Reconstruct TaskSpecs from a dataset manifest written with the suite."""
    with open(os.path.join(dir_path, "manifest.json")) as f:
        manifest = json.load(f)
    if "tasks" not in manifest:
        raise ValueError(f"manifest in {dir_path} carries no task suite")
    specs = []
    for t in manifest["tasks"]:
        specs.append(TaskSpec(
            task_id=t["task_id"],
            label_ids=tuple(t["label_ids"]),
            center_ids=tuple(t["center_ids"]),
            intensity_profiles={c: IntensityProfile(**p) for c, p in t["intensity_profiles"].items()},
        ))
    return specs


def dataset_checksum(dir_path: str) -> str:
    """Order-independent digest over all sample checksums in the manifest."""
    with open(os.path.join(dir_path, "manifest.json")) as f:
        manifest = json.load(f)
    parts = sorted(f"{e['sample_id']}:{e['sha256']['img']}:{e['sha256']['lbl']}"
                   for e in manifest["samples"])
    return _sha256("\n".join(parts).encode())

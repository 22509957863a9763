"""Two-stage training: per-task teacher pretraining, then amalgamation.

The amalgamation objective decomposes as

    total = CE + sum_k align_k + lambda * reg

where CE is voxel cross-entropy on the mask-decoder logits, align_k measures
the student-vs-merged feature distance for task k's samples, and reg is (by
default) the temperature-scaled KL between the frozen routed teacher's voxel
distribution and the student's. Every logged step reports the decomposition
exactly; teachers contribute no gradients.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import random
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .amalgamation import (AmalgamationLayer, FeatureBundle, RoutingTable, align_loss,
                           route_experts)
from .experts import (ExpertArchConfig, ExpertHandle, ExpertRegistry, build_expert,
                      build_external_expert, expert_forward, freeze, save_expert)
from .foundation import StudentConfig, StudentModel, build_student, save_student
from .synthdata import TaskSpec, VolumeSample, dataset_checksum, read_dataset, read_suite, stable_seed


class NumericError(RuntimeError):
    """Training hit a non-finite loss; the offending batch was dumped."""


@dataclass
class TrainConfig:
    stage: str = "amalgamate"          # "pretrain" | "amalgamate"
    lr: float = 1e-3
    schedule: str = "cosine"           # "constant" | "cosine"
    epochs: int = 50
    batch_size: int = 8
    lambda_: float = 0.1
    seed: int = 0
    roi: tuple[int, int, int] = (32, 96, 96)
    optimizer: str = "adam"            # "adam" | "sgd"
    align_weight: float = 1.0
    align_norm: str = "rms"
    reg_mode: str = "kl"               # "kl" | "l2_init"
    kl_temperature: float = 1.0
    stop_grad_merged: bool = False
    use_amalgamation: bool = True      # False = ablated arm: no experts touched at all
    val_every: int = 1                 # epochs between InVal evaluations (stage 1)

    def __post_init__(self):
        if self.stage not in ("pretrain", "amalgamate"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.roi[0] % 32 != 0:
            raise ValueError(f"roi depth must be a multiple of 32, got {self.roi}")
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class LossBreakdown:
    ce: float
    align_terms: dict[str, float]
    reg: float
    lambda_: float
    total: float

    def __post_init__(self):
        vals = [self.ce, self.reg, self.lambda_, self.total, *self.align_terms.values()]
        if not all(np.isfinite(v) for v in vals):
            raise NumericError(f"non-finite loss component: {self}")


@dataclass
class Batch:
    images: torch.Tensor          # [B, 1, D, H, W]
    labels: torch.Tensor          # [B, D, H, W] original label ids
    tasks: list[str]
    boxes: list
    sample_ids: list[str]
    volume_shape: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        self.volume_shape = tuple(self.images.shape[2:])

    def __len__(self):
        return self.images.shape[0]


def collate(samples: list[VolumeSample]) -> Batch:
    images = torch.from_numpy(np.stack([s.image for s in samples])).float()
    labels = torch.from_numpy(np.stack([s.label.astype(np.int64) for s in samples]))
    return Batch(
        images=images,
        labels=labels,
        tasks=[s.task_id for s in samples],
        boxes=[s.prompt for s in samples],
        sample_ids=[s.sample_id for s in samples],
    )


def lr_schedule(step: int, total_steps: int, base_lr: float, kind: str = "cosine") -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if kind == "constant":
        return base_lr
    if kind == "cosine":
        return base_lr * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0
    raise ValueError(f"unknown schedule {kind!r}")


def remap_labels(labels: torch.Tensor, label_ids: tuple[int, ...]) -> torch.Tensor:
    """Original label ids -> contiguous channel indices (background stays 0)."""
    lut = torch.zeros(int(max(label_ids)) + 1, dtype=torch.long, device=labels.device)
    for ch, lab in enumerate(label_ids, start=1):
        lut[lab] = ch
    return lut[labels]


def reg_kl(student_logits: torch.Tensor, expert_logits: torch.Tensor,
           temperature: float = 1.0) -> torch.Tensor:
    """Mean voxel KL(softmax(expert/T) || softmax(student/T)) * T^2."""
    if student_logits.shape != expert_logits.shape:
        raise ValueError(
            f"label-set/shape mismatch: {tuple(student_logits.shape)} vs "
            f"{tuple(expert_logits.shape)}")
    t = temperature
    log_p = F.log_softmax(expert_logits / t, dim=1)
    log_q = F.log_softmax(student_logits / t, dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1)  # [B, D, H, W]
    return kl.mean() * (t * t)


def reg_l2_init(params, init_params) -> torch.Tensor:
    """Mean squared drift of the trainable weights from their snapshot."""
    total, count = None, 0
    for p, p0 in zip(params, init_params):
        term = (p - p0).pow(2).sum()
        total = term if total is None else total + term
        count += p.numel()
    return total / count


def compute_losses(
    batch: Batch,
    student: StudentModel,
    amalg: AmalgamationLayer,
    registry: ExpertRegistry,
    cfg: TrainConfig,
    init_params: list[torch.Tensor] | None = None,
) -> tuple[torch.Tensor, LossBreakdown, FeatureBundle]:
    """Full objective on one batch; returns the differentiable total.

    With ``cfg.use_amalgamation`` off (the ablated arm), no expert is routed
    or run, the decoder consumes the student's own tokens, and the align and
    reg terms are identically zero.
    """
    skips, f_s = student.student_tokens(batch.images)

    if cfg.use_amalgamation:
        for e in registry.all_experts():
            if not e.frozen:
                raise ValueError(f"expert {e.expert_id} must be frozen for amalgamation")
        if registry.external is None:
            raise ValueError("amalgamation requires one external expert")
        route = route_experts(batch.tasks, registry, batch.sample_ids)
        routed, expert_logits = {}, {}
        for task in sorted(route.task_to_indices):
            idx = route.task_to_indices[task]
            expert = registry.tasks[task]
            out = expert_forward(expert, batch.images[idx])
            routed[task] = (idx, amalg.project_expert(out.features, expert.expert_id))
            expert_logits[task] = out.logits
        ext_out = expert_forward(registry.external, batch.images)
        f_ext = amalg.project_expert(ext_out.features, registry.external.expert_id)
        bundle = amalg(f_s, routed, f_ext)
    else:
        task_to_indices: dict[str, list[int]] = {}
        for i, task in enumerate(batch.tasks):
            task_to_indices.setdefault(task, []).append(i)
        route = RoutingTable(per_sample_task=list(batch.tasks),
                             task_to_indices=task_to_indices, selected_expert_ids=[])
        expert_logits = {}
        bundle = FeatureBundle(f_s=f_s, f_m=f_s)

    merged = bundle.f_m.detach() if cfg.stop_grad_merged else bundle.f_m

    dense = student.decoder_forward(bundle.f_m, skips)
    e_pro = student.encode_prompts(batch.boxes, batch.volume_shape)
    fused = student.fuse_prompt(dense, e_pro)

    b = len(batch)
    ce_t = batch.images.new_zeros(())
    reg_t = batch.images.new_zeros(())
    align_tensors: dict[str, torch.Tensor] = {}
    for task in sorted(route.task_to_indices):
        idx = route.task_to_indices[task]
        logits, _ = student.mask_decode(fused[idx], e_pro[idx], task)
        target = remap_labels(batch.labels[idx], student.task_labels[task])
        ce_vox = F.cross_entropy(logits, target, reduction="none")
        ce_t = ce_t + ce_vox.mean(dim=(1, 2, 3)).sum() / b

        group_align = batch.images.new_zeros(())
        if cfg.use_amalgamation:
            for j, i in enumerate(idx):
                group_align = group_align + align_loss(
                    bundle.f_s[i], merged[i], norm=cfg.align_norm)
        align_tensors[task] = cfg.align_weight * group_align / b

        if cfg.use_amalgamation and cfg.reg_mode == "kl":
            reg_t = reg_t + reg_kl(logits, expert_logits[task], cfg.kl_temperature) * len(idx) / b

    if cfg.reg_mode == "l2_init":
        if init_params is None:
            raise ValueError("reg_mode=l2_init needs the initial parameter snapshot")
        trainable = [p for p in list(student.parameters()) + list(amalg.parameters())
                     if p.requires_grad]
        reg_t = reg_l2_init(trainable, init_params)

    total = ce_t
    for task in sorted(align_tensors):
        total = total + align_tensors[task]
    total = total + cfg.lambda_ * reg_t

    breakdown = LossBreakdown(
        ce=float(ce_t.detach()),
        align_terms={t: float(v.detach()) for t, v in align_tensors.items()},
        reg=float(reg_t.detach()),
        lambda_=cfg.lambda_,
        total=float(total.detach()),
    )
    return total, breakdown, bundle


def ka_step(
    batch: Batch,
    student: StudentModel,
    amalg: AmalgamationLayer,
    registry: ExpertRegistry,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    dump_dir: str | None = None,
    init_params: list[torch.Tensor] | None = None,
) -> LossBreakdown:
    """One optimization step of the full objective on the student side only."""
    try:
        total, breakdown, _ = compute_losses(batch, student, amalg, registry, cfg,
                                             init_params=init_params)
    except NumericError:
        _dump_batch(batch, dump_dir)
        raise
    if not torch.isfinite(total):
        _dump_batch(batch, dump_dir)
        raise NumericError(f"non-finite total loss on batch {batch.sample_ids}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return breakdown


def _dump_batch(batch: Batch, dump_dir: str | None) -> None:
    if dump_dir is None:
        return
    os.makedirs(dump_dir, exist_ok=True)
    with open(os.path.join(dump_dir, "nan_dump.json"), "w") as f:
        json.dump({"sample_ids": batch.sample_ids, "tasks": batch.tasks}, f, indent=1)


# ---------------------------------------------------------------------------
# Stage 1: expert pretraining
# ---------------------------------------------------------------------------

def _foreground_dice(pred_labels: np.ndarray, gt_labels: np.ndarray,
                     label_ids) -> float:
    vals = [metrics.dice(pred_labels, gt_labels, lab) for lab in label_ids]
    return float(np.mean(vals))


def eval_expert_dice(expert: ExpertHandle, samples: list[VolumeSample]) -> float:
    """Mean foreground dice of argmax predictions, mapped back to label ids."""
    expert.model.eval()
    scores = []
    with torch.no_grad():
        for s in samples:
            x = torch.from_numpy(s.image).float()[None]
            _, logits = expert.model(x)
            pred_ch = logits.argmax(dim=1)[0].numpy()
            lut = np.array([0, *expert.label_ids] if expert.label_ids else [0, 1],
                           dtype=np.int64)
            pred = lut[pred_ch]
            gt = s.label if expert.label_ids else (s.label > 0).astype(np.uint8)
            scores.append(_foreground_dice(pred, gt, expert.label_ids or (1,)))
    return float(np.mean(scores))


def pretrain_expert(
    spec: TaskSpec,
    samples: list[VolumeSample],
    cfg: TrainConfig,
    arch: ExpertArchConfig | None = None,
    val_samples: list[VolumeSample] | None = None,
) -> ExpertHandle:
    """Stage-1: train one task's teacher with voxel cross-entropy, freeze best.

    Keeps the checkpoint with the best internal-validation dice; refuses
    samples from other tasks or with labels outside the task's set.
    """
    if not samples:
        raise ValueError(f"empty dataset for task {spec.task_id}")
    allowed = {0, *spec.label_ids}
    for s in samples:
        if s.task_id != spec.task_id:
            raise ValueError(f"sample {s.sample_id} belongs to task {s.task_id}, "
                             f"not {spec.task_id}")
        present = set(int(v) for v in np.unique(s.label))
        if not present <= allowed:
            raise ValueError(f"sample {s.sample_id} carries labels {present - allowed} "
                             f"outside task {spec.task_id}")

    if val_samples is None:
        rng = np.random.default_rng(stable_seed("split", cfg.seed, spec.task_id))
        order = rng.permutation(len(samples))
        n_val = max(1, len(samples) // 5) if len(samples) > 1 else 0
        val_samples = [samples[i] for i in order[:n_val]]
        samples = [samples[i] for i in order[n_val:]]

    arch = arch or ExpertArchConfig(volume_shape=tuple(samples[0].shape))
    expert = build_expert(spec, arch, seed=cfg.seed)
    return _fit_expert(expert, spec.label_ids, samples, val_samples, cfg)


def pretrain_external_expert(
    suite: list[TaskSpec],
    samples: list[VolumeSample],
    cfg: TrainConfig,
    arch: ExpertArchConfig | None = None,
) -> ExpertHandle:
    """Stage-1 for the task-agnostic teacher: foreground/background on all tasks."""
    if not samples:
        raise ValueError("empty dataset for external expert")
    rng = np.random.default_rng(stable_seed("split", cfg.seed, "external"))
    order = rng.permutation(len(samples))
    n_val = max(1, len(samples) // 5) if len(samples) > 1 else 0
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]

    arch = arch or ExpertArchConfig(volume_shape=tuple(samples[0].shape))
    expert = build_external_expert(arch, seed=cfg.seed)
    return _fit_expert(expert, (), train, val, cfg)


def _fit_expert(expert, label_ids, train, val, cfg: TrainConfig) -> ExpertHandle:
    if expert.frozen:
        raise RuntimeError(f"expert {expert.expert_id} is frozen; refusing to train")
    opt = _make_optimizer(expert.model.parameters(), cfg)
    steps_per_epoch = max(1, (len(train) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    def targets_of(labels: torch.Tensor) -> torch.Tensor:
        if label_ids:
            return remap_labels(labels, tuple(label_ids))
        return (labels > 0).long()

    best_dice, best_state = -1.0, None
    step = 0
    expert.model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            stable_seed("order", cfg.seed, expert.expert_id, epoch)).permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = collate([train[i] for i in idx])
            for g in opt.param_groups:
                g["lr"] = lr_schedule(step, total_steps, cfg.lr, cfg.schedule)
            _, logits = expert.model(batch.images)
            loss = F.cross_entropy(logits, targets_of(batch.labels))
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite pretraining loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
        if val and ((epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1):
            d = eval_expert_dice(expert, val)
            if d > best_dice:
                best_dice = d
                best_state = copy.deepcopy(expert.model.state_dict())
            expert.model.train()

    if best_state is not None:
        expert.model.load_state_dict(best_state)
        expert.inval_dice = best_dice
    expert.trained = True
    return freeze(expert)


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


# ---------------------------------------------------------------------------
# Run harness: seeding, logging, checkpoints, resume
# ---------------------------------------------------------------------------

def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def config_hash(cfg: TrainConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _atomic_torch_save(obj, path: str) -> None:
    tmp = path + ".tmp"
    torch.save(obj, tmp)
    os.replace(tmp, path)


def _csv_row(step, breakdown: LossBreakdown, task_order, lr) -> list[str]:
    row = [str(step), f"{breakdown.ce:.17g}"]
    row += [f"{breakdown.align_terms.get(t, 0.0):.17g}" for t in task_order]
    row += [f"{breakdown.reg:.17g}", f"{breakdown.lambda_:.17g}",
            f"{breakdown.total:.17g}", f"{lr:.17g}"]
    return row


def run_training(
    cfg: TrainConfig,
    dataset_dir: str,
    out_dir: str,
    experts_path: str | None = None,
    task_id: str | None = None,
    student_cfg: StudentConfig | None = None,
    arch: ExpertArchConfig | None = None,
    resume: bool = False,
    stop_after_epoch: int | None = None,
) -> dict:
    """Seeded, resumable training run; writes losses.csv, checkpoints, manifest.

    Stage ``pretrain`` trains the named task's teacher (or, with no task_id,
    every task plus the external teacher) and updates ``experts.json`` in
    ``out_dir``. Stage ``amalgamate`` trains the student against the frozen
    registry. Math is pinned to one thread so reruns are bit-identical;
    ``stop_after_epoch`` preempts the run at an epoch boundary, leaving a
    checkpoint from which ``resume=True`` continues bit-identically.
    """
    os.makedirs(out_dir, exist_ok=True)
    torch.set_num_threads(1)
    seed_everything(cfg.seed)

    samples = read_dataset(dataset_dir)
    suite = read_suite(dataset_dir)
    specs = {s.task_id: s for s in suite}

    if cfg.stage == "pretrain":
        return _run_pretrain(cfg, samples, suite, out_dir, task_id, arch, dataset_dir)

    if experts_path is None:
        raise ValueError("amalgamate stage requires experts_path")
    registry = ExpertRegistry.load(experts_path)
    missing = sorted(set(specs) - set(registry.tasks))
    if missing:
        raise ValueError(f"experts registry lacks tasks {missing}")

    student_cfg = student_cfg or StudentConfig()
    student = build_student(student_cfg, {t: specs[t].label_ids for t in sorted(specs)},
                            seed=cfg.seed)
    amalg = AmalgamationLayer(student.model_dim, num_heads=student_cfg.num_heads)
    for e in registry.all_experts():
        amalg.ensure_projection(e.expert_id, e.feature_dim)

    params = [p for p in list(student.parameters()) + list(amalg.parameters())
              if p.requires_grad]
    init_params = [p.detach().clone() for p in params] if cfg.reg_mode == "l2_init" else None
    optimizer = _make_optimizer(params, cfg)

    task_order = sorted(specs)
    steps_per_epoch = max(1, (len(samples) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    losses_path = os.path.join(out_dir, "losses.csv")
    ckpt_path = os.path.join(out_dir, "last.pt")

    start_epoch, step = 0, 0
    if resume and os.path.exists(ckpt_path):
        ckpt = torch.load(ckpt_path, weights_only=False)
        student.load_state_dict(ckpt["student"])
        amalg.load_state_dict(ckpt["amalg"])
        optimizer.load_state_dict(ckpt["optimizer"])
        torch.set_rng_state(ckpt["torch_rng"])
        start_epoch, step = ckpt["epoch"] + 1, ckpt["step"]
        _truncate_csv(losses_path, step)
    if not (resume and start_epoch > 0):
        with open(losses_path, "w", newline="") as f:
            csv.writer(f).writerow(
                ["step", "ce", *[f"align_{t}" for t in task_order], "reg", "lambda",
                 "total", "lr"])

    final_total = None
    epochs_completed = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng(
            stable_seed("order", cfg.seed, "amalgamate", epoch)).permutation(len(samples))
        with open(losses_path, "a", newline="") as f:
            writer = csv.writer(f)
            for start in range(0, len(samples), cfg.batch_size):
                batch = collate([samples[i] for i in order[start:start + cfg.batch_size]])
                lr = lr_schedule(step, total_steps, cfg.lr, cfg.schedule)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                breakdown = ka_step(batch, student, amalg, registry, cfg, optimizer,
                                    dump_dir=out_dir, init_params=init_params)
                writer.writerow(_csv_row(step, breakdown, task_order, lr))
                final_total = breakdown.total
                step += 1
        _atomic_torch_save({
            "epoch": epoch,
            "step": step,
            "student": student.state_dict(),
            "amalg": amalg.state_dict(),
            "optimizer": optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "config_sha256": config_hash(cfg),
        }, ckpt_path)
        epochs_completed = epoch + 1
        if stop_after_epoch is not None and epochs_completed >= stop_after_epoch:
            break

    student_path = save_student(student, out_dir, manifest_ref="manifest.json")
    _atomic_torch_save(amalg.state_dict(), os.path.join(out_dir, "amalgamation.pt"))
    manifest = {
        "stage": "amalgamate",
        "config": asdict(cfg),
        "config_sha256": config_hash(cfg),
        "dataset_dir": os.path.abspath(dataset_dir),
        "dataset_checksum": dataset_checksum(dataset_dir),
        "tasks": task_order,
        "epochs_completed": epochs_completed,
        "steps": step,
        "final_total": final_total,
        "losses_csv": "losses.csv",
        "student_checkpoint": os.path.basename(student_path),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def _truncate_csv(path: str, keep_steps: int) -> None:
    if not os.path.exists(path):
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    body = [r for r in body if int(r[0]) < keep_steps]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(header)
        wr.writerows(body)


def _run_pretrain(cfg, samples, suite, out_dir, task_id, arch, dataset_dir) -> dict:
    registry_path = os.path.join(out_dir, "experts.json")
    registry = {"tasks": {}, "external": None}
    if os.path.exists(registry_path):
        with open(registry_path) as f:
            registry = json.load(f)

    by_task: dict[str, list[VolumeSample]] = {}
    for s in samples:
        by_task.setdefault(s.task_id, []).append(s)

    trained = []
    if task_id is None:
        todo = [sp.task_id for sp in suite] + ["external"]
    else:
        todo = [task_id]
    for tid in todo:
        if tid == "external":
            handle = pretrain_external_expert(suite, samples, cfg, arch=arch)
            save_expert(handle, out_dir)
            registry["external"] = handle.checkpoint_ref
        else:
            spec = next((sp for sp in suite if sp.task_id == tid), None)
            if spec is None:
                raise ValueError(f"task {tid!r} not present in dataset suite")
            handle = pretrain_expert(spec, by_task.get(tid, []), cfg, arch=arch)
            save_expert(handle, out_dir)
            registry["tasks"][tid] = handle.checkpoint_ref
        trained.append({"expert_id": handle.expert_id, "task_id": handle.task_id,
                        "inval_dice": handle.inval_dice})

    with open(registry_path, "w") as f:
        json.dump(registry, f, indent=1)
    manifest = {
        "stage": "pretrain",
        "config": asdict(cfg),
        "config_sha256": config_hash(cfg),
        "dataset_dir": os.path.abspath(dataset_dir),
        "dataset_checksum": dataset_checksum(dataset_dir),
        "experts": trained,
        "registry": registry_path,
    }
    with open(os.path.join(out_dir, "pretrain_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest

"""Shared fixtures: tiny task suites, trained desk-scale experts, and the
stage-2 overfit run reused by several acceptance criteria."""

from __future__ import annotations

import hashlib
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from amalgseg import metrics
from amalgseg import synthdata as sd
from amalgseg.amalgamation import AmalgamationLayer
from amalgseg.experts import (ExpertArchConfig, ExpertRegistry, build_expert,
                              build_external_expert, expert_grad_norm, freeze,
                              param_checksum, save_expert)
from amalgseg.foundation import StudentConfig, build_student, save_student
from amalgseg.inference import universal_infer
from amalgseg.training import (Batch, TrainConfig, _make_optimizer, collate, ka_step,
                               pretrain_expert, pretrain_external_expert)

TINY_SHAPE = (32, 32, 32)


def make_task(task_id, label_ids, center_means=(0.1,), std=0.02, bias=0.1):
    centers = tuple(f"c{i}" for i in range(len(center_means)))
    profiles = {
        c: sd.IntensityProfile(mean=float(m), std=std, bias_field_strength=bias)
        for c, m in zip(centers, center_means)
    }
    return sd.TaskSpec(task_id=task_id, label_ids=tuple(label_ids),
                       center_ids=centers, intensity_profiles=profiles)


def structural_registry(suite, arch, seed=0):
    """Frozen but untrained experts, for contract tests that skip stage 1."""
    registry = ExpertRegistry()
    for spec in suite:
        handle = build_expert(spec, arch, seed=seed)
        handle.trained = True  # skip the untrained-freeze warning
        registry.register(freeze(handle))
    ext = build_external_expert(arch, seed=seed)
    ext.trained = True
    registry.register(freeze(ext))
    return registry


def mean_foreground_dice(student, samples) -> float:
    vals = []
    for s in samples:
        result = universal_infer(s.image, s.prompt, student, s.task_id)
        for lab in (int(l) for l in np.unique(s.label) if l != 0):
            vals.append(metrics.dice(result.labels, s.label, lab))
    return float(np.mean(vals))


def file_sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------------------
# Micro instance for gradient checks (trainable side stays under 1k params)
# ---------------------------------------------------------------------------

MICRO_SHAPE = (16, 16, 16)


def make_micro_setup(dtype=torch.float64, perturb=0.05, seed=0):
    suite = [make_task("m0", (1,)), make_task("m1", (2,))]
    arch = ExpertArchConfig(depth=2, base_channels=8, volume_shape=MICRO_SHAPE)
    registry = structural_registry(suite, arch, seed=seed)

    # decoder_channels >= 4 keeps the channel normalization smooth (with 2
    # channels it degenerates to a sign function and breaks FD checks)
    cfg = StudentConfig(embed_dim=2, num_stages=3, num_heads=1, dim_growth=1,
                        mlp_ratio=1.0, decoder_channels=4, conv_kernel=1,
                        prompt_freqs=2)
    student = build_student(cfg, {t.task_id: t.label_ids for t in suite}, seed=seed)
    amalg = AmalgamationLayer(student.model_dim, num_heads=1)
    for e in registry.all_experts():
        amalg.ensure_projection(e.expert_id, e.feature_dim)

    student.to(dtype)
    amalg.to(dtype)
    for e in registry.all_experts():
        e.model.to(dtype)

    gen = torch.Generator().manual_seed(seed + 1)
    if perturb:
        with torch.no_grad():
            for p in list(student.parameters()) + list(amalg.parameters()):
                p.add_(torch.randn(p.shape, generator=gen, dtype=dtype) * perturb)

    rng = np.random.default_rng(seed + 2)
    images = torch.tensor(rng.normal(0.2, 0.4, size=(2, 1, *MICRO_SHAPE)), dtype=dtype)
    labels = torch.zeros((2, *MICRO_SHAPE), dtype=torch.long)
    labels[0, 4:9, 5:10, 6:11] = 1
    labels[1, 7:12, 3:8, 4:9] = 2
    boxes = [sd.PromptBox((4, 5, 6), (9, 10, 11), 1),
             sd.PromptBox((7, 3, 4), (12, 8, 9), 2)]
    batch = Batch(images=images, labels=labels, tasks=["m0", "m1"],
                  boxes=boxes, sample_ids=["b0", "b1"])
    train_cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=2, lambda_=0.1,
                            seed=seed, roi=TINY_SHAPE)
    return SimpleNamespace(suite=suite, registry=registry, student=student,
                           amalg=amalg, batch=batch, cfg=train_cfg)


def finite_difference_check(closure, params, n_sample=32, h=1e-6, seed=0):
    """Central-difference gradient check; returns the max relative error.

    ``closure()`` must recompute the scalar loss from scratch. A stratified
    sample of entries is checked: at least one entry per parameter tensor.
    """
    loss = closure()
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for p in params]

    rng = np.random.default_rng(seed)
    picks = []
    for i, p in enumerate(params):
        picks.append((i, int(rng.integers(p.numel()))))
    while len(picks) < n_sample:
        i = int(rng.integers(len(params)))
        picks.append((i, int(rng.integers(params[i].numel()))))

    worst = 0.0
    for i, flat in picks[:max(n_sample, len(params))]:
        p = params[i]
        with torch.no_grad():
            orig = p.view(-1)[flat].item()
            step = h * max(1.0, abs(orig))
            p.view(-1)[flat] = orig + step
            up = closure().item()
            p.view(-1)[flat] = orig - step
            down = closure().item()
            p.view(-1)[flat] = orig
        fd = (up - down) / (2 * step)
        an = grads[i].view(-1)[flat].item()
        # 1e-3 floor: below it central differences are roundoff, not signal
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-3)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Desk-scale trained setup shared by the heavier acceptance criteria
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Pretrained experts + a stage-2 run on 4 fixed volumes.

    Records expert checksums before / at step 100 / after, the expert
    gradient norms seen during training, and the dice trajectory, so the
    frozen-teacher and overfit criteria can both read from one run.
    """
    torch.set_num_threads(2)
    root = tmp_path_factory.mktemp("overfit")
    suite = [make_task("task0", (1,)), make_task("task1", (2,))]
    samples = []
    for spec in suite:
        samples += [
            sd.synth_volume(spec, "c0", TINY_SHAPE, rng_seed=10 + i,
                            sample_id=f"{spec.task_id}-{i}")
            for i in range(2)
        ]

    arch = ExpertArchConfig(depth=2, base_channels=16, volume_shape=TINY_SHAPE)
    pre_cfg = TrainConfig(stage="pretrain", lr=0.01, epochs=60, batch_size=2,
                          seed=1, roi=TINY_SHAPE, val_every=10)
    registry = ExpertRegistry()
    for spec in suite:
        own = [s for s in samples if s.task_id == spec.task_id]
        registry.register(pretrain_expert(spec, own, pre_cfg, arch=arch,
                                          val_samples=own))
    registry.register(pretrain_external_expert(suite, samples, pre_cfg, arch=arch))

    experts_dir = root / "experts"
    for e in registry.all_experts():
        save_expert(e, str(experts_dir))
    registry.save(str(experts_dir / "experts.json"))
    disk_sha_before = {e.expert_id: file_sha256(e.checkpoint_ref)
                       for e in registry.all_experts()}
    param_sha_before = {e.expert_id: param_checksum(e.model)
                        for e in registry.all_experts()}

    student_cfg = StudentConfig(embed_dim=16, num_heads=2, decoder_channels=16)
    student = build_student(student_cfg, {t.task_id: t.label_ids for t in suite}, seed=0)
    amalg = AmalgamationLayer(student.model_dim, num_heads=2)
    for e in registry.all_experts():
        amalg.ensure_projection(e.expert_id, e.feature_dim)
    cfg = TrainConfig(stage="amalgamate", lr=3e-3, schedule="constant", epochs=1,
                      batch_size=4, lambda_=0.1, seed=0, roi=TINY_SHAPE)
    params = [p for p in list(student.parameters()) + list(amalg.parameters())
              if p.requires_grad]
    optimizer = _make_optimizer(params, cfg)
    batch = collate(samples)

    history = []
    reached_step = None
    max_expert_grad = 0.0
    param_sha_at_100 = None
    breakdowns = []
    best = (-1.0, None)
    for step in range(500):
        breakdowns.append(ka_step(batch, student, amalg, registry, cfg, optimizer))
        max_expert_grad = max(max_expert_grad,
                              max(expert_grad_norm(e) for e in registry.all_experts()))
        if step + 1 == 100:
            param_sha_at_100 = {e.expert_id: param_checksum(e.model)
                                for e in registry.all_experts()}
        if (step + 1) % 25 == 0:
            d = mean_foreground_dice(student, samples)
            student.train()
            history.append((step + 1, d))
            if d > best[0]:
                best = (d, {k: v.detach().clone()
                            for k, v in student.state_dict().items()})
            if d >= 0.95 and reached_step is None:
                reached_step = step + 1
            # stop once the criterion holds AND 100 steps have elapsed for
            # the frozen-teacher check
            if d >= 0.95 and step + 1 >= 100:
                break
    if best[1] is not None:
        student.load_state_dict(best[1])

    param_sha_after = {e.expert_id: param_checksum(e.model)
                       for e in registry.all_experts()}
    disk_sha_after = {e.expert_id: file_sha256(e.checkpoint_ref)
                      for e in registry.all_experts()}

    student.eval()
    student_dir = root / "student"
    student_path = save_student(student, str(student_dir))
    return SimpleNamespace(
        suite=suite, samples=samples, registry=registry, arch=arch,
        student=student, student_cfg=student_cfg, cfg=cfg,
        history=history, reached_step=reached_step, breakdowns=breakdowns,
        param_sha_before=param_sha_before, param_sha_at_100=param_sha_at_100,
        param_sha_after=param_sha_after,
        disk_sha_before=disk_sha_before, disk_sha_after=disk_sha_after,
        max_expert_grad=max_expert_grad,
        experts_dir=str(experts_dir), student_path=student_path,
    )

"""Desk-scale generalization comparison: amalgamated student vs ablated twin.

Builds a multi-task suite with one held-out center per task (ExVal), trains
frozen teachers on the training center, then trains two students per seed:
one with the full objective and one with amalgamation disabled (no expert
routed, align and reg weights zero). Reports per-task InVal/ExVal dice and
the signed generalization gap for both arms, in the same layout as the
multi-center comparison tables.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import metrics
from . import synthdata as sd
from .amalgamation import AmalgamationLayer
from .experts import ExpertArchConfig, ExpertRegistry
from .foundation import StudentConfig, build_student
from .inference import universal_infer
from .training import (TrainConfig, _make_optimizer, collate, ka_step, lr_schedule,
                       pretrain_expert, pretrain_external_expert)


def _gen_samples(suite, centers, per_center, shape, tag):
    out = []
    for spec in suite:
        for center in centers:
            for i in range(per_center):
                seed = sd.stable_seed("bench", tag, spec.task_id, center, i)
                out.append(sd.synth_volume(
                    spec, center, shape, rng_seed=seed,
                    sample_id=f"{spec.task_id}-{center}-{tag}{i}"))
    return out


def _eval_by_split(student, eval_samples, inval_center):
    per_task: dict[str, dict[str, list[float]]] = {}
    for s in eval_samples:
        result = universal_infer(s.image, s.prompt, student, s.task_id)
        labels = [int(l) for l in np.unique(s.label) if l != 0]
        case = float(np.mean([metrics.dice(result.labels, s.label, l) for l in labels]))
        split = "InVal" if s.center_id == inval_center else "ExVal"
        per_task.setdefault(s.task_id, {}).setdefault(split, []).append(case)
    return {task: {split: float(np.mean(v)) for split, v in splits.items()}
            for task, splits in per_task.items()}


def _train_arm(suite, train_samples, registry, student_cfg, cfg, steps_log=None):
    student = build_student(student_cfg, {t.task_id: t.label_ids for t in suite},
                            seed=cfg.seed)
    amalg = AmalgamationLayer(student.model_dim, num_heads=student_cfg.num_heads)
    if cfg.use_amalgamation:
        for e in registry.all_experts():
            amalg.ensure_projection(e.expert_id, e.feature_dim)
    params = [p for p in list(student.parameters()) + list(amalg.parameters())
              if p.requires_grad]
    optimizer = _make_optimizer(params, cfg)
    n = len(train_samples)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            sd.stable_seed("bench-order", cfg.seed, epoch)).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = collate([train_samples[i] for i in order[start:start + cfg.batch_size]])
            for g in optimizer.param_groups:
                g["lr"] = lr_schedule(step, total_steps, cfg.lr, cfg.schedule)
            breakdown = ka_step(batch, student, amalg, registry, cfg, optimizer)
            if steps_log is not None:
                steps_log.append(breakdown.total)
            step += 1
    student.eval()
    return student


def run_desk_benchmark(
    seeds=(0, 1, 2),
    n_tasks: int = 3,
    shape=(32, 32, 32),
    train_per_center: int = 4,
    eval_per_center: int = 2,
    suite_seed: int = 701,
    expert_epochs: int = 50,
    student_epochs: int = 40,
    student_lr: float = 3e-3,
    lambda_: float = 0.1,
    out_dir: str | None = None,
    verbose: bool = False,
) -> dict:
    """Train both arms across seeds; returns the aggregate comparison dict."""
    suite = sd.gen_task_suite(n_tasks, 2, suite_seed)
    inval_center, exval_center = suite[0].center_ids
    train_samples = _gen_samples(suite, [inval_center], train_per_center, shape, "tr")
    eval_samples = _gen_samples(suite, [inval_center, exval_center],
                                eval_per_center, shape, "ev")

    arch = ExpertArchConfig(depth=2, base_channels=16, volume_shape=tuple(shape))
    pre_cfg = TrainConfig(stage="pretrain", lr=0.01, epochs=expert_epochs,
                          batch_size=2, seed=suite_seed, roi=tuple(shape), val_every=10)
    registry = ExpertRegistry()
    for spec in suite:
        own = [s for s in train_samples if s.task_id == spec.task_id]
        registry.register(pretrain_expert(spec, own, pre_cfg, arch=arch,
                                          val_samples=own))
    registry.register(pretrain_external_expert(suite, train_samples, pre_cfg,
                                               arch=arch))
    if verbose:
        print("teachers ready:",
              {e.expert_id: round(e.inval_dice, 3) for e in registry.all_experts()})

    student_cfg = StudentConfig(embed_dim=16, num_heads=2, decoder_channels=16)
    per_seed = []
    for seed in seeds:
        arms = {}
        for arm in ("amalgamated", "ablated"):
            on = arm == "amalgamated"
            cfg = TrainConfig(stage="amalgamate", lr=student_lr, schedule="cosine",
                              epochs=student_epochs, batch_size=4,
                              lambda_=lambda_ if on else 0.0,
                              align_weight=1.0 if on else 0.0,
                              use_amalgamation=on, seed=seed, roi=tuple(shape))
            student = _train_arm(suite, train_samples, registry, student_cfg, cfg)
            arms[arm] = _eval_by_split(student, eval_samples, inval_center)
            if verbose:
                print(f"seed {seed} {arm}: {arms[arm]}")
        per_seed.append({"seed": seed, **arms})

    def seed_mean(arm, task, split):
        return float(np.mean([r[arm][task][split] for r in per_seed]))

    tasks = sorted(t.task_id for t in suite)
    table = {}
    for task in tasks:
        table[task] = {}
        for arm in ("ablated", "amalgamated"):
            inval = seed_mean(arm, task, "InVal")
            exval = seed_mean(arm, task, "ExVal")
            table[task][arm] = {"InVal": inval, "ExVal": exval, "G": exval - inval}

    mean_exval = {arm: float(np.mean([table[t][arm]["ExVal"] for t in tasks]))
                  for arm in ("ablated", "amalgamated")}
    result = {
        "seeds": list(seeds),
        "tasks": tasks,
        "inval_center": inval_center,
        "exval_center": exval_center,
        "per_seed": per_seed,
        "table": table,
        "mean_exval": mean_exval,
        "amalgamation_wins": mean_exval["amalgamated"] >= mean_exval["ablated"],
        "teachers": {e.expert_id: e.inval_dice for e in registry.all_experts()},
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "benchmark.json"), "w") as f:
            json.dump(result, f, indent=1)
        with open(os.path.join(out_dir, "benchmark_table.txt"), "w") as f:
            f.write(format_benchmark_table(result) + "\n")
    return result


def format_benchmark_table(result: dict) -> str:
    """Dice (%) per task: ablated vs amalgamated, InVal / ExVal (signed G)."""
    def cell(entry):
        arrow = "↓" if entry["G"] < 0 else "↑"
        return (f"{100 * entry['InVal']:5.1f} / {100 * entry['ExVal']:5.1f} "
                f"({arrow}{abs(100 * entry['G']):.1f})")

    lines = [f"{'task':<10} {'ablated InVal/ExVal (G)':>28} {'amalgamated InVal/ExVal (G)':>30}"]
    for task in result["tasks"]:
        row = result["table"][task]
        lines.append(f"{task:<10} {cell(row['ablated']):>28} {cell(row['amalgamated']):>30}")
    lines.append(
        f"{'mean ExVal':<10} {100 * result['mean_exval']['ablated']:>28.1f} "
        f"{100 * result['mean_exval']['amalgamated']:>30.1f}")
    return "\n".join(lines)

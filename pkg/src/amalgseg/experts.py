"""Task-specific and task-agnostic teacher networks.

Teachers are small residual 3D U-Nets trained per task (or on the union of
all tasks' foreground for the external one), then frozen. The amalgamation
stage consumes their flattened bottleneck feature tokens and their logits;
frozen teachers never contribute gradients.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn

from .synthdata import TaskSpec, stable_seed


@dataclass(frozen=True)
class ExpertArchConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    volume_shape: tuple[int, int, int] = (32, 96, 96)

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 8:
            raise ValueError(f"base_channels must be >= 8, got {self.base_channels}")
        factor = 2 ** self.depth
        if min(self.volume_shape) // factor < 1:
            raise ValueError(
                f"depth {self.depth} downsamples {self.volume_shape} below 1 voxel")

    @property
    def feature_dim(self) -> int:
        return self.base_channels * 2 ** self.depth


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        groups = 8 if c_out % 8 == 0 else 1
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.act = nn.ReLU(inplace=True)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class ExpertNet(nn.Module):
    """Residual U-Net; forward returns (bottleneck tokens, voxel logits)."""

    def __init__(self, arch: ExpertArchConfig, num_classes: int):
        super().__init__()
        self.arch = arch
        self.num_classes = num_classes
        chans = [arch.base_channels * 2 ** i for i in range(arch.depth + 1)]
        self.stem = ResBlock(arch.in_channels, chans[0])
        self.downs = nn.ModuleList()
        self.enc_blocks = nn.ModuleList()
        for i in range(arch.depth):
            self.downs.append(nn.Conv3d(chans[i], chans[i + 1], 2, stride=2))
            self.enc_blocks.append(ResBlock(chans[i + 1], chans[i + 1]))
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in reversed(range(arch.depth)):
            self.ups.append(nn.ConvTranspose3d(chans[i + 1], chans[i], 2, stride=2))
            self.dec_blocks.append(ResBlock(2 * chans[i], chans[i]))
        self.head = nn.Conv3d(chans[0], num_classes, 1)

    def forward(self, x):
        skips = []
        h = self.stem(x)
        for down, block in zip(self.downs, self.enc_blocks):
            skips.append(h)
            h = block(down(h))
        bottleneck = h
        for up, block, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            h = block(torch.cat([up(h), skip], dim=1))
        logits = self.head(h)
        tokens = bottleneck.flatten(2).transpose(1, 2)  # [B, N_e, C_e]
        return tokens, logits


@dataclass
class ExpertOutput:
    features: torch.Tensor  # [B, N_e, C_e]
    logits: torch.Tensor    # [B, L+1, D, H, W]


@dataclass
class ExpertHandle:
    expert_id: str
    kind: str  # "task_specific" | "external"
    task_id: str | None
    feature_dim: int
    frozen: bool = False
    checkpoint_ref: str | None = None
    model: ExpertNet | None = None
    label_ids: tuple[int, ...] = ()
    trained: bool = False
    inval_dice: float | None = None
    seed: int = 0
    calls: int = 0  # forward-pass count, used by routing-exactness checks

    def __post_init__(self):
        if self.kind == "task_specific" and not self.task_id:
            raise ValueError("task_specific expert requires a task_id")
        if self.kind == "external" and self.task_id is not None:
            raise ValueError("external expert must not carry a task_id")


def param_checksum(module: nn.Module) -> str:
    """Deterministic sha256 over all parameter and buffer tensors."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def build_expert(spec: TaskSpec, arch: ExpertArchConfig, seed: int = 0) -> ExpertHandle:
    """Fresh task-specific expert with |label_ids|+1 output channels."""
    torch.manual_seed(stable_seed("expert", spec.task_id, seed))
    model = ExpertNet(arch, num_classes=len(spec.label_ids) + 1)
    return ExpertHandle(
        expert_id=f"expert-{spec.task_id}",
        kind="task_specific",
        task_id=spec.task_id,
        feature_dim=arch.feature_dim,
        model=model,
        label_ids=tuple(spec.label_ids),
        seed=seed,
    )


def build_external_expert(arch: ExpertArchConfig, seed: int = 0) -> ExpertHandle:
    """Task-agnostic expert: foreground/background over all tasks' volumes."""
    torch.manual_seed(stable_seed("expert", "external", seed))
    model = ExpertNet(arch, num_classes=2)
    return ExpertHandle(
        expert_id="expert-external",
        kind="external",
        task_id=None,
        feature_dim=arch.feature_dim,
        model=model,
        seed=seed,
    )


def expert_forward(expert: ExpertHandle, batch: torch.Tensor) -> ExpertOutput:
    """Run the teacher; frozen teachers run under no_grad and leave no graph."""
    if expert.model is None:
        raise RuntimeError(f"expert {expert.expert_id} has no loaded checkpoint")
    shape = tuple(batch.shape[2:])
    if shape != tuple(expert.model.arch.volume_shape):
        raise ValueError(
            f"batch shape {shape} does not match expert training shape "
            f"{expert.model.arch.volume_shape}")
    expert.calls += 1
    if expert.frozen:
        with torch.no_grad():
            tokens, logits = expert.model(batch)
        return ExpertOutput(features=tokens, logits=logits)
    tokens, logits = expert.model(batch)
    return ExpertOutput(features=tokens, logits=logits)


def freeze(expert: ExpertHandle) -> ExpertHandle:
    """Freeze in place: parameters stop requiring grad, eval mode, flag set.

    Also drops any gradient state left over from training, so a frozen
    expert's gradient norm is exactly zero from here on.
    """
    if not expert.trained:
        warnings.warn(f"freezing untrained expert {expert.expert_id}", stacklevel=2)
    expert.model.requires_grad_(False)
    for p in expert.model.parameters():
        p.grad = None
    expert.model.eval()
    expert.frozen = True
    return expert


def expert_grad_norm(expert: ExpertHandle) -> float:
    total = 0.0
    for p in expert.model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return total ** 0.5


# ---------------------------------------------------------------------------
# Checkpoints and registry
# ---------------------------------------------------------------------------

def save_expert(expert: ExpertHandle, out_dir: str) -> str:
    """Write ``<id>.pt`` (state blob) + ``<id>.json`` (header); returns blob path."""
    os.makedirs(out_dir, exist_ok=True)
    pt_path = os.path.join(out_dir, f"{expert.expert_id}.pt")
    tmp = pt_path + ".tmp"
    torch.save(expert.model.state_dict(), tmp)
    os.replace(tmp, pt_path)
    header = {
        "expert_id": expert.expert_id,
        "kind": expert.kind,
        "task_id": expert.task_id,
        "arch": asdict(expert.model.arch),
        "num_classes": expert.model.num_classes,
        "label_ids": list(expert.label_ids),
        "feature_dim": expert.feature_dim,
        "seed": expert.seed,
        "inval_dice": expert.inval_dice,
        "param_sha256": param_checksum(expert.model),
    }
    with open(pt_path[:-3] + ".json", "w") as f:
        json.dump(header, f, indent=1)
    expert.checkpoint_ref = pt_path
    return pt_path


def load_expert(pt_path: str) -> ExpertHandle:
    """Load a frozen expert from its blob + header pair."""
    with open(pt_path[:-3] + ".json") as f:
        header = json.load(f)
    arch = ExpertArchConfig(
        depth=header["arch"]["depth"],
        base_channels=header["arch"]["base_channels"],
        in_channels=header["arch"]["in_channels"],
        volume_shape=tuple(header["arch"]["volume_shape"]),
    )
    model = ExpertNet(arch, num_classes=header["num_classes"])
    model.load_state_dict(torch.load(pt_path, weights_only=True))
    handle = ExpertHandle(
        expert_id=header["expert_id"],
        kind=header["kind"],
        task_id=header["task_id"],
        feature_dim=header["feature_dim"],
        checkpoint_ref=pt_path,
        model=model,
        label_ids=tuple(header["label_ids"]),
        trained=True,
        inval_dice=header["inval_dice"],
        seed=header["seed"],
    )
    return freeze(handle)


@dataclass
class ExpertRegistry:
    """Frozen teachers for one amalgamation run: per-task plus one external."""

    tasks: dict[str, ExpertHandle] = field(default_factory=dict)
    external: ExpertHandle | None = None

    def register(self, expert: ExpertHandle) -> None:
        if expert.kind == "external":
            if self.external is not None:
                raise ValueError("exactly one external expert is allowed")
            self.external = expert
        else:
            self.tasks[expert.task_id] = expert

    def all_experts(self) -> list[ExpertHandle]:
        out = list(self.tasks.values())
        if self.external is not None:
            out.append(self.external)
        return out

    def save(self, path: str) -> None:
        payload = {
            "tasks": {tid: e.checkpoint_ref for tid, e in self.tasks.items()},
            "external": self.external.checkpoint_ref if self.external else None,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=1)

    @classmethod
    def load(cls, path: str) -> "ExpertRegistry":
        with open(path) as f:
            payload = json.load(f)
        reg = cls()
        for tid, ref in payload["tasks"].items():
            reg.tasks[tid] = load_expert(ref)
        if payload.get("external"):
            reg.external = load_expert(payload["external"])
        return reg

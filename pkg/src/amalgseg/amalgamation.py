"""Adaptive fusion of teacher knowledge into the student's bottleneck tokens.

The fusion stack is three attention stages: self-attention over the student's
own tokens, cross-attention querying the routed task teacher's tokens, and
cross-attention querying the task-agnostic teacher's tokens. Routing is a
hard per-sample task-id lookup; teachers without a matching sample in the
mini-batch are never run. Cross-attention output projections start at zero,
so the merged feature equals the student feature until training moves them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .attention import MultiheadAttention
from .experts import ExpertRegistry
from .synthdata import stable_seed


class RoutingError(ValueError):
    """A batch sample's task has no registered expert."""


@dataclass
class RoutingTable:
    per_sample_task: list[str]
    task_to_indices: dict[str, list[int]]
    selected_expert_ids: list[str]


@dataclass
class FeatureBundle:
    f_s: torch.Tensor                       # [B, N_s, C_m] student tokens
    f_e: dict[str, torch.Tensor] = field(default_factory=dict)  # task -> [B_k, N_e, C_m]
    f_ext: torch.Tensor | None = None       # [B, N_x, C_m]
    f_m: torch.Tensor | None = None         # [B, N_s, C_m] merged


def route_experts(batch_tasks, registry: ExpertRegistry, sample_ids=None) -> RoutingTable:
    """Exact-match routing of batch samples to their task's frozen expert."""
    task_to_indices: dict[str, list[int]] = {}
    for i, task in enumerate(batch_tasks):
        if task not in registry.tasks:
            sid = sample_ids[i] if sample_ids else f"index {i}"
            raise RoutingError(f"no expert for task {task!r} (sample {sid})")
        task_to_indices.setdefault(task, []).append(i)
    return RoutingTable(
        per_sample_task=list(batch_tasks),
        task_to_indices=task_to_indices,
        selected_expert_ids=[registry.tasks[t].expert_id for t in sorted(task_to_indices)],
    )


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual self-attention; the 'A' applied to encoder tokens."""

    def __init__(self, dim, num_heads=4):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, num_heads)

    def forward(self, tokens, need_weights=False):
        normed = self.norm(tokens)
        out, weights = self.attn(normed, normed, need_weights=need_weights)
        out = tokens + out
        return (out, weights) if need_weights else out


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual cross-attention with zero-initialized output proj."""

    def __init__(self, dim, num_heads=4):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, num_heads, zero_init_out=True)

    def forward(self, queries, keys_values, need_weights=False):
        out, weights = self.attn(self.norm_q(queries), self.norm_kv(keys_values),
                                 need_weights=need_weights)
        out = queries + out
        return (out, weights) if need_weights else out


class AmalgamationLayer(nn.Module):
    """Expert projections plus the two cross-attention stages.

    Per-expert input projections map teacher channels to the student's token
    dim. They are created lazily at first use (deterministically seeded per
    expert id) and belong to the student's trainable parameter set; the
    teachers themselves stay frozen.
    """

    def __init__(self, model_dim: int, num_heads: int = 4):
        super().__init__()
        self.model_dim = model_dim
        self.cross_task = CrossAttentionBlock(model_dim, num_heads)
        self.cross_external = CrossAttentionBlock(model_dim, num_heads)
        self.projections = nn.ModuleDict()

    def ensure_projection(self, expert_id: str, feature_dim: int) -> nn.Linear:
        key = expert_id.replace(".", "_")
        if key not in self.projections:
            proj = nn.Linear(feature_dim, self.model_dim)
            if feature_dim == self.model_dim:
                with torch.no_grad():
                    proj.weight.copy_(torch.eye(self.model_dim))
                    proj.bias.zero_()
            else:
                gen = torch.Generator().manual_seed(stable_seed("proj", expert_id))
                with torch.no_grad():
                    w = torch.empty_like(proj.weight)
                    nn.init.xavier_uniform_(w, generator=gen)
                    proj.weight.copy_(w)
                    proj.bias.zero_()
            self.projections[key] = proj
        proj = self.projections[key]
        if proj.in_features != feature_dim:
            raise ValueError(
                f"expert {expert_id} feature dim {feature_dim} does not match "
                f"stored projection ({proj.in_features})")
        return proj

    def project_expert(self, raw_features: torch.Tensor, expert_id: str) -> torch.Tensor:
        proj = self.ensure_projection(expert_id, raw_features.shape[-1])
        return proj(raw_features)

    def forward(self, f_s: torch.Tensor, routed: dict[str, tuple[list[int], torch.Tensor]],
                f_ext: torch.Tensor) -> FeatureBundle:
        """Merge: f_c = crossattn(f_s, task expert tokens); f_m = crossattn(f_c, f_ext)."""
        b = f_s.shape[0]
        covered = sorted(i for idx, _ in routed.values() for i in idx)
        if covered != list(range(b)):
            raise ValueError("routing must cover every batch sample exactly once")

        slots: list[torch.Tensor | None] = [None] * b
        for task in sorted(routed):
            idx, tokens = routed[task]
            if tokens.shape[1] == 0:
                raise ValueError(f"task {task} routed zero expert tokens")
            out = self.cross_task(f_s[idx], tokens)
            for j, i in enumerate(idx):
                slots[i] = out[j]
        f_c = torch.stack(slots, dim=0)
        f_m = self.cross_external(f_c, f_ext)
        return FeatureBundle(
            f_s=f_s,
            f_e={task: tokens for task, (idx, tokens) in routed.items()},
            f_ext=f_ext,
            f_m=f_m,
        )


def align_loss(f_s: torch.Tensor, f_m: torch.Tensor, norm: str = "rms") -> torch.Tensor:
    """Distance between student and merged features.

    ``rms`` (default) is the root of the per-element mean squared difference,
    keeping the magnitude independent of batch and token count; ``l2`` is the
    plain Euclidean norm. Exactly zero (with zero gradient) when the inputs
    coincide, which is the state at step 0.
    """
    if f_s.shape != f_m.shape:
        raise ValueError(f"shape mismatch {tuple(f_s.shape)} vs {tuple(f_m.shape)}")
    sq = (f_s - f_m).pow(2)
    total = sq.mean() if norm == "rms" else sq.sum()
    if norm not in ("rms", "l2"):
        raise ValueError(f"unknown norm {norm!r}")
    if float(total.detach()) == 0.0:
        return total  # sqrt is not differentiable at 0; mean-square has clean zero grads
    return total.sqrt()

"""The student: hierarchical windowed-attention encoder, skip decoder,
box-prompt encoder, and a lightweight per-task mask decoder.

The encoder patch-embeds the volume and halves resolution (doubling channels
by ``dim_growth``) at each stage; bottleneck tokens feed the fusion layer
during training and go straight to the decoder at inference. Prompts enter
twice: added-and-normed onto the dense decoder output, and again as a
conditioning vector inside the mask decoder.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .amalgamation import SelfAttentionBlock
from .attention import MultiheadAttention, Mlp, fit_window, window_partition, window_unpartition
from .synthdata import PromptBox, stable_seed


@dataclass(frozen=True)
class StudentConfig:
    in_channels: int = 1
    embed_dim: int = 48
    patch_size: int = 2
    num_stages: int = 3
    num_heads: int = 4
    window: tuple[int, int, int] = (6, 6, 6)
    dim_growth: int = 2
    mlp_ratio: float = 2.0
    decoder_channels: int = 16
    conv_kernel: int = 3
    prompt_freqs: int = 6

    def __post_init__(self):
        if self.num_stages < 1:
            raise ValueError("need at least one encoder stage")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def stage_dims(self) -> list[int]:
        return [self.embed_dim * self.dim_growth ** i for i in range(self.num_stages + 1)]

    @property
    def model_dim(self) -> int:
        return self.stage_dims[-1]

    @property
    def total_downsampling(self) -> int:
        return self.patch_size * 2 ** self.num_stages


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class EncoderBlock(nn.Module):
    """Windowed self-attention + MLP on a spatial feature map."""

    def __init__(self, dim, num_heads, window_target, mlp_ratio):
        super().__init__()
        self.window_target = window_target
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        b, _, d, h, w = x.shape
        win = fit_window((d, h, w), self.window_target)
        t = window_partition(x, win)
        normed = self.norm1(t)
        t = t + self.attn(normed, normed)[0]
        t = t + self.mlp(self.norm2(t))
        return window_unpartition(t, win, (d, h, w), b)


class StudentEncoder(nn.Module):
    def __init__(self, cfg: StudentConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.stage_dims
        self.patch_embed = nn.Conv3d(cfg.in_channels, dims[0], cfg.patch_size, stride=cfg.patch_size)
        self.stages = nn.ModuleList(
            EncoderBlock(dims[i], cfg.num_heads, cfg.window, cfg.mlp_ratio)
            for i in range(cfg.num_stages))
        self.downs = nn.ModuleList(
            nn.Conv3d(dims[i], dims[i + 1], 2, stride=2) for i in range(cfg.num_stages))
        self.bottleneck_block = EncoderBlock(dims[-1], cfg.num_heads, cfg.window, cfg.mlp_ratio)

    def forward(self, x):
        d, h, w = x.shape[2:]
        factor = self.cfg.total_downsampling
        if any(s % factor != 0 for s in (d, h, w)):
            raise ValueError(f"spatial shape {(d, h, w)} not divisible by {factor}")
        h_map = self.patch_embed(x)
        skips = []
        for stage, down in zip(self.stages, self.downs):
            h_map = stage(h_map)
            skips.append(h_map)
            h_map = down(h_map)
        h_map = self.bottleneck_block(h_map)
        tokens = h_map.flatten(2).transpose(1, 2)  # [B, N_s, C_m]
        return skips, tokens


class StudentDecoder(nn.Module):
    def __init__(self, cfg: StudentConfig):
        super().__init__()
        dims = cfg.stage_dims
        k, pad = cfg.conv_kernel, cfg.conv_kernel // 2
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for i in reversed(range(cfg.num_stages)):
            self.ups.append(nn.ConvTranspose3d(dims[i + 1], dims[i], 2, stride=2))
            self.fuse.append(nn.Sequential(
                nn.Conv3d(2 * dims[i], dims[i], k, padding=pad),
                nn.GroupNorm(_groups(dims[i]), dims[i]),
                nn.GELU(),
            ))
        self.expand = nn.ConvTranspose3d(dims[0], cfg.decoder_channels, cfg.patch_size,
                                         stride=cfg.patch_size)
        self.out_norm = nn.GroupNorm(_groups(cfg.decoder_channels), cfg.decoder_channels)
        self.act = nn.GELU()

    def forward(self, tokens, skips):
        grid = tuple(s // 2 for s in skips[-1].shape[2:])
        h = tokens.transpose(1, 2).reshape(tokens.shape[0], -1, *grid)
        for up, fuse, skip in zip(self.ups, self.fuse, reversed(skips)):
            h = fuse(torch.cat([up(h), skip], dim=1))
        return self.act(self.out_norm(self.expand(h)))


class PromptEncoder(nn.Module):
    """Box corners -> sinusoidal features -> learned tokens [B, 3, C_m]."""

    def __init__(self, dim, num_freqs=6):
        super().__init__()
        self.num_freqs = num_freqs
        self.proj = nn.Linear(6 * num_freqs, dim)
        self.corner_embed = nn.Parameter(torch.randn(2, dim) * 0.02)
        self.type_token = nn.Parameter(torch.randn(dim) * 0.02)

    @staticmethod
    def normalize_box(box: PromptBox, volume_shape) -> tuple[tuple, tuple]:
        lo = tuple(l / s for l, s in zip(box.lo, volume_shape))
        hi = tuple(h / s for h, s in zip(box.hi, volume_shape))
        return lo, hi

    def _sinusoid(self, coords) -> torch.Tensor:
        dtype = self.proj.weight.dtype
        c = torch.as_tensor(coords, dtype=dtype, device=self.proj.weight.device)
        freqs = torch.pi * 2 ** torch.arange(self.num_freqs, dtype=dtype, device=c.device)
        angles = c[:, None] * freqs[None, :]
        return torch.cat([angles.sin(), angles.cos()], dim=-1).reshape(-1)

    def forward(self, box: PromptBox, volume_shape) -> torch.Tensor:
        lo, hi = self.normalize_box(box, volume_shape)
        tok_lo = self.proj(self._sinusoid(lo)) + self.corner_embed[0]
        tok_hi = self.proj(self._sinusoid(hi)) + self.corner_embed[1]
        return torch.stack([tok_lo, tok_hi, self.type_token], dim=0)[None]  # [1, 3, C_m]


class MaskDecoder(nn.Module):
    """Two conv layers conditioned on the prompt, then one head per task."""

    def __init__(self, c_dense, model_dim, task_classes: dict[str, int], kernel=3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv3d(c_dense, c_dense, kernel, padding=pad)
        self.norm1 = nn.GroupNorm(_groups(c_dense), c_dense)
        self.conv2 = nn.Conv3d(c_dense, c_dense, kernel, padding=pad)
        self.norm2 = nn.GroupNorm(_groups(c_dense), c_dense)
        self.act = nn.GELU()
        self.film = nn.Linear(model_dim, c_dense)
        self.heads = nn.ModuleDict({
            task: nn.Conv3d(c_dense, n_classes, 1) for task, n_classes in task_classes.items()})

    def forward(self, fused, e_pro, task_id):
        if task_id not in self.heads:
            raise KeyError(f"no segmentation head for task {task_id!r}")
        h = self.act(self.norm1(self.conv1(fused)))
        h = h + self.film(e_pro.mean(dim=1))[:, :, None, None, None]
        h = self.act(self.norm2(self.conv2(h)))
        return self.heads[task_id](h)


class StudentModel(nn.Module):
    """Full student; owns every trainable piece used at inference time."""

    def __init__(self, cfg: StudentConfig, task_labels: dict[str, tuple[int, ...]]):
        super().__init__()
        self.cfg = cfg
        self.task_labels = {t: tuple(int(l) for l in labs) for t, labs in task_labels.items()}
        self.encoder = StudentEncoder(cfg)
        self.self_attn = SelfAttentionBlock(cfg.model_dim, cfg.num_heads)
        self.decoder = StudentDecoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg.model_dim, cfg.prompt_freqs)
        self.prompt_to_dense = nn.Linear(cfg.model_dim, cfg.decoder_channels)
        self.mask_decoder = MaskDecoder(
            cfg.decoder_channels, cfg.model_dim,
            {t: len(labs) + 1 for t, labs in self.task_labels.items()},
            kernel=cfg.conv_kernel)
        # small enough that normalized channel variance stays within 1e-5 of 1
        self.fuse_eps = 1e-8

    @property
    def model_dim(self) -> int:
        return self.cfg.model_dim

    def encoder_forward(self, x):
        return self.encoder(x)

    def student_tokens(self, x):
        """Encoder + self-attention: the f_s of the training objective."""
        skips, tokens = self.encoder(x)
        return skips, self.self_attn(tokens)

    def decoder_forward(self, tokens, skips):
        return self.decoder(tokens, skips)

    def encode_prompt(self, box: PromptBox, volume_shape) -> torch.Tensor:
        return self.prompt_encoder(box, volume_shape)

    def encode_prompts(self, boxes, volume_shape) -> torch.Tensor:
        return torch.cat([self.prompt_encoder(b, volume_shape) for b in boxes], dim=0)

    def fuse_prompt(self, dense, e_pro):
        """Add the projected prompt, then normalize channels per position."""
        p = self.prompt_to_dense(e_pro.mean(dim=1))
        x = dense + p[:, :, None, None, None]
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.fuse_eps)

    def mask_decode(self, fused, e_pro, task_id, target_label=None):
        """Logits over {background} + the task's labels; optional binary mask.

        The binary mask marks voxels whose argmax channel is the prompt's
        target label.
        """
        logits = self.mask_decoder(fused, e_pro, task_id)
        binary = None
        if target_label is not None:
            labels = self.task_labels[task_id]
            if target_label not in labels:
                raise ValueError(f"label {target_label} not in task {task_id!r}")
            channel = labels.index(target_label) + 1
            binary = logits.argmax(dim=1) == channel
        return logits, binary

    def label_map_from_logits(self, logits, task_id):
        """Argmax channels mapped back to the task's original label ids."""
        labels = self.task_labels[task_id]
        lut = torch.tensor([0, *labels], dtype=torch.long, device=logits.device)
        return lut[logits.argmax(dim=1)]


def build_student(cfg: StudentConfig, task_labels: dict[str, tuple[int, ...]],
                  seed: int = 0) -> StudentModel:
    torch.manual_seed(stable_seed("student", seed))
    return StudentModel(cfg, task_labels)


def save_student(student: StudentModel, out_dir: str, name: str = "student",
                 manifest_ref: str | None = None) -> str:
    """Write ``<name>.pt`` blob + ``<name>.json`` header; returns blob path."""
    os.makedirs(out_dir, exist_ok=True)
    pt_path = os.path.join(out_dir, f"{name}.pt")
    tmp = pt_path + ".tmp"
    torch.save(student.state_dict(), tmp)
    os.replace(tmp, pt_path)
    header = {
        "config": asdict(student.cfg),
        "model_dim": student.model_dim,
        "num_stages": student.cfg.num_stages,
        "task_labels": {t: list(l) for t, l in student.task_labels.items()},
        "manifest_ref": manifest_ref,
    }
    with open(pt_path[:-3] + ".json", "w") as f:
        json.dump(header, f, indent=1)
    return pt_path


def load_student(pt_path: str) -> StudentModel:
    with open(pt_path[:-3] + ".json") as f:
        header = json.load(f)
    raw = dict(header["config"])
    raw["window"] = tuple(raw["window"])
    cfg = StudentConfig(**raw)
    student = StudentModel(cfg, {t: tuple(l) for t, l in header["task_labels"].items()})
    student.load_state_dict(torch.load(pt_path, weights_only=True))
    student.eval()
    return student

"""Attention primitives shared by the student encoder and the fusion layer."""

from __future__ import annotations

import torch
import torch.nn as nn


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention that can hand back its softmax weights."""

    def __init__(self, dim, num_heads, kv_dim=None, zero_init_out=False):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        kv_dim = kv_dim or dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)
        if zero_init_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, q_in, kv_in, need_weights=False):
        b, nq, _ = q_in.shape
        nk = kv_in.shape[1]
        q = self.q(q_in).view(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(kv_in).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(kv_in).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, -1)
        out = self.out(out)
        return (out, attn) if need_weights else (out, None)


class Mlp(nn.Module):
    def __init__(self, dim, ratio=2.0):
        super().__init__()
        hidden = max(1, int(dim * ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def fit_window(resolution: tuple[int, int, int], target: tuple[int, int, int]):
    """Largest per-axis divisor of the resolution not exceeding the target.

    Guarantees exact window tiling without padding; degenerates to plain
    attention when the resolution itself fits in the target.
    """
    out = []
    for res, tgt in zip(resolution, target):
        w = 1
        for cand in range(min(res, tgt), 0, -1):
            if res % cand == 0:
                w = cand
                break
        out.append(w)
    return tuple(out)


def window_partition(x: torch.Tensor, window: tuple[int, int, int]) -> torch.Tensor:
    """[B,C,D,H,W] -> [B*num_windows, window_volume, C] token groups."""
    b, c, d, h, w = x.shape
    wd, wh, ww = window
    x = x.view(b, c, d // wd, wd, h // wh, wh, w // ww, ww)
    x = x.permute(0, 2, 4, 6, 3, 5, 7, 1)
    return x.reshape(-1, wd * wh * ww, c)


def window_unpartition(tokens: torch.Tensor, window, grid, batch: int) -> torch.Tensor:
    """Inverse of :func:`window_partition` back to [B,C,D,H,W]."""
    wd, wh, ww = window
    d, h, w = grid
    c = tokens.shape[-1]
    x = tokens.view(batch, d // wd, h // wh, w // ww, wd, wh, ww, c)
    x = x.permute(0, 7, 1, 4, 2, 5, 3, 6)
    return x.reshape(batch, c, d, h, w)

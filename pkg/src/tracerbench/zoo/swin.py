"""Pixel-level shifted-window transformer."""

from __future__ import annotations

import torch.nn.functional as F
from torch import nn

from ..tensor import NORM_EPS, WindowAttention


class SwinBlock(nn.Module):
    """Pre-norm attention and MLP sublayers, each with a residual."""

    def __init__(self, dim, heads, window, shifted, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=NORM_EPS)
        self.attn = WindowAttention(dim, heads, window, shifted)
        self.norm2 = nn.LayerNorm(dim, eps=NORM_EPS)
        hidden = int(round(dim * mlp_ratio))
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Swin(nn.Module):
    """Stack of ``depth`` window-attention blocks at (patch) pixel resolution.

    Every second block uses windows shifted by half their extent unless
    ``config.shift`` is false. Grids whose patch counts do not tile the
    window are resized with nearest neighbours.
    """

    def __init__(self, config, n_in, n_out):
        super().__init__()
        self.config = config
        p, dim = config.patch_size, config.width
        self.embed = nn.Conv2d(n_in, dim, kernel_size=p, stride=p)
        self.blocks = nn.ModuleList(
            SwinBlock(dim, config.heads, config.window, config.shift and i % 2 == 1, config.mlp_ratio)
            for i in range(config.depth))
        self.norm = nn.LayerNorm(dim, eps=NORM_EPS)
        self.head = nn.Linear(dim, n_out * p * p)
        self.n_out = n_out
        if config.final_init == "zero":
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        B, _, H, W = x.shape
        p = self.config.patch_size
        wh, ww = self.config.window
        mh, mw = p * wh, p * ww
        Hr, Wr = -(-H // mh) * mh, -(-W // mw) * mw
        resized = (Hr, Wr) != (H, W)
        if resized:
            x = F.interpolate(x, size=(Hr, Wr), mode="nearest")
        h = self.embed(x).permute(0, 2, 3, 1)           # [B, h, w, dim]
        for block in self.blocks:
            h = block(h)
        y = self.head(self.norm(h))                     # [B, h, w, n_out*p*p]
        y = y.permute(0, 3, 1, 2)
        if p > 1:
            y = F.pixel_shuffle(y, p)
        if resized:
            y = F.interpolate(y, size=(H, W), mode="nearest")
        return y


def swin_forward(model, x):
    """Unbatched channels-last evaluation: ``[H, W, C] -> [H, W, C']``."""
    return model(x.permute(2, 0, 1).unsqueeze(0))[0].permute(1, 2, 0)

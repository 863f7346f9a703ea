"""Zonally periodic UNet."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..tensor import BN_MOMENTUM, NORM_EPS, PeriodicConv2d

LEAKY_SLOPE = 0.01


def _norm(kind, c):
    if kind == "batch":
        return nn.BatchNorm2d(c, eps=NORM_EPS, momentum=BN_MOMENTUM)
    if kind == "layer":
        return nn.GroupNorm(1, c, eps=NORM_EPS)
    return nn.Identity()


class ConvBlock(nn.Module):
    """Two (conv3x3, LeakyReLU, norm) units with a residual connection."""

    def __init__(self, c_in, c_out, norm="batch"):
        super().__init__()
        self.conv1 = PeriodicConv2d(c_in, c_out, 3)
        self.norm1 = _norm(norm, c_out)
        self.conv2 = PeriodicConv2d(c_out, c_out, 3)
        self.norm2 = _norm(norm, c_out)
        self.skip = None if c_in == c_out else PeriodicConv2d(c_in, c_out, 1, bias=False)

    def forward(self, x):
        h = self.norm1(F.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        h = self.norm2(F.leaky_relu(self.conv2(h), LEAKY_SLOPE))
        return h + (x if self.skip is None else self.skip(x))


class UNet(nn.Module):
    """Encoder/decoder with ``depth`` pooling stages and skip connections.

    Inputs ``[B, C, H, W]`` are resized bilinearly to multiples of
    ``2**depth`` when needed and the output is resized back with nearest
    neighbours.
    """

    def __init__(self, config, n_in, n_out):
        super().__init__()
        self.config = config
        w, d = config.width, config.depth
        chans = [w * 2 ** i for i in range(d + 1)]
        self.stem = PeriodicConv2d(n_in, w, 7)
        self.down = nn.ModuleList(ConvBlock(chans[i], chans[i + 1], config.norm) for i in range(d))
        self.mid = ConvBlock(chans[d], chans[d], config.norm)
        self.up = nn.ModuleList(ConvBlock(2 * chans[i + 1], chans[i], config.norm) for i in reversed(range(d)))
        self.head = PeriodicConv2d(w, n_out, 1)
        if config.final_init == "zero":
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    @property
    def multiple(self):
        return 2 ** self.config.depth

    def forward(self, x):
        H, W = x.shape[-2:]
        k = self.multiple
        Hr, Wr = -(-H // k) * k, -(-W // k) * k
        resized = (Hr, Wr) != (H, W)
        if resized:
            x = F.interpolate(x, size=(Hr, Wr), mode="bilinear", align_corners=False)
        h = self.stem(x)
        skips = []
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.mid(h)
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1))
        y = self.head(h)
        if resized:
            y = F.interpolate(y, size=(H, W), mode="nearest")
        return y


def unet_forward(model, x):
    """Unbatched evaluation: ``[C, H, W] -> [C', H, W]``."""
    return model(x.unsqueeze(0))[0]

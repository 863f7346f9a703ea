"""Spherical Fourier neural operator."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..exceptions import InvalidArgumentError
from ..harmonics import SHT, get_sht
from ..tensor import NORM_EPS


def default_lmax(n_lat, n_lon):
    return min(n_lat - 2, n_lon // 2 - 1)


class SpectralConv(nn.Module):
    """Complex channel mixing per degree ``l``, shared across orders ``m``.

    Sharing across ``m`` keeps the map diagonal in the zonal Fourier basis,
    hence equivariant to any zonal rotation.
    """

    def __init__(self, dim, lmax):
        super().__init__()
        self.lmax = lmax
        scale = 1.0 / math.sqrt(2 * dim)
        self.weight = nn.Parameter(scale * torch.randn(lmax + 1, dim, dim, 2))

    def forward(self, x):
        H, W = x.shape[-2:]
        if self.lmax > H - 1 or 2 * self.lmax >= W:
            raise InvalidArgumentError(f"lmax={self.lmax} exceeds what a {H}x{W} grid resolves")
        sht = get_sht(H, W, self.lmax)
        c = sht.forward(x)                                   # [B, C, l, m]
        w = torch.view_as_complex(self.weight).to(c.dtype)   # [l, out, in]
        c = torch.einsum("loi,bilm->bolm", w, c)
        return sht.inverse(c).to(x.dtype)


class SFNOBlock(nn.Module):
    def __init__(self, dim, lmax, mlp_ratio, norm):
        super().__init__()
        self.spectral = SpectralConv(dim, lmax)
        self.local = nn.Conv2d(dim, dim, 1)
        hidden = int(round(dim * mlp_ratio))
        self.mlp1 = nn.Conv2d(dim, hidden, 1)
        self.mlp2 = nn.Conv2d(hidden, dim, 1)
        self.norm = nn.GroupNorm(1, dim, eps=NORM_EPS) if norm == "layer" else nn.Identity()

    def forward(self, x):
        x = x + F.gelu(self.spectral(self.norm(x)) + self.local(x))
        return x + self.mlp2(F.gelu(self.mlp1(x)))


class SFNO(nn.Module):
    """Pointwise lift, ``depth`` spectral blocks, pointwise projection."""

    def __init__(self, config, n_in, n_out, grid_shape=None):
        super().__init__()
        self.config = config
        lmax = config.lmax
        if lmax is None:
            if grid_shape is None:
                raise InvalidArgumentError("sfno needs lmax or the grid shape")
            lmax = default_lmax(*grid_shape)
        if grid_shape is not None:
            SHT._check_lmax(*grid_shape, lmax)
        self.lmax = lmax
        dim = config.width
        self.lift = nn.Conv2d(n_in, dim, 1)
        self.blocks = nn.ModuleList(SFNOBlock(dim, lmax, config.mlp_ratio, config.norm)
                                    for _ in range(config.depth))
        self.head = nn.Conv2d(dim, n_out, 1)
        if config.final_init == "zero":
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        h = self.lift(x)
        for block in self.blocks:
            h = block(h)
        return self.head(h)


def sfno_forward(model, x):
    """Unbatched channels-last evaluation: ``[H, W, C] -> [H, W, C']``."""
    return model(x.permute(2, 0, 1).unsqueeze(0))[0].permute(1, 2, 0)

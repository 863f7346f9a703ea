"""Neural-layer primitives on top of torch autograd.

torch's define-by-run tape records every op of a forward pass and
``backward`` replays it in reverse. This module supplies the operations the
model zoo needs beyond stock torch (zonally periodic convolution, windowed
attention with pole masking), a uniform ``layer_forward`` entry point and an
independent finite-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import InvalidArgumentError

PAD_MODES = ("zonal_periodic_zero_meridional", "zero")
BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def set_precision(mode):
    """Select the default floating dtype: ``"single"`` or ``"double"``."""
    dtypes = {"single": torch.float32, "double": torch.float64}
    if mode not in dtypes:
        raise InvalidArgumentError(f"unknown precision {mode!r}")
    torch.set_default_dtype(dtypes[mode])
    return dtypes[mode]


def dtype_for(mode):
    return {"single": torch.float32, "double": torch.float64}[mode]


# -- convolution -------------------------------------------------------------

def pad_lat_lon(x, ph, pw, mode="zonal_periodic_zero_meridional"):
    """Pad ``[..., H, W]``: longitude circularly (or zeros), latitude with zeros."""
    if mode not in PAD_MODES:
        raise InvalidArgumentError(f"unknown pad mode {mode!r}")
    if pw:
        if mode == "zonal_periodic_zero_meridional":
            x = torch.cat([x[..., -pw:], x, x[..., :pw]], dim=-1)
        else:
            x = F.pad(x, (pw, pw, 0, 0))
    if ph:
        x = F.pad(x, (0, 0, ph, ph))
    return x


def conv2d(x, kernel, bias=None, pad_mode="zonal_periodic_zero_meridional"):
    """Same-size cross-correlation of ``[C, H, W]`` or ``[B, C, H, W]`` inputs."""
    if kernel.ndim != 4:
        raise InvalidArgumentError(f"kernel must be [C', C, kh, kw], got {tuple(kernel.shape)}")
    unbatched = x.ndim == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise InvalidArgumentError(
            f"input {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}")
    kh, kw = kernel.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgumentError("kernel extents must be odd")
    if x.shape[-1] < kw // 2:
        raise InvalidArgumentError("longitude extent smaller than the periodic halo")
    y = F.conv2d(pad_lat_lon(x, kh // 2, kw // 2, pad_mode), kernel, bias)
    return y[0] if unbatched else y


class PeriodicConv2d(nn.Module):
    """``nn.Conv2d`` replacement that wraps around in longitude."""

    def __init__(self, c_in, c_out, kernel_size, bias=True,
                 pad_mode="zonal_periodic_zero_meridional"):
        super().__init__()
        self.pad_mode = pad_mode
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.pad_mode)


# -- windowed attention ------------------------------------------------------

def relative_position_index(wh, ww):
    """Index into a ``[(2wh-1)(2ww-1)]`` bias table for every in-window pair."""
    coords = np.stack(np.meshgrid(np.arange(wh), np.arange(ww), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return torch.as_tensor((rel[0] + wh - 1) * (2 * ww - 1) + rel[1] + ww - 1)


def pole_mask(H, W, wh, ww):
    """Additive mask ``[n_windows, N, N]`` blocking attention across the pole seam.

    After rolling latitude by ``-wh//2`` the last window row holds both the
    northernmost rows and the wrapped southernmost rows; those must not mix.
    """
    shift = wh // 2
    label = np.zeros((H, W))
    label[H - shift:] = 1.0
    win = label.reshape(H // wh, wh, W // ww, ww).transpose(0, 2, 1, 3).reshape(-1, wh * ww)
    blocked = win[:, :, None] != win[:, None, :]
    mask = np.where(blocked, -np.inf, 0.0)
    return torch.as_tensor(mask)


def window_attention(x, qkv_weight, proj_weight, window, heads, rel_pos_bias=None,
                     shifted=False, qkv_bias=None, proj_bias=None):
    """Multi-head self-attention restricted to ``window``-sized tiles.

    ``x`` is ``[H, W, C]`` or ``[B, H, W, C]``. Shifted windows are displaced
    by half a window: circularly in longitude, with masking at the poles.
    ``rel_pos_bias`` is a learned table ``[(2wh-1)(2ww-1), heads]``.
    """
    wh, ww = window
    unbatched = x.ndim == 3
    if unbatched:
        x = x.unsqueeze(0)
    B, H, W, C = x.shape
    if H % wh or W % ww:
        raise InvalidArgumentError(f"grid {H}x{W} not divisible by window {wh}x{ww}")
    if C % heads:
        raise InvalidArgumentError(f"{C} channels not divisible by {heads} heads")
    if shifted:
        x = torch.roll(x, shifts=(-(wh // 2), -(ww // 2)), dims=(1, 2))
    N = wh * ww
    nwin = (H // wh) * (W // ww)
    t = x.reshape(B, H // wh, wh, W // ww, ww, C).permute(0, 1, 3, 2, 4, 5).reshape(B * nwin, N, C)
    qkv = F.linear(t, qkv_weight, qkv_bias).reshape(B * nwin, N, 3, heads, C // heads)
    q, k, v = qkv.permute(2, 0, 3, 1, 4)
    attn = (q * (C // heads) ** -0.5) @ k.transpose(-2, -1)
    if rel_pos_bias is not None:
        idx = relative_position_index(wh, ww)
        attn = attn + rel_pos_bias[idx.reshape(-1)].reshape(N, N, heads).permute(2, 0, 1)
    if shifted and wh > 1:
        mask = pole_mask(H, W, wh, ww).to(attn.dtype)
        attn = (attn.reshape(B, nwin, heads, N, N) + mask[None, :, None]).reshape(B * nwin, heads, N, N)
    out = (attn.softmax(-1) @ v).transpose(1, 2).reshape(B * nwin, N, C)
    out = F.linear(out, proj_weight, proj_bias)
    out = out.reshape(B, H // wh, W // ww, wh, ww, C).permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)
    if shifted:
        out = torch.roll(out, shifts=(wh // 2, ww // 2), dims=(1, 2))
    return out[0] if unbatched else out


class WindowAttention(nn.Module):
    def __init__(self, dim, heads, window, shifted=False):
        super().__init__()
        self.dim, self.heads, self.window, self.shifted = dim, heads, tuple(window), shifted
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        wh, ww = self.window
        self.rel_pos_bias = nn.Parameter(torch.zeros((2 * wh - 1) * (2 * ww - 1), heads))
        nn.init.trunc_normal_(self.rel_pos_bias, std=0.02)

    def forward(self, x):
        return window_attention(x, self.qkv.weight, self.proj.weight, self.window, self.heads,
                                self.rel_pos_bias, self.shifted, self.qkv.bias, self.proj.bias)


# -- generic layers ----------------------------------------------------------

def _need(params, *names):
    params = params or {}
    missing = [n for n in names if n not in params]
    if missing:
        raise InvalidArgumentError(f"missing parameters: {', '.join(missing)}")
    return [params[n] for n in names]


def layer_forward(kind, x, params=None, training=False, **options):
    """Evaluate one standard layer by name.

    ``batch_norm`` updates ``params["running_mean"]``/``["running_var"]`` in
    place when ``training`` is true.
    """
    if kind == "layer_norm":
        w, b = _need(params, "weight", "bias")
        return F.layer_norm(x, x.shape[-1:], w, b, NORM_EPS)
    if kind == "batch_norm":
        w, b, rm, rv = _need(params, "weight", "bias", "running_mean", "running_var")
        return F.batch_norm(x, rm, rv, w, b, training, BN_MOMENTUM, NORM_EPS)
    if kind == "gelu":
        return F.gelu(x)
    if kind == "leaky_relu":
        return F.leaky_relu(x, options.get("slope", 0.01))
    if kind == "swish":
        return F.silu(x)
    if kind == "linear":
        (w,) = _need(params, "weight")
        return F.linear(x, w, (params or {}).get("bias"))
    if kind == "mlp":
        w1, b1, w2, b2 = _need(params, "w1", "b1", "w2", "b2")
        return F.linear(F.gelu(F.linear(x, w1, b1)), w2, b2)
    if kind == "max_pool_2x2":
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise InvalidArgumentError("max_pool_2x2 needs even spatial extents")
        return F.max_pool2d(x, 2)
    if kind == "nearest_up_2x2":
        return F.interpolate(x, scale_factor=2, mode="nearest")
    if kind == "bilinear_resize":
        if "size" not in options:
            raise InvalidArgumentError("bilinear_resize needs size=(H, W)")
        return F.interpolate(x, size=tuple(options["size"]), mode="bilinear", align_corners=False)
    raise InvalidArgumentError(f"unknown layer kind {kind!r}")


def backward(loss, params=None):
    """Backpropagate a scalar loss; return gradients of ``params`` if given."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise InvalidArgumentError("backward needs a scalar loss")
    loss.reshape(()).backward()
    if params is not None:
        return [p.grad for p in params]
    return None


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    tolerance: float

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} "
                f"(input {self.worst_input}, index {self.worst_index}, tol {self.tolerance:g})")


def grad_check(fn, inputs, tolerance=1e-4, step=1e-5, seed=0):
    """Compare autograd gradients of ``fn`` with central finite differences.

    ``fn`` maps the double-precision ``inputs`` to a tensor; a fixed random
    cotangent reduces it to a scalar so every output element is exercised.
    Relative errors are taken against ``max(|analytic|, |numeric|, floor)``
    where ``floor`` is 1e-3 of the largest numeric gradient entry.
    """
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    if any(t.dtype != torch.float64 for t in inputs):
        raise InvalidArgumentError("grad_check requires double-precision inputs")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out = fn(*inputs)
    cot = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(*args):
        return (fn(*args) * cot).sum()

    analytic = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    worst = (0.0, -1, ())
    with torch.no_grad():
        for i, t in enumerate(inputs):
            a = analytic[i] if analytic[i] is not None else torch.zeros_like(t)
            num = torch.zeros_like(t)
            flat = t.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                fp = scalar(*inputs).item()
                flat[j] = orig - step
                fm = scalar(*inputs).item()
                flat[j] = orig
                num.view(-1)[j] = (fp - fm) / (2 * step)
            floor = max(1e-3 * float(num.abs().max()), 1e-10)
            denom = torch.maximum(torch.maximum(a.abs(), num.abs()), torch.tensor(floor))
            rel = (a - num).abs() / denom
            k = int(rel.argmax()) if rel.numel() else 0
            if rel.numel() and float(rel.view(-1)[k]) > worst[0]:
                worst = (float(rel.view(-1)[k]), i, tuple(int(d) for d in np.unravel_index(k, tuple(t.shape))))
    return GradCheckReport(worst[0] < tolerance, worst[0], worst[1], worst[2], tolerance)

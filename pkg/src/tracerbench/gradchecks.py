"""Finite-difference gradient checks over every layer, model and loss."""

from __future__ import annotations

import torch

from .tensor import conv2d, grad_check, layer_forward, window_attention
from .train import mse_loss, spec_loss
from .zoo import build, preset


def _model_case(arch, **overrides):
    model, _ = build(preset(arch, "S" if arch != "swin" else "tiny", final_init="default", **overrides),
                     3, 2, seed=1, grid_shape=(8, 16), dtype=torch.float64)
    model.eval()
    name, first = next(iter(model.named_parameters()))

    def fn(x, w):
        return torch.func.functional_call(model, {name: w}, (x,))

    x = torch.randn(1, 3, 8, 16, dtype=torch.float64)
    return fn, [x, first.detach().clone()]


def cases():
    """``name -> (fn, inputs)`` for every differentiable building block."""
    g = torch.Generator().manual_seed(0)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    bn_state = {"running_mean": torch.zeros(3, dtype=torch.float64), "running_var": torch.ones(3, dtype=torch.float64)}
    out = {
        "conv2d": (lambda x, k: conv2d(x, k), [r(2, 4, 8), r(3, 2, 3, 3)]),
        "layer_norm": (lambda x, w, b: layer_forward("layer_norm", x, {"weight": w, "bias": b}),
                       [r(4, 6), r(6), r(6)]),
        "batch_norm": (lambda x, w, b: layer_forward("batch_norm", x, {"weight": w, "bias": b, **bn_state},
                                                     training=False), [r(2, 3, 4, 4), r(3), r(3)]),
        "batch_norm_train": (lambda x, w, b: layer_forward(
            "batch_norm", x, {"weight": w, "bias": b, "running_mean": torch.zeros(3, dtype=torch.float64),
                              "running_var": torch.ones(3, dtype=torch.float64)}, training=True),
            [r(2, 3, 4, 4), r(3), r(3)]),
        "gelu": (lambda x: layer_forward("gelu", x), [r(5, 7)]),
        "leaky_relu": (lambda x: layer_forward("leaky_relu", x, slope=0.01), [r(5, 7)]),
        "swish": (lambda x: layer_forward("swish", x), [r(5, 7)]),
        "linear": (lambda x, w, b: layer_forward("linear", x, {"weight": w, "bias": b}), [r(4, 5), r(3, 5), r(3)]),
        "mlp": (lambda x, w1, b1, w2, b2: layer_forward("mlp", x, {"w1": w1, "b1": b1, "w2": w2, "b2": b2}),
                [r(4, 5), r(6, 5), r(6), r(3, 6), r(3)]),
        "max_pool_2x2": (lambda x: layer_forward("max_pool_2x2", x), [r(1, 2, 4, 4)]),
        "nearest_up_2x2": (lambda x: layer_forward("nearest_up_2x2", x), [r(1, 2, 3, 3)]),
        "bilinear_resize": (lambda x: layer_forward("bilinear_resize", x, size=(6, 10)), [r(1, 2, 4, 8)]),
        "window_attention": (lambda x, qkv, proj, bias: window_attention(x, qkv, proj, (2, 4), 2, bias, shifted=True),
                             [r(4, 8, 4), 0.5 * r(12, 4), 0.5 * r(4, 4), 0.1 * r(3 * 7, 2)]),
        "mse_loss": (lambda a, b: mse_loss(a, b), [r(3, 4), r(3, 4)]),
        "spec_loss": (lambda a, b: spec_loss(a, b), [r(2, 8, 16), r(2, 8, 16)]),
    }
    for arch in ("unet", "swin", "sfno"):
        kw = {"unet": {"width": 2, "depth": 2}, "swin": {"width": 4, "heads": 2, "depth": 2},
              "sfno": {"width": 3, "depth": 1}}[arch]
        out[f"model_{arch}"] = _model_case(arch, **kw)
    return out


def run_all(tolerance=1e-4, names=None):
    """Run the selected (default: all) checks; returns ``{name: GradCheckReport}``."""
    reports = {}
    for name, (fn, inputs) in cases().items():
        if names and name not in names:
            continue
        reports[name] = grad_check(fn, inputs, tolerance=tolerance)
    return reports

"""Model construction and the checkpoint file format.

A checkpoint is one JSON header line followed by the raw little-endian
state (parameters then buffers, in ``state_dict`` order). The header lists
every tensor's name, shape and dtype so the blob can be sliced without
torch's pickle format.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..exceptions import InvalidArgumentError, InvalidStateError
from .config import ArchConfig
from .sfno import SFNO
from .swin import Swin
from .unet import UNet

FORMAT = "tracerbench-checkpoint/1"
_BUILDERS = {"unet": UNet, "swin": Swin, "sfno": SFNO}


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def build(config, n_in, n_out, seed=0, grid_shape=None, dtype=torch.float32):
    """Instantiate an architecture with deterministic initialization.

    Returns ``(model, n_params)``.
    """
    if isinstance(config, dict):
        config = ArchConfig.from_dict(config)
    if n_in < 1 or n_out < 1:
        raise InvalidArgumentError("channel counts must be positive")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if config.id == "sfno":
            model = SFNO(config, n_in, n_out, grid_shape)
        else:
            model = _BUILDERS[config.id](config, n_in, n_out)
    model = model.to(dtype)
    model.n_in, model.n_out, model.seed = n_in, n_out, seed
    model.grid_shape = tuple(grid_shape) if grid_shape is not None else None
    return model, count_parameters(model)


def _np_dtype(t):
    return {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}[t]


def save_checkpoint(path, model, provenance=None, stats_fingerprint=None):
    """Write ``model`` and its metadata; returns the path."""
    state = model.state_dict()
    tensors = []
    for name, t in state.items():
        tensors.append({"name": name, "shape": list(t.shape), "dtype": _np_dtype(t.dtype)})
    header = {
        "format": FORMAT,
        "arch": model.config.to_dict(),
        "n_in": model.n_in,
        "n_out": model.n_out,
        "seed": model.seed,
        "grid_shape": list(model.grid_shape) if model.grid_shape else None,
        "dtype": _np_dtype(next(model.parameters()).dtype),
        "n_params": count_parameters(model),
        "stats_fingerprint": stats_fingerprint,
        "provenance": provenance or {},
        "tensors": tensors,
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for spec, t in zip(tensors, state.values()):
            fh.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=spec["dtype"]).tobytes())
    return path


def read_header(path):
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise InvalidStateError(f"{path}: not a checkpoint") from exc
    if header.get("format") != FORMAT:
        raise InvalidStateError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    return header


def load_checkpoint(path, expected_fingerprint=None):
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    header = read_header(path)
    if expected_fingerprint is not None and header["stats_fingerprint"] != expected_fingerprint:
        raise InvalidStateError("normalization stats fingerprint does not match the checkpoint")
    dtype = torch.float64 if header["dtype"] == "<f8" else torch.float32
    grid = tuple(header["grid_shape"]) if header["grid_shape"] else None
    model, _ = build(ArchConfig.from_dict(header["arch"]), header["n_in"], header["n_out"],
                     header["seed"], grid, dtype)
    with open(path, "rb") as fh:
        fh.readline()
        blob = fh.read()
    state, offset = {}, 0
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=spec["dtype"], count=n, offset=offset).reshape(spec["shape"])
        offset += n * np.dtype(spec["dtype"]).itemsize
        state[spec["name"]] = torch.from_numpy(arr.copy())
    if offset != len(blob):
        raise InvalidStateError(f"{path}: blob size mismatch")
    model.load_state_dict(state)
    return model, header

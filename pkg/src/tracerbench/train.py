"""Losses, Adam, learning-rate schedules and the two-stage curriculum trainer."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .exceptions import InvalidArgumentError
from .harmonics import get_sht
from .stepper import Forcing, Stepper

log = logging.getLogger(__name__)

SPEC_EPS = 1e-20
LOG_COLUMNS = ("step", "stage", "lead", "lr", "mse", "spec", "total")


# -- losses ------------------------------------------------------------------

def mse_loss(pred, true):
    """Mean squared difference over all elements."""
    if pred.shape != true.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(pred.shape)} vs {tuple(true.shape)}")
    return ((pred - true) ** 2).mean()


def degree_power(fields_, lmax=None):
    """Per-degree power ``S(l)`` of real fields ``[..., lat, lon]``."""
    H, W = fields_.shape[-2:]
    if lmax is None:
        lmax = min(H - 2, W // 2 - 1)
    c = get_sht(H, W, lmax).forward(fields_)
    p = c.real ** 2 + c.imag ** 2
    return 2.0 * p.sum(-1) - p[..., 0]


def spec_loss(pred, true, lmax=None, eps=SPEC_EPS):
    """Mean over leading axes and degrees of squared log-power differences."""
    if pred.shape != true.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(pred.shape)} vs {tuple(true.shape)}")
    sp = degree_power(pred, lmax)
    st = degree_power(true, lmax)
    return ((torch.log(sp + eps) - torch.log(st + eps)) ** 2).mean()


# -- optimizer ---------------------------------------------------------------

def adam_init(params):
    return {"step": 0,
            "m": [torch.zeros_like(p) for p in params],
            "v": [torch.zeros_like(p) for p in params]}


@torch.no_grad()
def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state["step"] += 1
    k = state["step"]
    c1 = 1.0 - beta1 ** k
    c2 = 1.0 - beta2 ** k
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params, state


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = adam_init(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        adam_step(self.params, [p.grad for p in self.params], self.state, lr,
                  self.beta1, self.beta2, self.eps)


# -- schedules ---------------------------------------------------------------

@dataclass
class TrainConfig:
    """Two-stage schedule: next-step training, then n-steps-ahead curriculum.

    ``steps`` and ``curriculum_steps`` default to desk scale; use
    :func:`long_budget` for the long budget.
    """

    peak_lr: float = 5e-4
    warmup_steps: int = 500
    steps: int = 20000
    curriculum_lr: float = 5e-5
    curriculum_steps: int = 5000
    epochs_per_increment: int = 2
    max_lead: int = 31
    spec_weight: float = 0.1
    batch_size: int = 4
    seed: int = 0
    precision: str = "single"
    log_every: int = 1

    def __post_init__(self):
        if self.warmup_steps > self.steps:
            raise InvalidArgumentError("warmup_steps must not exceed steps")
        if self.max_lead < 1:
            raise InvalidArgumentError("max_lead must be >= 1")
        if self.spec_weight < 0:
            raise InvalidArgumentError("spec_weight must be >= 0")
        if self.batch_size < 1 or self.epochs_per_increment < 1:
            raise InvalidArgumentError("batch_size and epochs_per_increment must be >= 1")
        if self.precision not in ("single", "double"):
            raise InvalidArgumentError(f"unknown precision {self.precision!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidArgumentError(f"unknown train keys: {', '.join(unknown)}")
        return cls(**d)


def long_budget(final=False, **overrides):
    """Long next-step budget: 100k steps for tuning runs, 300k for final models.

    The curriculum length keeps its desk-scale default unless overridden.
    """
    return TrainConfig(**{"steps": 300_000 if final else 100_000, **overrides})


def lr_schedule(step, config, stage=1):
    """Linear warmup then cosine decay to zero (stage 1); constant (stage 2)."""
    if stage == 2:
        return config.curriculum_lr
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    span = config.steps - config.warmup_steps
    if span <= 0:
        return config.peak_lr
    frac = min(1.0, (step - config.warmup_steps) / span)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def lead_schedule(epoch, epochs_per_increment=2, max_lead=31):
    return min(max_lead, 1 + epoch // epochs_per_increment)


# -- trainer -----------------------------------------------------------------

def rollout_loss(stepper, truth, forcing, t0, lead, spec_weight):
    """Mean per-step loss of a ``lead``-step rollout from true states at ``t0``.

    ``truth`` is the full co2 trajectory tensor. Returns ``(total, mse, spec)``.
    """
    dstd = stepper._dstd.reshape(-1, 1, 1)
    mu = truth[t0]
    mse_sum, spec_sum = 0.0, 0.0
    for k in range(lead):
        mu_next, _ = stepper.step(mu, forcing, t0 + k)
        target = truth[t0 + k + 1]
        mse_sum = mse_sum + mse_loss(mu_next / dstd, target / dstd)
        if spec_weight > 0:
            spec_sum = spec_sum + spec_loss((mu_next - mu) / dstd, (target - truth[t0 + k]) / dstd)
        mu = mu_next
    mse = mse_sum / lead
    if spec_weight > 0:
        spec = spec_sum / lead
        return mse + spec_weight * spec, mse, spec
    return mse, mse, 0.0


@dataclass
class TrainResult:
    log: list
    optimizer: Adam
    steps_done: int


def _scalar(x):
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _batches(rng, starts, batch_size):
    order = rng.permutation(starts)
    for i in range(len(order) // batch_size):
        yield order[i * batch_size:(i + 1) * batch_size]


def curriculum_train(model, dataset, stepper_config, config, split=None, callback=None):
    """Train ``model`` in place on ``dataset`` and return a :class:`TrainResult`.

    Stage 1 runs ``config.steps`` next-step updates; stage 2 runs
    ``config.curriculum_steps`` multi-step updates whose lead grows by one
    every ``epochs_per_increment`` epochs. Optimizer moments carry over.
    """
    if split is None:
        split = dataset.splits.get("train", (0, dataset.n_times))
    s0, s1 = split
    if s1 - s0 - 1 < config.max_lead and config.curriculum_steps > 0:
        raise InvalidArgumentError(
            f"training split has {s1 - s0 - 1} intervals, shorter than max_lead={config.max_lead}")
    if s1 - s0 - 1 < 1:
        raise InvalidArgumentError("training split needs at least one interval")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    forcing = Forcing(dataset, stepper_config.stats, stepper_config.model_dtype)
    truth = torch.as_tensor(dataset.fields3d["co2"], dtype=torch.float64)
    stepper = Stepper(model, stepper_config)
    opt = Adam(model.parameters())
    model.train()
    rows = []
    step = 0

    def run_stage(stage, n_steps):
        nonlocal step
        done, epoch = 0, 0
        while done < n_steps:
            lead = 1 if stage == 1 else lead_schedule(epoch, config.epochs_per_increment, config.max_lead)
            starts = np.arange(s0, s1 - lead)
            if len(starts) < config.batch_size:
                raise InvalidArgumentError(
                    f"training split too short for batch size {config.batch_size} at lead {lead}")
            for batch in _batches(rng, starts, config.batch_size):
                lr = lr_schedule(done, config, stage)
                opt.zero_grad()
                total, mse, spec = rollout_loss(stepper, truth, forcing, torch.as_tensor(batch), lead,
                                                config.spec_weight)
                total.backward()
                opt.step(lr)
                step += 1
                done += 1
                if step % config.log_every == 0 or done == n_steps:
                    rows.append({"step": step, "stage": stage, "lead": lead, "lr": lr,
                                 "mse": _scalar(mse), "spec": _scalar(spec), "total": _scalar(total)})
                if callback is not None:
                    callback(rows[-1] if rows else None)
                if done >= n_steps:
                    break
            epoch += 1

    run_stage(1, config.steps)
    run_stage(2, config.curriculum_steps)
    model.eval()
    return TrainResult(rows, opt, step)


def write_loss_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["stage"], r["lead"]] + [repr(float(r[c])) for c in LOG_COLUMNS[3:]])
    return path


def read_loss_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

"""Physics-aware autoregressive integrator around a neural network.

One step is

    channels -> network -> raw deltas -> rescale -> (+ surface flux) -> (mass fixer)

The state and all mass bookkeeping stay in float64 while the network runs in
its own precision (float32 by default). With ``centflux`` the tracer input is
shifted to zero air-mass-weighted mean before it reaches the network, so the
network output is invariant to constant offsets of the field.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .exceptions import InvalidArgumentError, InvalidStateError, NumericalAbort
from .pipeline import FLUX_FIELDS, MET_FIELDS, Dataset, NormalizationStats
from .sphere import PPM, Grid, HybridLevels, cell_areas

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ("step", "m_target", "m_pred", "m_final", "residual")
N_STATIC = 2


def n_input_channels(n_lev):
    """Channel count of the stacking protocol for ``n_lev`` tracer levels."""
    return n_lev * (1 + len(MET_FIELDS)) + len(FLUX_FIELDS) + N_STATIC


def _t(x, dtype=torch.float64):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def _sum3(x):
    return x.sum(dim=(-3, -2, -1), keepdim=True)


# -- elementary operations ---------------------------------------------------

def center_input(mu, airmass):
    """Shift ``mu [..., lev, lat, lon]`` to zero air-mass-weighted mean.

    Returns ``(centered, mean)``. Differences are taken against one reference
    cell first, so adding a constant ``c`` leaves the centered field bitwise
    unchanged whenever ``mu + c`` is exact in float64 (for instance fields
    stored in single precision and offsets of moderate size).
    """
    numpy_in = not isinstance(mu, torch.Tensor)
    mu_t, m_t = _t(mu), _t(airmass)
    ref = mu_t[..., :1, :1, :1]
    d = mu_t - ref
    md = _sum3(d * m_t) / _sum3(m_t)
    centered = d - md
    mean = (ref + md)[..., 0, 0, 0]
    if numpy_in:
        mean = mean.numpy()
        return centered.numpy(), float(mean) if mean.ndim == 0 else mean
    return centered, mean


def apply_delta(raw, delta_mean, delta_std, mu):
    """``mu + raw * delta_std + delta_mean`` with per-level statistics."""
    numpy_in = not isinstance(mu, torch.Tensor)
    mu_t = _t(mu)
    raw_t = _t(raw).to(mu_t.dtype)
    n_lev = mu_t.shape[-3]
    dm = _t(delta_mean).to(mu_t.dtype).reshape(-1)
    ds = _t(delta_std).to(mu_t.dtype).reshape(-1)
    if dm.numel() != n_lev or ds.numel() != n_lev:
        raise InvalidArgumentError(f"delta statistics cover {dm.numel()} levels, state has {n_lev}")
    if raw_t.shape[-3] != n_lev:
        raise InvalidArgumentError(f"raw output has {raw_t.shape[-3]} channels for {n_lev} levels")
    out = mu_t + raw_t * ds[:, None, None] + dm[:, None, None]
    return out.numpy() if numpy_in else out


def inject_flux(mu, flux_total, areas, airmass, dt):
    """Add one interval of surface flux (kg m-2 s-1) to the lowest layer."""
    numpy_in = not isinstance(mu, torch.Tensor)
    mu_t, m_t = _t(mu), _t(airmass)
    m0 = m_t[..., 0, :, :]
    if bool((m0 <= 0).any()):
        raise InvalidStateError("non-positive surface air mass")
    inc = _t(flux_total).to(mu_t.dtype) * _t(areas).to(mu_t.dtype) * dt / (PPM * m0)
    out = torch.cat([(mu_t[..., :1, :, :] + inc.unsqueeze(-3)), mu_t[..., 1:, :, :]], dim=-3)
    return out.numpy() if numpy_in else out


def global_mass(mu, airmass):
    """Total tracer mass in kg over the last three axes."""
    numpy_in = not isinstance(mu, torch.Tensor)
    m = (_t(mu) * PPM * _t(airmass)).sum(dim=(-3, -2, -1))
    return m.numpy() if numpy_in else m


def mass_fixer(mu_pred, airmass, m_target, step=None):
    """Rescale ``mu_pred`` globally so its tracer mass equals ``m_target``."""
    numpy_in = not isinstance(mu_pred, torch.Tensor)
    mu_t = _t(mu_pred)
    m_pred = global_mass(mu_t, _t(airmass))
    if not bool(torch.isfinite(m_pred).all()) or bool((m_pred <= 0).any()):
        raise NumericalAbort(f"predicted tracer mass {m_pred.detach().min().item():.6g} kg is not positive",
                             step=step)
    ratio = _t(m_target).to(mu_t.dtype) / m_pred
    out = mu_t * ratio[..., None, None, None]
    return out.numpy() if numpy_in else out


# -- forcing and configuration -------------------------------------------------

@dataclass
class StepperConfig:
    stats: NormalizationStats
    grid: Grid
    hybrid: HybridLevels
    dt: float
    centflux: bool = True
    massfixer: bool = True
    model_dtype: torch.dtype = torch.float32

    @property
    def delta_key(self):
        return "co2_transport" if self.centflux else "co2"

    def validate(self, dataset=None, fingerprint=None):
        if dataset is not None and abs(dataset.dt - self.dt) > 1e-9:
            raise InvalidArgumentError(f"stepper dt {self.dt} does not match dataset dt {dataset.dt}")
        if fingerprint is not None and fingerprint != self.stats.fingerprint():
            raise InvalidStateError("normalization stats fingerprint does not match the checkpoint")
        return self


class Forcing:
    """Precomputed, normalized non-tracer channels plus the mass bookkeeping inputs.

    ``channels[t]`` holds meteorology at state ``t``, the surface flux of
    interval ``t`` and the static maps, already in model precision.
    """

    def __init__(self, dataset, stats, dtype=torch.float32):
        ds = dataset
        T, L = ds.n_times, ds.n_lev
        H, W = ds.grid.shape
        n = L * len(MET_FIELDS) + len(FLUX_FIELDS) + N_STATIC
        ch = np.zeros((T, n, H, W), dtype=np.float32 if dtype == torch.float32 else np.float64)
        c = 0
        for f in MET_FIELDS:
            mean = np.asarray(stats.mean[f])[:, None, None]
            std = stats.safe(stats.std[f])[:, None, None]
            ch[:, c:c + L] = (ds.fields3d[f] - mean) / std
            c += L
        for f in FLUX_FIELDS:
            mean = float(np.asarray(stats.mean[f]).reshape(-1)[0])
            std = float(stats.safe(stats.std[f]).reshape(-1)[0])
            ch[:-1, c] = (ds.fluxes[f] - mean) / std
            c += 1
        lat = np.deg2rad(ds.grid.lat)[:, None] * np.ones((1, W))
        ch[:, c] = np.sin(lat)
        ch[:, c + 1] = np.cos(lat)
        self.channels = torch.from_numpy(ch)
        self.airmass = torch.as_tensor(ds.fields3d["airmass"], dtype=torch.float64)
        self.flux_total = torch.as_tensor(sum(ds.fluxes[f] for f in FLUX_FIELDS), dtype=torch.float64)
        self.areas = torch.as_tensor(cell_areas(ds.grid), dtype=torch.float64)
        self.dt = float(ds.dt)
        self.n_times = T
        self.area_dt = self.areas * self.dt

    def flux_mass(self, t):
        """Flux mass (kg) added during interval(s) ``t``."""
        return (self.flux_total[t] * self.area_dt).sum(dim=(-2, -1))

    def check_window(self, start, n):
        if start < 0 or start + n > self.n_times - 1:
            raise InvalidArgumentError(
                f"forcing covers {self.n_times - 1} intervals; rollout needs [{start}, {start + n})")


# -- the stepper -------------------------------------------------------------

class Stepper:
    """Binds a network to a :class:`StepperConfig`."""

    def __init__(self, model, config):
        self.model = model
        self.config = config
        st = config.stats
        L = config.hybrid.n_lev
        self.n_lev = L
        self._cstd = torch.as_tensor(st.safe(st.centered_std), dtype=torch.float64).reshape(L, 1, 1)
        self._mean = torch.as_tensor(np.asarray(st.mean["co2"]), dtype=torch.float64).reshape(L, 1, 1)
        self._std = torch.as_tensor(st.safe(st.std["co2"]), dtype=torch.float64).reshape(L, 1, 1)
        self._dmean = torch.as_tensor(np.asarray(st.delta_mean[config.delta_key]), dtype=torch.float64)
        self._dstd = torch.as_tensor(st.safe(st.delta_std[config.delta_key]), dtype=torch.float64)

    def tracer_channels(self, mu, airmass):
        if self.config.centflux:
            centered, _ = center_input(mu, airmass)
            return centered / self._cstd
        return (mu - self._mean) / self._std

    def raw_output(self, mu, forcing, t):
        """Network output for states ``mu [B, lev, lat, lon]`` at times ``t [B]``."""
        x = torch.cat([self.tracer_channels(mu, forcing.airmass[t]).to(self.config.model_dtype),
                       forcing.channels[t].to(self.config.model_dtype)], dim=1)
        return self.model(x)

    def step(self, mu, forcing, t, step_index=None):
        """Advance a batch of states; returns ``(mu_next, info)``.

        ``info`` carries ``raw``, ``pre_fix`` (before the mass fixer),
        ``m_target`` and ``m_pred``.
        """
        t = torch.as_tensor(t).reshape(-1)
        raw = self.raw_output(mu, forcing, t)
        if not bool(torch.isfinite(raw).all()):
            raise NumericalAbort("non-finite network output", step=step_index)
        m_t, m_next = forcing.airmass[t], forcing.airmass[t + 1]
        pred = apply_delta(raw, self._dmean, self._dstd, mu)
        if self.config.centflux:
            pred = inject_flux(pred, forcing.flux_total[t], forcing.areas, m_t, forcing.dt)
        m_target = global_mass(mu, m_t) + forcing.flux_mass(t)
        m_pred = global_mass(pred, m_next)
        info = {"raw": raw, "pre_fix": pred, "m_target": m_target, "m_pred": m_pred}
        if self.config.massfixer:
            out = mass_fixer(pred, m_next, m_target, step=step_index)
        else:
            if not bool(torch.isfinite(pred).all()):
                raise NumericalAbort("non-finite tracer field", step=step_index)
            out = pred
        return out, info

    @torch.no_grad()
    def rollout(self, mu0, forcing, start, n):
        """Autoregressive run of ``n`` steps from state ``start``.

        Returns ``(trajectory [n+1, lev, lat, lon], ledger rows)``.
        """
        forcing.check_window(start, n)
        was_training = self.model.training
        self.model.eval()
        try:
            mu = torch.as_tensor(np.asarray(mu0), dtype=torch.float64).unsqueeze(0)
            traj = [mu[0].numpy().copy()]
            ledger = []
            for k in range(n):
                t = start + k
                m_prev = float(global_mass(mu, forcing.airmass[t])[0])
                mu, info = self.step(mu, forcing, [t], step_index=k)
                m_final = float(global_mass(mu, forcing.airmass[t + 1])[0])
                m_target = float(info["m_target"][0])
                ledger.append({"step": k + 1, "m_target": m_target, "m_pred": float(info["m_pred"][0]),
                               "m_final": m_final, "residual": (m_final - m_target) / m_prev})
                traj.append(mu[0].numpy().copy())
        finally:
            self.model.train(was_training)
        return np.stack(traj), ledger


def rollout(model, mu0, forcing, n, config, start=0):
    """Functional form of :meth:`Stepper.rollout`."""
    return Stepper(model, config).rollout(mu0, forcing, start, n)


def write_ledger(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in LEDGER_COLUMNS[1:]])
    return path


def read_ledger(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def trajectory_dataset(dataset, start, trajectory):
    """Copy of ``dataset[start : start + len(trajectory)]`` with co2 replaced."""
    sub = dataset.subset(start, start + len(trajectory))
    fields = dict(sub.fields3d, co2=np.asarray(trajectory, dtype=float))
    return Dataset(sub.grid, sub.hybrid, sub.time, sub.dt, fields, sub.p_surf, sub.fluxes,
                   {}, dict(sub.attrs, rollout_start=int(start)))

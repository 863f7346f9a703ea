"""Conservative Eulerian reference transport and synthetic-world generation.

The solver is mass-flux based: horizontal air-mass fluxes through cell faces
come from a streamfunction sampled at cell corners, so every layer is exactly
non-divergent on the discrete grid. An optional level-dependent overturning
component is divergent per layer and closed by diagnostic vertical mass
fluxes. Tracer is advected with second-order flux-form sweeps using van Leer
limited slopes, Strang-split as x, y, z, surface flux, z, y, x.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ConfigError, InvalidArgumentError, InvalidStateError
from .pipeline import FLUX_FIELDS, VARS_2D, VARS_3D, Dataset, DatasetStore, split_dataset
from .sphere import GRAVITY, PPM, Grid, HybridLevels, air_mass, cell_areas

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0
SECONDS_PER_YEAR = 365.0 * SECONDS_PER_DAY
MAX_COURANT = 0.5
WIND_SCHEMES = ("solid_body", "deformational", "overturning")


# -- winds -------------------------------------------------------------------

def _level_factor(n_lev, shear):
    if n_lev == 1:
        return np.ones(1)
    return 1.0 + shear * (np.arange(n_lev) / (n_lev - 1) - 0.5)


def _overturning_profile(hybrid, p_surf):
    """Vertical weights with zero pressure-weighted column sum."""
    n = hybrid.n_lev
    c = np.cos(np.pi * (np.arange(n) + 0.5) / n)
    dp = np.asarray(hybrid.thickness(p_surf)).reshape(n, -1).mean(1)
    return c - np.sum(c * dp) / np.sum(dp)


def streamfunction(scheme, t, lat_deg, lon_deg, radius):
    """Streamfunction (m2 s-1) of one non-divergent component at ``(lat, lon)``."""
    phi = np.deg2rad(lat_deg)
    lam = np.deg2rad(lon_deg)
    kind = scheme["scheme"]
    period = float(scheme["period_days"]) * SECONDS_PER_DAY
    if kind == "solid_body":
        alpha = np.deg2rad(float(scheme.get("alpha", 0.0)))
        u0 = 2.0 * np.pi * radius / period
        return -u0 * radius * (np.sin(phi) * np.cos(alpha) - np.cos(lam) * np.cos(phi) * np.sin(alpha))
    if kind == "deformational":
        k = float(scheme.get("amplitude", 0.3)) * 2.0 * np.pi * radius / period
        return k * radius * np.sin(lam / 2) ** 2 * np.cos(phi) ** 2 * np.cos(2 * np.pi * t / period)
    raise InvalidArgumentError(f"unknown wind scheme {kind!r}")


def _validate_schemes(schemes):
    for s in schemes:
        if s.get("scheme") not in WIND_SCHEMES:
            raise InvalidArgumentError(f"unknown wind scheme {s.get('scheme')!r}")


def wind_field(schemes, t, grid, hybrid, p_surf=1013.25):
    """Cell-centre winds ``(u, v, omega)`` in m/s, m/s and Pa/s, each ``[lev, lat, lon]``.

    ``schemes`` is one scheme dict or a list whose components are summed.
    """
    if isinstance(schemes, dict):
        schemes = [schemes]
    _validate_schemes(schemes)
    n_lev = hybrid.n_lev
    phi = np.deg2rad(grid.lat)[:, None]
    lam = np.deg2rad(grid.lon)[None, :]
    u = np.zeros((n_lev,) + grid.shape)
    v = np.zeros((n_lev,) + grid.shape)
    r = grid.radius
    for s in schemes:
        kind = s["scheme"]
        fac = _level_factor(n_lev, float(s.get("shear", 0.0)))[:, None, None]
        if kind == "overturning":
            prof = _overturning_profile(hybrid, p_surf)[:, None, None]
            v = v + float(s.get("amplitude", 0.0)) * prof * np.sin(2 * phi) * np.ones_like(lam)
            continue
        period = float(s["period_days"]) * SECONDS_PER_DAY
        if kind == "solid_body":
            alpha = np.deg2rad(float(s.get("alpha", 0.0)))
            u0 = 2.0 * np.pi * r / period
            uu = u0 * (np.cos(phi) * np.cos(alpha) + np.sin(phi) * np.cos(lam) * np.sin(alpha))
            vv = -u0 * np.sin(lam) * np.sin(alpha) * np.ones_like(phi)
        else:
            k = float(s.get("amplitude", 0.3)) * 2.0 * np.pi * r / period
            g = np.cos(2 * np.pi * t / period)
            uu = k * np.sin(lam / 2) ** 2 * np.sin(2 * phi) * g
            vv = 0.5 * k * np.sin(lam) * np.cos(phi) * g
        u = u + fac * uu
        v = v + fac * vv
    solver = ReferenceSolver(grid, hybrid, p_surf)
    _, _, W = solver.mass_fluxes(schemes, t)
    area = cell_areas(grid)
    omega = -0.5 * (W[:-1] + W[1:]) * GRAVITY / area
    return u, v, omega


# -- solver ------------------------------------------------------------------

def van_leer_slopes(mu, axis, periodic):
    """Limited cell slopes (difference across the cell) of ``mu`` along ``axis``."""
    if periodic:
        dm = mu - np.roll(mu, 1, axis)
        dp = np.roll(mu, -1, axis) - mu
    else:
        d = np.diff(mu, axis=axis)
        shape = list(mu.shape)
        shape[axis] = 1
        z = np.zeros(shape)
        dm = np.concatenate([z, d], axis=axis)
        dp = np.concatenate([d, z], axis=axis)
    prod = dm * dp
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(prod > 0, 2.0 * prod / (dm + dp), 0.0)
    return s


def advect_1d(rm, m, F, axis, periodic):
    """One flux-form sweep.

    ``rm`` tracer mass and ``m`` air mass per cell; ``F`` air mass moved
    through faces during the sweep. Periodic axes have one face per cell
    (face ``i`` between cells ``i`` and ``i+1``); closed axes have ``n+1``
    faces with zero boundary flux. Returns updated ``(rm, m)``.
    """
    mu = rm / m
    s = van_leer_slopes(mu, axis, periodic)
    if periodic:
        m_up_r = np.roll(m, -1, axis)
        mu_r = np.roll(mu, -1, axis)
        s_r = np.roll(s, -1, axis)
        Fi = F
        m_l, mu_l, s_l = m, mu, s
    else:
        n = m.shape[axis]
        sl_lo = [slice(None)] * m.ndim
        sl_hi = [slice(None)] * m.ndim
        sl_lo[axis] = slice(0, n - 1)
        sl_hi[axis] = slice(1, n)
        sl_lo, sl_hi = tuple(sl_lo), tuple(sl_hi)
        Fi = np.take(F, np.arange(1, n), axis=axis)
        m_l, mu_l, s_l = m[sl_lo], mu[sl_lo], s[sl_lo]
        m_up_r, mu_r, s_r = m[sl_hi], mu[sl_hi], s[sl_hi]
    pos = Fi >= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        a_l = np.where(pos, Fi / m_l, 0.0)
        a_r = np.where(pos, 0.0, -Fi / m_up_r)
    mu_face = np.where(pos, mu_l + 0.5 * (1.0 - a_l) * s_l, mu_r - 0.5 * (1.0 - a_r) * s_r)
    f = Fi * mu_face
    if periodic:
        rm_new = rm + np.roll(f, 1, axis) - f
        m_new = m + np.roll(Fi, 1, axis) - Fi
    else:
        shape = list(m.shape)
        shape[axis] = 1
        z = np.zeros(shape)
        f_all = np.concatenate([z, f, z], axis=axis)
        F_all = np.concatenate([z, Fi, z], axis=axis)
        rm_new = rm + np.take(f_all, np.arange(n), axis=axis) - np.take(f_all, np.arange(1, n + 1), axis=axis)
        m_new = m + np.take(F_all, np.arange(n), axis=axis) - np.take(F_all, np.arange(1, n + 1), axis=axis)
    return rm_new, m_new


class ReferenceSolver:
    """Finite-volume transport on a fixed grid with constant surface pressure."""

    def __init__(self, grid, hybrid, p_surf=1013.25):
        self.grid = grid
        self.hybrid = hybrid
        self.p_surf = np.broadcast_to(np.asarray(p_surf, dtype=float), grid.shape).copy()
        self.areas = cell_areas(grid)
        self.airmass = air_mass(self.p_surf, hybrid, self.areas)
        self._layer_kg = hybrid.thickness(self.p_surf) * 100.0 / GRAVITY   # kg m-2 per layer

    def mass_fluxes(self, schemes, t):
        """Air-mass fluxes in kg/s: ``Fx [lev, lat, lon]`` through east faces,
        ``Fy [lev, lat+1, lon]`` through latitude edges (northward positive),
        ``W [lev+1, lat, lon]`` upward through interfaces."""
        if isinstance(schemes, dict):
            schemes = [schemes]
        _validate_schemes(schemes)
        g = self.grid
        n_lev = self.hybrid.n_lev
        lat_e, lon_e = np.meshgrid(g.lat_edges, g.lon_edges, indexing="ij")  # [lat+1, lon+1]
        Fx = np.zeros((n_lev,) + g.shape)
        Fy = np.zeros((n_lev, g.n_lat + 1, g.n_lon))
        dlam = np.deg2rad(g.dlon)
        for s in schemes:
            if s["scheme"] == "overturning":
                prof = _overturning_profile(self.hybrid, self.p_surf)
                phi_e = np.deg2rad(g.lat_edges)
                vel = float(s.get("amplitude", 0.0)) * np.sin(2 * phi_e) * g.radius * np.cos(phi_e) * dlam
                Fy += prof[:, None, None] * vel[None, :, None] * np.ones(g.n_lon)
                continue
            psi = streamfunction(s, t, lat_e, lon_e, g.radius)
            fac = _level_factor(n_lev, float(s.get("shear", 0.0)))[:, None, None]
            fx = -(psi[1:, 1:] - psi[:-1, 1:])            # east face of cell (j, i)
            fy = psi[:, 1:] - psi[:, :-1]                  # face at lat edge e, lon cell i
            Fx += fac * fx[None]
            Fy += fac * fy[None]
        Fy[:, 0] = 0.0
        Fy[:, -1] = 0.0
        Fx *= self._layer_kg[:, :, :]
        # layer thickness at the edges: constant surface pressure keeps it uniform in lat
        Fy *= np.concatenate([self._layer_kg[:, :1], self._layer_kg], axis=1)
        conv = np.roll(Fx, 1, axis=2) - Fx + Fy[:, :-1] - Fy[:, 1:]
        W = np.zeros((n_lev + 1,) + g.shape)
        W[1:] = np.cumsum(conv, axis=0)
        W[-1] = 0.0
        return Fx, Fy, W

    def courant(self, Fx, Fy, W, dt):
        """Largest outflow fraction of any cell face over a full step ``dt``."""
        m = self.airmass
        cx = np.maximum(np.abs(Fx) / m, np.abs(Fx) / np.roll(m, -1, axis=2))
        cy = np.abs(Fy[:, 1:-1]) / np.minimum(m[:, :-1], m[:, 1:])
        cz = np.abs(W[1:-1]) / np.minimum(m[:-1], m[1:]) if m.shape[0] > 1 else np.zeros(1)
        return float(max(cx.max(), cy.max() if cy.size else 0.0, cz.max() if cz.size else 0.0) * dt)

    def step(self, co2, flux_total, schemes, t, dt, check_cfl=True):
        """Advance mixing ratio ``co2`` (ppm) from ``t`` to ``t + dt``.

        ``flux_total`` (kg m-2 s-1) is the interval-mean surface flux. Winds
        are evaluated at the interval midpoint.
        """
        Fx, Fy, W = self.mass_fluxes(schemes, t + 0.5 * dt)
        if check_cfl:
            c = self.courant(Fx, Fy, W, dt)
            if c > MAX_COURANT + 1e-12:
                raise InvalidStateError(f"CFL violation: Courant number {c:.3f} > {MAX_COURANT}")
        h = 0.5 * dt
        m = self.airmass.copy()
        rm = np.asarray(co2, dtype=float) * PPM * m
        rm, m = advect_1d(rm, m, Fx * h, axis=2, periodic=True)
        rm, m = advect_1d(rm, m, Fy * h, axis=1, periodic=False)
        rm, m = advect_1d(rm, m, W * h, axis=0, periodic=False)
        if flux_total is not None:
            rm[0] += np.asarray(flux_total) * self.areas * dt
        rm, m = advect_1d(rm, m, W * h, axis=0, periodic=False)
        rm, m = advect_1d(rm, m, Fy * h, axis=1, periodic=False)
        rm, m = advect_1d(rm, m, Fx * h, axis=2, periodic=True)
        return rm / (PPM * m)


def step_reference(co2, schemes, flux_total, dt, t, grid, hybrid, p_surf=1013.25):
    """Functional wrapper around :meth:`ReferenceSolver.step`."""
    return ReferenceSolver(grid, hybrid, p_surf).step(co2, flux_total, schemes, t, dt)


# -- scenario ----------------------------------------------------------------

@dataclass
class Scenario:
    """Synthetic world definition.

    ``winds`` components are summed. ``sources`` are point anthropogenic
    emitters ``{lat, lon, rate}`` (kg/s) growing linearly by ``anthro_growth``
    per year. ``initial`` is ``{"kind": "uniform", "value": ppm}`` or
    ``{"kind": "blobs", "background": ppm, "blobs": [{lat, lon, amplitude, radius}]}``.
    """

    n_lat: int = 32
    n_lon: int = 64
    n_lev: int = 5
    n_steps: int = 8
    dt: float = 21600.0
    start: str = "2000-01-01T00:00:00"
    p_surf: float = 1013.25
    winds: list = field(default_factory=lambda: [{"scheme": "solid_body", "alpha": 0.0, "period_days": 32.0}])
    sources: list = field(default_factory=lambda: [
        {"lat": 40.0, "lon": 250.0, "rate": 1.0e4},
        {"lat": 50.0, "lon": 10.0, "rate": 1.0e4},
        {"lat": 32.0, "lon": 115.0, "rate": 1.5e4},
    ])
    anthro_growth: float = 0.02
    land_amplitude: float = 2.0e-8
    ocean_amplitude: float = 2.0e-9
    initial: dict = field(default_factory=lambda: {"kind": "uniform", "value": 400.0})
    met_noise: float = 0.01
    splits: list = field(default_factory=list)
    store_dtype: str = "<f8"
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 2:
            raise InvalidArgumentError("scenario duration must be at least 2 steps")
        if self.dt <= 0:
            raise InvalidArgumentError("dt must be positive")
        _validate_schemes(self.winds)

    @property
    def grid(self):
        return Grid(self.n_lat, self.n_lon)

    @property
    def hybrid(self):
        return HybridLevels.sigma(self.n_lev)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def initial_co2(scenario, grid, n_lev):
    init = scenario.initial
    kind = init.get("kind", "uniform")
    if kind == "uniform":
        return np.full((n_lev,) + grid.shape, float(init.get("value", 400.0)))
    if kind == "blobs":
        field_ = np.full(grid.shape, float(init.get("background", 400.0)))
        phi = np.deg2rad(grid.lat)[:, None]
        lam = np.deg2rad(grid.lon)[None, :]
        for b in init.get("blobs", []):
            p0, l0 = np.deg2rad(b["lat"]), np.deg2rad(b["lon"])
            cosd = np.sin(phi) * np.sin(p0) + np.cos(phi) * np.cos(p0) * np.cos(lam - l0)
            dist = np.arccos(np.clip(cosd, -1, 1))
            field_ = field_ + float(b["amplitude"]) * np.exp(-(dist / np.deg2rad(b["radius"])) ** 2)
        return np.repeat(field_[None], n_lev, axis=0)
    raise InvalidArgumentError(f"unknown initial condition {kind!r}")


def surface_fluxes(scenario, grid, t):
    """Instantaneous ``(land, ocean, anthro)`` fluxes in kg m-2 s-1 at time ``t`` (s)."""
    phi = np.deg2rad(grid.lat)[:, None]
    lam = np.deg2rad(grid.lon)[None, :]
    areas = cell_areas(grid)
    pattern = (0.6 + 0.4 * np.cos(3 * lam)) * np.exp(-((np.rad2deg(phi) - 45.0) / 25.0) ** 2)
    pattern = pattern + 0.5 * np.exp(-(np.rad2deg(phi) / 15.0) ** 2) * (0.5 + 0.5 * np.sin(2 * lam))
    season = np.cos(2 * np.pi * t / SECONDS_PER_YEAR)
    land = -scenario.land_amplitude * pattern * np.sin(phi + 0.3) * season
    ocean = -scenario.ocean_amplitude * (0.5 + 0.5 * np.cos(2 * lam + 1.0)) * np.cos(phi) ** 2
    ocean = ocean * np.ones_like(land)
    anthro = np.zeros(grid.shape)
    growth = 1.0 + scenario.anthro_growth * t / SECONDS_PER_YEAR
    for src in scenario.sources:
        j = int(np.clip(np.searchsorted(grid.lat_edges, src["lat"], side="right") - 1, 0, grid.n_lat - 1))
        i = int(np.floor((src["lon"] % 360.0) / grid.dlon)) % grid.n_lon
        anthro[j, i] += float(src["rate"]) * growth / areas[j, i]
    return land, ocean, anthro


def standard_atmosphere(p_hpa):
    """Geopotential height (m) and temperature (K) of pressure ``p_hpa``."""
    t0, lapse, p0, rd = 288.15, 0.0065, 1013.25, 287.05
    z_trop = 11000.0
    t_trop = t0 - lapse * z_trop
    p_trop = p0 * (t_trop / t0) ** (GRAVITY / (rd * lapse))
    p = np.asarray(p_hpa, dtype=float)
    z = np.where(p >= p_trop,
                 t0 / lapse * (1 - (p / p0) ** (rd * lapse / GRAVITY)),
                 z_trop + rd * t_trop / GRAVITY * np.log(p_trop / np.maximum(p, 1e-3)))
    temp = np.where(p >= p_trop, t0 - lapse * z, t_trop)
    return z, temp


class _MetNoise:
    """Seeded smooth perturbations, a handful of travelling low-order waves."""

    def __init__(self, rng, n_waves=4):
        self.k = rng.integers(1, 4, size=n_waves)
        self.l = rng.integers(1, 3, size=n_waves)
        self.phase = rng.uniform(0, 2 * np.pi, size=n_waves)
        self.freq = rng.uniform(0.5, 2.0, size=n_waves) * 2 * np.pi / (10 * SECONDS_PER_DAY)
        self.amp = rng.normal(size=n_waves) / np.sqrt(n_waves)

    def __call__(self, grid, t):
        phi = np.deg2rad(grid.lat)[:, None]
        lam = np.deg2rad(grid.lon)[None, :]
        out = np.zeros(grid.shape)
        for k, l, ph, f, a in zip(self.k, self.l, self.phase, self.freq, self.amp):
            out += a * np.cos(k * lam + f * t + ph) * np.cos(l * phi)
        return out


def meteorology(scenario, grid, hybrid, t, noise):
    """``{u, v, omega, t, q, z}`` fields at time ``t``."""
    u, v, omega = wind_field(scenario.winds, t, grid, hybrid, scenario.p_surf)
    p = hybrid.interface_pressure(np.full(grid.shape, scenario.p_surf))
    p_mid = 0.5 * (p[:-1] + p[1:])
    z, temp = standard_atmosphere(p_mid)
    phi = np.deg2rad(grid.lat)[None, :, None]
    pert = np.stack([noise[k](grid, t) for k in range(len(noise))])
    temp = temp - 30.0 * np.sin(phi) ** 2 + 20.0 * scenario.met_noise * pert[0][None]
    z = z * (1.0 + 0.1 * scenario.met_noise * pert[1][None])
    q = 0.015 * np.cos(phi) ** 2 * np.exp(-z / 2500.0) * (1.0 + scenario.met_noise * pert[2][None])
    return {"u": u, "v": v, "omega": omega, "t": temp, "q": q, "z": z}


def simulate(scenario):
    """Run the reference solver and return an in-memory :class:`Dataset`."""
    grid, hybrid = scenario.grid, scenario.hybrid
    solver = ReferenceSolver(grid, hybrid, scenario.p_surf)
    T, dt = scenario.n_steps, scenario.dt
    rng = np.random.default_rng(scenario.seed)
    noise = [_MetNoise(rng) for _ in range(3)]
    for k in range(T):
        Fx, Fy, W = solver.mass_fluxes(scenario.winds, (k + 0.5) * dt)
        c = solver.courant(Fx, Fy, W, dt)
        if c > MAX_COURANT + 1e-12:
            raise InvalidStateError(f"CFL violation at step {k}: Courant number {c:.3f} > {MAX_COURANT}")
    shape3 = (T + 1, hybrid.n_lev) + grid.shape
    f3 = {v: np.empty(shape3) for v in VARS_3D}
    inst = np.stack([np.stack(surface_fluxes(scenario, grid, k * dt)) for k in range(T + 1)])
    staggered = 0.5 * (inst[:-1] + inst[1:])
    fluxes = {name: staggered[:, j].copy() for j, name in enumerate(FLUX_FIELDS)}
    co2 = initial_co2(scenario, grid, hybrid.n_lev)
    for k in range(T + 1):
        f3["co2"][k] = co2
        f3["airmass"][k] = solver.airmass
        for name, arr in meteorology(scenario, grid, hybrid, k * dt, noise).items():
            f3[name][k] = arr
        if k < T:
            total = staggered[k].sum(0)
            co2 = solver.step(co2, total, scenario.winds, k * dt, dt, check_cfl=False)
    start = np.datetime64(scenario.start, "s")
    time = start + np.arange(T + 1) * np.timedelta64(int(dt), "s")
    ds = Dataset(grid, hybrid, time, dt, f3, np.repeat(solver.p_surf[None], T + 1, axis=0), fluxes,
                 attrs={"scenario": scenario.to_dict()})
    if scenario.splits:
        ds.splits = split_dataset(T + 1, scenario.splits)
    return ds


def generate_world(scenario, root):
    """Simulate ``scenario`` and write it to a store at ``root``."""
    ds = simulate(scenario)
    root = Path(root)
    try:
        store = DatasetStore.create(root, ds.grid, ds.hybrid, ds.time[0], ds.dt, ds.n_times,
                                    dtype=scenario.store_dtype, attrs=ds.attrs)
    except OSError as exc:
        raise OSError(f"unwritable target path {root}: {exc}") from exc
    store.write_dataset(ds)
    log.info("wrote %d states to %s", ds.n_times, root)
    return store

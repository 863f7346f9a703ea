"""Spherical lat-lon geometry, hybrid levels and tracer/air-mass bookkeeping.

Latitude index 0 is the southernmost row; level index 0 is the lowest layer.
Mixing ratios are in ppm (1e-6 kg CO2 per kg dry air), masses in kg unless a
function says otherwise, pressures in hPa and fluxes in kg m-2 s-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import InvalidArgumentError, InvalidStateError
from .validation import check_field, check_same_shape

EARTH_RADIUS = 6.371e6
GRAVITY = 9.80665
PPM = 1e-6
KG_PER_PG = 1e12


@dataclass(frozen=True)
class Grid:
    """Equiangular lat-lon grid covering the sphere.

    Longitude cell ``i`` spans ``[i*dlon, (i+1)*dlon)`` degrees east.
    """

    n_lat: int
    n_lon: int
    radius: float = EARTH_RADIUS

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 1:
            raise InvalidArgumentError("grid extents must be positive")
        if self.radius <= 0:
            raise InvalidArgumentError("radius must be positive")

    @property
    def shape(self):
        return (self.n_lat, self.n_lon)

    @property
    def dlon(self):
        return 360.0 / self.n_lon

    @cached_property
    def lat_edges(self):
        return np.linspace(-90.0, 90.0, self.n_lat + 1)

    @cached_property
    def lat(self):
        e = self.lat_edges
        return 0.5 * (e[:-1] + e[1:])

    @cached_property
    def lon_edges(self):
        return np.arange(self.n_lon + 1) * self.dlon

    @cached_property
    def lon(self):
        return (np.arange(self.n_lon) + 0.5) * self.dlon

    @cached_property
    def areas(self):
        return cell_areas(self)

    def to_dict(self):
        return {"n_lat": self.n_lat, "n_lon": self.n_lon, "radius": self.radius}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_lat"]), int(d["n_lon"]), float(d.get("radius", EARTH_RADIUS)))


@dataclass(frozen=True)
class HybridLevels:
    """Interface coefficients ``p_k = a_k + b_k * p_surf`` for ``k = 0..n_lev``."""

    a: tuple
    b: tuple

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.ndim != 1 or a.shape != b.shape or a.size < 2:
            raise InvalidArgumentError("a and b must be 1-D with equal length >= 2")
        if b[0] != 1.0 or b[-1] != 0.0:
            raise InvalidArgumentError("hybrid b must run from 1 at the surface to 0 at the top")
        object.__setattr__(self, "a", tuple(float(v) for v in a))
        object.__setattr__(self, "b", tuple(float(v) for v in b))

    @classmethod
    def sigma(cls, n_lev):
        """Pure sigma coordinates: a = 0, b evenly spaced from 1 to 0."""
        return cls(tuple([0.0] * (n_lev + 1)), tuple(np.linspace(1.0, 0.0, n_lev + 1)))

    @property
    def n_lev(self):
        return len(self.a) - 1

    def interface_pressure(self, p_surf):
        """Interface pressures (hPa) with shape ``[n_lev+1, *p_surf.shape]``."""
        ps = np.asarray(p_surf, dtype=float)
        a = np.asarray(self.a).reshape((-1,) + (1,) * ps.ndim)
        b = np.asarray(self.b).reshape((-1,) + (1,) * ps.ndim)
        return a + b * ps

    def thickness(self, p_surf):
        p = self.interface_pressure(p_surf)
        return p[:-1] - p[1:]

    def merge(self, groups):
        """Coarser levels keeping every interface that bounds a group of layers."""
        idx = [0]
        for g in groups:
            idx.append(idx[-1] + int(g))
        if idx[-1] != self.n_lev or any(int(g) < 1 for g in groups):
            raise InvalidArgumentError(f"vertical groups {groups} do not partition {self.n_lev} levels")
        return HybridLevels(tuple(self.a[i] for i in idx), tuple(self.b[i] for i in idx))

    def to_dict(self):
        return {"a": list(self.a), "b": list(self.b)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["a"]), tuple(d["b"]))


def cell_areas(grid):
    """Cell areas in m2, shape ``[n_lat, n_lon]``; identical along longitude."""
    phi = np.deg2rad(grid.lat_edges)
    band = grid.radius ** 2 * np.deg2rad(grid.dlon) * (np.sin(phi[1:]) - np.sin(phi[:-1]))
    return np.repeat(band[:, None], grid.n_lon, axis=1)


def air_mass(p_surf, hybrid, areas):
    """Air mass per cell in kg, ``m_k = A * (p_k - p_{k+1}) * 100 / g``."""
    ps = check_field(p_surf, name="p_surf")
    if np.any(ps <= 0):
        raise InvalidArgumentError("surface pressure must be positive")
    dp = hybrid.thickness(ps)
    if np.any(dp < 0):
        raise InvalidStateError("interface pressures are not monotonically decreasing with height")
    return np.asarray(areas, dtype=float)[None] * dp * 100.0 / GRAVITY


def tracer_mass(mu, air):
    """Per-cell tracer mass (kg) and the global total in kg and Pg."""
    check_same_shape(mu, air, ("mu", "air_mass"))
    cell = np.asarray(mu, dtype=float) * PPM * np.asarray(air, dtype=float)
    total = float(np.sum(cell))
    return cell, total, total / KG_PER_PG


def mixing_ratio(mass, air):
    """Inverse of :func:`tracer_mass`: ppm from per-cell tracer mass in kg."""
    check_same_shape(mass, air, ("mass", "air_mass"))
    return np.asarray(mass, dtype=float) / (PPM * np.asarray(air, dtype=float))


@dataclass
class AtmosState:
    """One time step of tracer plus meteorology, all 3-D fields ``[lev, lat, lon]``."""

    time: np.datetime64
    co2: np.ndarray
    airmass: np.ndarray
    p_surf: np.ndarray
    met: dict = field(default_factory=dict)

    MET_FIELDS = ("u", "v", "omega", "t", "q", "z")

    def validate(self, hybrid=None, areas=None, rtol=1e-10):
        if not np.all(np.isfinite(self.co2)):
            raise InvalidStateError("co2 contains non-finite values")
        if not np.all(self.airmass > 0):
            raise InvalidStateError("air mass must be positive in every cell")
        if hybrid is not None and areas is not None:
            expected = air_mass(self.p_surf, hybrid, areas)
            if not np.allclose(self.airmass, expected, rtol=rtol, atol=0):
                raise InvalidStateError("air mass inconsistent with hybrid levels")
        return self


@dataclass
class FluxField:
    """Interval-mean surface fluxes valid over ``[start, start + dt)``."""

    start: np.datetime64
    dt: float
    land: np.ndarray
    ocean: np.ndarray
    anthro: np.ndarray

    @property
    def total(self):
        return self.land + self.ocean + self.anthro

    def mass(self, areas):
        """Total flux mass over the interval (kg)."""
        return float(np.sum(self.total * areas) * self.dt)

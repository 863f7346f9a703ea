"""Preprocessing chain, dataset splits, normalization statistics and the store.

Store layout::

    <root>/meta.json
    <root>/stats.json
    <root>/chunks/t000000_2d.bin   [var, lat, lon]
    <root>/chunks/t000000_3d.bin   [var, lev, lat, lon]

Chunks are raw little-endian row-major arrays. Interval-valued 2-D variables
(the staggered fluxes) of the final time step are NaN because no interval
follows it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidArgumentError, InvalidStateError
from .sphere import GRAVITY, PPM, Grid, HybridLevels, cell_areas
from .validation import check_field

VARS_3D = ("co2", "airmass", "u", "v", "omega", "t", "q", "z")
MET_FIELDS = ("u", "v", "omega", "t", "q", "z")
FLUX_FIELDS = ("flux_land", "flux_ocean", "flux_anthro")
VARS_2D = ("p_surf",) + FLUX_FIELDS
UNITS = {
    "co2": "ppm", "airmass": "kg", "u": "m s-1", "v": "m s-1", "omega": "Pa s-1",
    "t": "K", "q": "kg kg-1", "z": "m", "p_surf": "hPa",
    "flux_land": "kg m-2 s-1", "flux_ocean": "kg m-2 s-1", "flux_anthro": "kg m-2 s-1",
}
INTENSIVE_3D = ("co2", "u", "v", "omega", "t", "q", "z")
EXTENSIVE_3D = ("airmass",)
STORE_DTYPES = ("<f8", "<f4")


@dataclass
class Dataset:
    """In-memory trajectory: ``n_times`` states and ``n_times - 1`` flux intervals."""

    grid: Grid
    hybrid: HybridLevels
    time: np.ndarray                      # datetime64[s], shape [T+1]
    dt: float
    fields3d: dict                        # name -> [T+1, lev, lat, lon]
    p_surf: np.ndarray                    # [T+1, lat, lon]
    fluxes: dict                          # name -> [T, lat, lon]
    splits: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    @property
    def n_times(self):
        return len(self.time)

    @property
    def n_lev(self):
        return self.hybrid.n_lev

    def flux_total(self, t):
        return sum(self.fluxes[f][t] for f in FLUX_FIELDS)

    def tracer_mass(self, t):
        return float(np.sum(self.fields3d["co2"][t] * PPM * self.fields3d["airmass"][t]))

    def validate(self):
        T = self.n_times
        if T < 2:
            raise InvalidArgumentError("dataset needs at least two time steps")
        for name, arr in self.fields3d.items():
            if arr.shape != (T, self.n_lev) + self.grid.shape:
                raise InvalidStateError(f"{name} has shape {arr.shape}")
        for name, arr in self.fluxes.items():
            if arr.shape != (T - 1,) + self.grid.shape:
                raise InvalidStateError(f"{name} has shape {arr.shape}")
        steps = np.diff(self.time.astype("datetime64[s]").astype(np.int64))
        if np.any(steps <= 0) or np.any(steps != steps[0]):
            raise InvalidStateError("time axis must be strictly increasing and uniform")
        return self

    def subset(self, start, stop):
        """States ``start..stop-1`` with the fluxes between them."""
        return Dataset(self.grid, self.hybrid, self.time[start:stop], self.dt,
                       {k: v[start:stop] for k, v in self.fields3d.items()},
                       self.p_surf[start:stop],
                       {k: v[start:stop - 1] for k, v in self.fluxes.items()},
                       {}, dict(self.attrs))


# -- store -------------------------------------------------------------------

def _chunk_path(root, t, kind):
    return Path(root) / "chunks" / f"t{t:06d}_{kind}.bin"


def _json_dump(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


class DatasetStore:
    """Chunked per-time-step store; one writer, any number of readers."""

    def __init__(self, root):
        self.root = Path(root)
        self._meta = None

    @property
    def meta(self):
        if self._meta is None:
            path = self.root / "meta.json"
            if not path.exists():
                raise FileNotFoundError(f"no store at {self.root}")
            self._meta = json.loads(path.read_text())
        return self._meta

    @property
    def grid(self):
        return Grid.from_dict(self.meta["grid"])

    @property
    def hybrid(self):
        return HybridLevels.from_dict(self.meta["hybrid"])

    @property
    def n_times(self):
        return int(self.meta["time"]["n_times"])

    @property
    def dtype(self):
        return np.dtype(self.meta["dtype"])

    @property
    def dt(self):
        return float(self.meta["time"]["dt_seconds"])

    @property
    def times(self):
        start = np.datetime64(self.meta["time"]["start"], "s")
        return start + np.arange(self.n_times) * np.timedelta64(int(self.dt), "s")

    @property
    def splits(self):
        return {k: tuple(v) for k, v in self.meta.get("splits", {}).items()}

    @classmethod
    def create(cls, root, grid, hybrid, start, dt, n_times, dtype="<f8", attrs=None):
        if dtype not in STORE_DTYPES:
            raise InvalidArgumentError(f"unsupported store dtype {dtype}")
        root = Path(root)
        try:
            (root / "chunks").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create store at {root}: {exc}") from exc
        meta = {
            "format": "tracerbench-store",
            "version": 1,
            "grid": grid.to_dict(),
            "hybrid": hybrid.to_dict(),
            "dtype": dtype,
            "vars_2d": [{"name": n, "units": UNITS[n],
                         "kind": "interval" if n in FLUX_FIELDS else "state"} for n in VARS_2D],
            "vars_3d": [{"name": n, "units": UNITS[n]} for n in VARS_3D],
            "time": {"start": str(np.datetime64(start, "s")), "dt_seconds": int(dt),
                     "n_times": int(n_times)},
            "n_flux_records": int(n_times) - 1,
            "splits": {},
            "complete": False,
            "attrs": attrs or {},
        }
        _json_dump(meta, root / "meta.json")
        store = cls(root)
        store._meta = meta
        return store

    def update_meta(self, **changes):
        meta = dict(self.meta)
        meta.update(changes)
        _json_dump(meta, self.root / "meta.json")
        self._meta = meta

    def write_step(self, t, arr2d, arr3d):
        """Write the two chunks of time step ``t`` (write-once)."""
        grid, n_lev = self.grid, self.hybrid.n_lev
        a2 = np.asarray(arr2d, dtype=self.dtype)
        a3 = np.asarray(arr3d, dtype=self.dtype)
        if a2.shape != (len(VARS_2D),) + grid.shape:
            raise InvalidArgumentError(f"2-D chunk has shape {a2.shape}")
        if a3.shape != (len(VARS_3D), n_lev) + grid.shape:
            raise InvalidArgumentError(f"3-D chunk has shape {a3.shape}")
        _chunk_path(self.root, t, "2d").write_bytes(np.ascontiguousarray(a2).tobytes())
        _chunk_path(self.root, t, "3d").write_bytes(np.ascontiguousarray(a3).tobytes())

    def read_step(self, t):
        """Return ``(arr2d, arr3d)`` for time step ``t`` as float64 arrays."""
        if not 0 <= t < self.n_times:
            raise InvalidArgumentError(f"time index {t} outside 0..{self.n_times - 1}")
        grid, n_lev = self.grid, self.hybrid.n_lev
        a2 = np.frombuffer(_chunk_path(self.root, t, "2d").read_bytes(), dtype=self.dtype)
        a3 = np.frombuffer(_chunk_path(self.root, t, "3d").read_bytes(), dtype=self.dtype)
        return (a2.reshape((len(VARS_2D),) + grid.shape).astype(np.float64),
                a3.reshape((len(VARS_3D), n_lev) + grid.shape).astype(np.float64))

    def read_raw(self, t, kind):
        return _chunk_path(self.root, t, kind).read_bytes()

    def write_dataset(self, ds, mark_complete=True):
        for t in range(ds.n_times):
            self.write_step(t, *dataset_chunks(ds, t))
        if ds.splits:
            self.update_meta(splits={k: list(v) for k, v in ds.splits.items()})
        if mark_complete:
            self.update_meta(complete=True)

    def load(self, start=0, stop=None, dtype=np.float64):
        """Materialize time steps ``start..stop-1`` as a :class:`Dataset`."""
        stop = self.n_times if stop is None else stop
        n = stop - start
        grid, n_lev = self.grid, self.hybrid.n_lev
        f3 = {v: np.empty((n, n_lev) + grid.shape, dtype) for v in VARS_3D}
        ps = np.empty((n,) + grid.shape, dtype)
        fl = {v: np.empty((n - 1,) + grid.shape, dtype) for v in FLUX_FIELDS}
        for i in range(n):
            a2, a3 = self.read_step(start + i)
            for j, v in enumerate(VARS_3D):
                f3[v][i] = a3[j]
            ps[i] = a2[0]
            if i < n - 1:
                for j, v in enumerate(FLUX_FIELDS):
                    fl[v][i] = a2[1 + j]
        ds = Dataset(grid, self.hybrid, self.times[start:stop], self.dt, f3, ps, fl,
                     attrs=dict(self.meta.get("attrs", {})))
        if start == 0 and stop == self.n_times:
            ds.splits = self.splits
        return ds

    def write_stats(self, stats):
        _json_dump(stats.to_dict(), self.root / "stats.json")

    def read_stats(self):
        return NormalizationStats.from_dict(json.loads((self.root / "stats.json").read_text()))


def dataset_chunks(ds, t):
    """Assemble the ``(2d, 3d)`` chunk arrays of time step ``t``."""
    grid = ds.grid
    a2 = np.full((len(VARS_2D),) + grid.shape, np.nan)
    a2[0] = ds.p_surf[t]
    if t < ds.n_times - 1:
        for j, v in enumerate(FLUX_FIELDS):
            a2[1 + j] = ds.fluxes[v][t]
    a3 = np.stack([ds.fields3d[v][t] for v in VARS_3D])
    return a2, a3


def write_dataset(ds, root, dtype="<f8"):
    store = DatasetStore.create(root, ds.grid, ds.hybrid, ds.time[0], ds.dt, ds.n_times,
                                dtype=dtype, attrs=ds.attrs)
    store.write_dataset(ds)
    return store


# -- regridding --------------------------------------------------------------

def _overlap_1d(src_edges, dst_edges, measure):
    """Overlap ``[n_dst, n_src]`` of two interval partitions under ``measure``."""
    lo = np.maximum(dst_edges[:-1, None], src_edges[None, :-1])
    hi = np.minimum(dst_edges[1:, None], src_edges[None, 1:])
    ok = hi > lo
    return np.where(ok, measure(np.where(ok, hi, 0)) - measure(np.where(ok, lo, 0)), 0.0)


def conservative_weights(src_grid, dst_grid):
    """Separable area-overlap weights ``(W_lat, W_lon)``; overlap = r^2 W_lat W_lon."""
    wlat = _overlap_1d(src_grid.lat_edges, dst_grid.lat_edges,
                       lambda d: np.sin(np.deg2rad(d)))
    wlon = _overlap_1d(src_grid.lon_edges, dst_grid.lon_edges, np.deg2rad)
    return wlat, wlon


def regrid_conservative(field, src_grid, dst_grid, extensive=False):
    """First-order conservative remap of ``[..., lat, lon]`` fields.

    Intensive fields (densities) are area-overlap averaged. Extensive fields
    (per-cell totals) are divided by source area first and multiplied by the
    destination area afterwards, so their global sum is preserved.
    """
    f = check_field(field, name="field")
    if f.shape[-2:] != src_grid.shape:
        raise InvalidArgumentError(f"field {f.shape} does not live on source grid {src_grid.shape}")
    if abs(src_grid.radius - dst_grid.radius) > 1e-9 * src_grid.radius:
        raise InvalidArgumentError("grids have different radii")
    wlat, wlon = conservative_weights(src_grid, dst_grid)
    dst_area = wlat.sum(1)[:, None] * wlon.sum(1)[None, :]
    if np.any(dst_area <= 0):
        raise InvalidArgumentError("destination cell with zero overlap area")
    if extensive:
        f = f / cell_areas(src_grid)
    out = np.einsum("ia,jb,...ab->...ij", wlat, wlon, f) / dst_area
    if extensive:
        out = out * cell_areas(dst_grid)
    return out


def regrid_bilinear(field, src_grid, dst_grid):
    """Bilinear interpolation between cell centres, periodic in longitude.

    Destination latitudes beyond the outermost source centres take the
    nearest row's value.
    """
    f = check_field(field, name="field")
    if f.shape[-2:] != src_grid.shape:
        raise InvalidArgumentError(f"field {f.shape} does not live on source grid {src_grid.shape}")
    slat, slon = src_grid.lat, src_grid.lon
    y = np.interp(dst_grid.lat, slat, np.arange(src_grid.n_lat))
    j0 = np.clip(np.floor(y).astype(int), 0, src_grid.n_lat - 1)
    j1 = np.minimum(j0 + 1, src_grid.n_lat - 1)
    wy = y - j0
    x = ((dst_grid.lon - slon[0]) / src_grid.dlon) % src_grid.n_lon
    i0 = np.floor(x).astype(int) % src_grid.n_lon
    i1 = (i0 + 1) % src_grid.n_lon
    wx = x - np.floor(x)
    rows = f[..., j0, :] * (1 - wy)[:, None] + f[..., j1, :] * wy[:, None]
    return rows[..., i0] * (1 - wx) + rows[..., i1] * wx


# -- preprocessing chain -----------------------------------------------------

def stagger_fluxes(series):
    """Interval means ``(F[t] + F[t+1]) / 2`` of an instantaneous series."""
    arr = np.asarray(series, dtype=float)
    if arr.shape[0] < 2:
        raise InvalidArgumentError("staggering needs at least two time points")
    return 0.5 * (arr[:-1] + arr[1:])


def _block_sum(x, fy, fx):
    *lead, H, W = x.shape
    return x.reshape(*lead, H // fy, fy, W // fx, fx).sum(axis=(-3, -1))


def coarsen(ds, horiz_factor=1, vert_groups=None, time_factor=1):
    """Aggregate a dataset in space and time.

    Intensive 3-D fields are averaged with air-mass weights (pressure-thickness
    times area), air mass is summed, 2-D state fields are area-averaged, flux
    densities are area-averaged and time-averaged over merged intervals, and
    states are linearly resampled (subsampled) in time.
    """
    g, n_lev = ds.grid, ds.n_lev
    if g.n_lat % horiz_factor or g.n_lon % horiz_factor:
        raise InvalidArgumentError(f"horizontal factor {horiz_factor} does not divide {g.shape}")
    vert_groups = list(vert_groups) if vert_groups else [1] * n_lev
    hybrid = ds.hybrid.merge(vert_groups)
    if (ds.n_times - 1) % time_factor:
        raise InvalidArgumentError(f"time factor {time_factor} does not divide {ds.n_times - 1} intervals")
    bounds = np.concatenate([[0], np.cumsum(vert_groups)])
    new_grid = Grid(g.n_lat // horiz_factor, g.n_lon // horiz_factor, g.radius)
    tidx = np.arange(0, ds.n_times, time_factor)
    mass = ds.fields3d["airmass"][tidx]

    def vgroup(x):
        return np.stack([x[:, a:b].sum(1) for a, b in zip(bounds[:-1], bounds[1:])], axis=1)

    new_mass = _block_sum(vgroup(mass), horiz_factor, horiz_factor)
    f3 = {"airmass": new_mass}
    for name, arr in ds.fields3d.items():
        if name in EXTENSIVE_3D:
            continue
        num = _block_sum(vgroup(arr[tidx] * mass), horiz_factor, horiz_factor)
        f3[name] = num / new_mass
    area = cell_areas(g)
    new_area = _block_sum(area, horiz_factor, horiz_factor)
    ps = _block_sum(ds.p_surf[tidx] * area, horiz_factor, horiz_factor) / new_area
    fl = {}
    for name, arr in ds.fluxes.items():
        tmean = arr.reshape((-1, time_factor) + g.shape).mean(1)
        fl[name] = _block_sum(tmean * area, horiz_factor, horiz_factor) / new_area
    return Dataset(new_grid, hybrid, ds.time[tidx], ds.dt * time_factor, f3, ps, fl,
                   attrs=dict(ds.attrs))


@dataclass
class MassAudit:
    """Per-interval mass ledger residuals (kg) before and after correction."""

    pre: np.ndarray
    post: np.ndarray
    correction: np.ndarray      # uniform additive flux per interval, kg m-2 s-1
    mass: np.ndarray            # tracer mass at interval start, kg

    @property
    def max_relative_post(self):
        return float(np.max(np.abs(self.post) / self.mass)) if len(self.mass) else 0.0

    @property
    def max_relative_pre(self):
        return float(np.max(np.abs(self.pre) / self.mass)) if len(self.mass) else 0.0


def mass_ledger_residuals(ds):
    """``M(t+1) - M(t) - sum(F A dt)`` for every interval, in kg."""
    area = cell_areas(ds.grid)
    T = ds.n_times - 1
    if T < 1 or any(ds.fluxes[f].shape[0] != T for f in FLUX_FIELDS):
        raise InvalidStateError("missing state pair or flux record")
    mass = np.array([ds.tracer_mass(t) for t in range(ds.n_times)])
    flux_mass = np.array([np.sum(ds.flux_total(t) * area) * ds.dt for t in range(T)])
    return np.diff(mass) - flux_mass, mass


def correct_flux_mass(ds):
    """Close the tracer-mass ledger by a uniform additive anthropogenic flux fix.

    Returns a new dataset and a :class:`MassAudit`.
    """
    area = cell_areas(ds.grid)
    pre, mass = mass_ledger_residuals(ds)
    corr = pre / (area.sum() * ds.dt)
    anthro = ds.fluxes["flux_anthro"] + corr[:, None, None]
    fluxes = dict(ds.fluxes, flux_anthro=anthro)
    out = Dataset(ds.grid, ds.hybrid, ds.time, ds.dt, ds.fields3d, ds.p_surf, fluxes,
                  dict(ds.splits), dict(ds.attrs))
    post, _ = mass_ledger_residuals(out)
    return out, MassAudit(pre, post, corr, mass[:-1])


# -- splits and statistics ---------------------------------------------------

def split_dataset(n_times, boundaries, names=("train", "val", "test")):
    """Contiguous disjoint splits ``{name: (start, stop)}`` covering all steps."""
    b = [int(x) for x in boundaries]
    if len(b) != len(names) - 1:
        raise InvalidArgumentError(f"need {len(names) - 1} boundaries, got {len(b)}")
    edges = [0] + b + [int(n_times)]
    if any(e1 <= e0 for e0, e1 in zip(edges[:-1], edges[1:])):
        raise InvalidArgumentError(f"boundaries {b} out of range for {n_times} time steps")
    return {n: (edges[i], edges[i + 1]) for i, n in enumerate(names)}


def split_by_fraction(n_times, fractions=(0.7, 0.1)):
    b1 = int(round(n_times * fractions[0]))
    b2 = int(round(n_times * (fractions[0] + fractions[1])))
    return split_dataset(n_times, [b1, b2])


def mass_weighted_mean(co2, airmass):
    """Global air-mass-weighted mean over the last three axes."""
    return np.sum(co2 * airmass, axis=(-3, -2, -1)) / np.sum(airmass, axis=(-3, -2, -1))


@dataclass
class NormalizationStats:
    """Per-level means/stds of states and one-step deltas, training split only."""

    mean: dict
    std: dict
    delta_mean: dict
    delta_std: dict
    centered_mean: list
    centered_std: list
    split: tuple = (0, 0)

    def safe(self, values):
        arr = np.asarray(values, dtype=float)
        return np.where(arr > 0, arr, 1.0)

    def to_dict(self):
        def conv(d):
            return {k: [float(x) for x in v] for k, v in sorted(d.items())}

        return {"mean": conv(self.mean), "std": conv(self.std),
                "delta_mean": conv(self.delta_mean), "delta_std": conv(self.delta_std),
                "centered_mean": [float(x) for x in self.centered_mean],
                "centered_std": [float(x) for x in self.centered_std],
                "split": list(self.split)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"], d["delta_mean"], d["delta_std"],
                   d["centered_mean"], d["centered_std"], tuple(d.get("split", (0, 0))))

    def fingerprint(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _level_stats(x):
    # x: [T, lev, lat, lon] or [T, lat, lon]
    axes = (0, 2, 3) if x.ndim == 4 else (0, 1, 2)
    return np.atleast_1d(x.mean(axis=axes)), np.atleast_1d(x.std(axis=axes))


def flux_increment(flux_total, areas, airmass_surface, dt):
    """Lowest-layer mixing-ratio increment (ppm) from one interval of surface flux."""
    return flux_total * areas * dt / (PPM * airmass_surface)


def transport_deltas(ds, start=0, stop=None):
    """One-step co2 deltas with the surface-flux increment removed from level 0."""
    stop = ds.n_times if stop is None else stop
    co2 = ds.fields3d["co2"][start:stop]
    d = np.diff(co2, axis=0)
    area = cell_areas(ds.grid)
    for k in range(stop - start - 1):
        t = start + k
        d[k, 0] -= flux_increment(ds.flux_total(t), area, ds.fields3d["airmass"][t, 0], ds.dt)
    return d


def compute_stats(ds, split=None):
    """Statistics over ``split = (start, stop)`` (defaults to the train split)."""
    if split is None:
        split = ds.splits.get("train", (0, ds.n_times))
    start, stop = split
    if not 0 <= start < stop <= ds.n_times or stop - start < 2:
        raise InvalidArgumentError(f"split {split} out of range for {ds.n_times} steps")
    mean, std, dmean, dstd = {}, {}, {}, {}
    for name in VARS_3D:
        x = ds.fields3d[name][start:stop]
        mean[name], std[name] = _level_stats(x)
        dmean[name], dstd[name] = _level_stats(np.diff(x, axis=0))
    x = ds.p_surf[start:stop]
    mean["p_surf"], std["p_surf"] = _level_stats(x)
    dmean["p_surf"], dstd["p_surf"] = _level_stats(np.diff(x, axis=0))
    for name in FLUX_FIELDS:
        x = ds.fluxes[name][start:stop - 1]
        mean[name], std[name] = _level_stats(x)
        dmean[name], dstd[name] = _level_stats(np.diff(x, axis=0)) if len(x) > 1 else ([0.0], [0.0])
    co2 = ds.fields3d["co2"][start:stop]
    dmean["co2_transport"], dstd["co2_transport"] = _level_stats(transport_deltas(ds, start, stop))
    gmean = mass_weighted_mean(co2, ds.fields3d["airmass"][start:stop])
    cm, cs = _level_stats(co2 - gmean[:, None, None, None])
    return NormalizationStats(mean, std, dmean, dstd, list(cm), list(cs), (int(start), int(stop)))


def air_mass_consistent(ds, rtol=1e-10):
    """True if stored air mass matches ``A dp / g`` for every time step."""
    area = cell_areas(ds.grid)
    dp = ds.hybrid.thickness(ds.p_surf)       # [lev, T, lat, lon]
    expected = np.moveaxis(dp, 0, 1) * area * 100.0 / GRAVITY
    return bool(np.allclose(ds.fields3d["airmass"], expected, rtol=rtol, atol=0))


def preprocess(ds, boundaries=None, horiz_factor=1, vert_groups=None, time_factor=1,
               fractions=(0.7, 0.1)):
    """Run aggregation, flux correction, splitting and statistics in order.

    Returns ``(dataset, stats, audit)``. Regridding and unit conversion are
    separate calls because synthetic worlds are generated on the target grid
    in standard units.
    """
    if horiz_factor != 1 or vert_groups or time_factor != 1:
        ds = coarsen(ds, horiz_factor, vert_groups, time_factor)
    ds, audit = correct_flux_mass(ds)
    if boundaries is None:
        ds.splits = split_by_fraction(ds.n_times, fractions)
    else:
        ds.splits = split_dataset(ds.n_times, boundaries)
    stats = compute_stats(ds, ds.splits["train"])
    return ds, stats, audit


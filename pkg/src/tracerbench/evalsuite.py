"""Evaluation protocol: metrics, quarterly rollouts, mass diagnostics,
virtual stations, ablation sweeps and report files.

Report columns
--------------
``metrics_global.csv``    run, start, n_steps, rmse, r2, rel_mean, rel_var, rms_mass_error_pg,
                          decorrelation_days, decorrelation_censored, persistence_rmse
``metrics_per_level.csv`` run, step, level, rmse, r2
``mass_ledger.csv``       run, step, m_pred_pg, m_target_pg, m_flux_cum_pg, error_pg
``stations/<id>.csv``     time, pred, target
``ablation.csv``          arch, size, centflux, specloss, decorrelation_days, r2, rmse, error
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidArgumentError
from .sphere import KG_PER_PG, PPM

log = logging.getLogger(__name__)

GLOBAL_COLUMNS = ("run", "start", "n_steps", "rmse", "r2", "rel_mean", "rel_var", "rms_mass_error_pg",
                  "decorrelation_days", "decorrelation_censored", "persistence_rmse")
LEVEL_COLUMNS = ("run", "step", "level", "rmse", "r2")
MASS_COLUMNS = ("run", "step", "m_pred_pg", "m_target_pg", "m_flux_cum_pg", "error_pg")
ABLATION_COLUMNS = ("arch", "size", "centflux", "specloss", "decorrelation_days", "r2", "rmse", "error")
QUARTER_MONTHS = (1, 4, 7, 10)


# -- metrics -----------------------------------------------------------------

def _ratio(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(b != 0, a / np.where(b != 0, b, 1.0), np.nan)


def metric_arrays(pred, target, axes=None):
    """RMSE, R2, relative mean and relative variability reduced over ``axes``.

    Undefined entries (zero target variance or mean) are NaN.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"shape mismatch {pred.shape} vs {target.shape}")
    err = pred - target
    rmse = np.sqrt(np.mean(err ** 2, axis=axes))
    tmean = np.mean(target, axis=axes, keepdims=True)
    sse = np.sum(err ** 2, axis=axes)
    sst = np.sum((target - tmean) ** 2, axis=axes)
    r2 = 1.0 - _ratio(sse, sst)
    rel_mean = _ratio(np.mean(pred, axis=axes), np.mean(target, axis=axes))
    rel_var = _ratio(np.std(pred, axis=axes), np.std(target, axis=axes))
    return {"rmse": rmse, "r2": r2, "rel_mean": rel_mean, "rel_var": rel_var}


def _opt(x):
    x = float(x)
    return None if math.isnan(x) else x


@dataclass
class MetricRecord:
    run: str = ""
    axis: str = "global"
    rmse: float | None = None
    r2: float | None = None
    rel_mean: float | None = None
    rel_var: float | None = None
    rms_mass_error_pg: float | None = None
    decorrelation_days: float | None = None
    decorrelation_censored: bool = False

    def to_dict(self):
        return asdict(self)


def compute_metrics(pred, target, axes=None, run=""):
    """Scalar :class:`MetricRecord` over all elements (``axes=None``) or given axes.

    With partial ``axes`` the record holds arrays instead of scalars.
    """
    m = metric_arrays(pred, target, axes)
    if np.ndim(m["rmse"]) == 0:
        return MetricRecord(run=run, rmse=float(m["rmse"]), r2=_opt(m["r2"]),
                            rel_mean=_opt(m["rel_mean"]), rel_var=_opt(m["rel_var"]))
    return MetricRecord(run=run, axis=str(axes), **m)


@dataclass(frozen=True)
class Decorrelation:
    """Days with R2 above the threshold; ``censored`` means it never dropped."""

    days: int
    censored: bool = False

    def __str__(self):
        return f">{self.days}" if self.censored else str(self.days)


def daily_r2(pred, target, steps_per_day):
    """Global R2 per day, pooling every state of the day (states ``1..n``).

    ``pred``/``target`` are ``[n+1, ...]`` trajectories including the start.
    """
    pred = np.asarray(pred, dtype=float)[1:]
    target = np.asarray(target, dtype=float)[1:]
    n_days = len(pred) // steps_per_day
    out = np.empty(n_days)
    for d in range(n_days):
        sl = slice(d * steps_per_day, (d + 1) * steps_per_day)
        out[d] = metric_arrays(pred[sl], target[sl])["r2"]
    return out


def decorrelation_from_series(r2_daily, threshold=0.9):
    r2 = np.asarray(r2_daily, dtype=float)
    below = np.nonzero(~(r2 > threshold))[0]
    if below.size == 0:
        return Decorrelation(len(r2), censored=True)
    return Decorrelation(int(below[0]))


def decorrelation_time(pred, target, steps_per_day=4, threshold=0.9):
    """Days until the daily global R2 first falls to ``threshold`` or below."""
    r2 = daily_r2(pred, target, steps_per_day)
    if r2.size == 0:
        raise InvalidArgumentError("rollout shorter than one day")
    return decorrelation_from_series(r2, threshold)


def persistence(initial, n):
    """Persistence forecast: the initial state repeated ``n + 1`` times."""
    return np.repeat(np.asarray(initial, dtype=float)[None], n + 1, axis=0)


# -- mass diagnostics --------------------------------------------------------

@dataclass
class MassDiagnostics:
    pred: np.ndarray           # global tracer mass, Pg, [n+1]
    target: np.ndarray
    flux_cumulative: np.ndarray
    per_level: np.ndarray      # predicted minus target, Pg, [n+1, lev]

    @property
    def rms_error(self):
        return float(np.sqrt(np.mean((self.pred - self.target) ** 2)))

    @property
    def max_relative_flux_error(self):
        return float(np.max(np.abs(self.pred - self.flux_cumulative) / np.abs(self.flux_cumulative)))


def mass_diagnostics(pred, target, airmass, flux_mass):
    """Global and per-level tracer-mass ledgers in Pg.

    ``airmass`` is ``[n+1, lev, lat, lon]``; ``flux_mass`` holds the kg
    added in each of the ``n`` intervals. The flux-cumulative series starts
    from the target's initial mass.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    air = np.asarray(airmass, dtype=float)
    lev_p = np.sum(pred * PPM * air, axis=(-2, -1)) / KG_PER_PG
    lev_t = np.sum(target * PPM * air, axis=(-2, -1)) / KG_PER_PG
    mp, mt = lev_p.sum(-1), lev_t.sum(-1)
    cum = mt[0] + np.concatenate([[0.0], np.cumsum(np.asarray(flux_mass, dtype=float))]) / KG_PER_PG
    return MassDiagnostics(mp, mt, cum, lev_p - lev_t)


# -- stations ----------------------------------------------------------------

@dataclass(frozen=True)
class StationSpec:
    id: str
    lat: float
    lon: float
    height: float = 0.0
    window: float = 21600.0

    def __post_init__(self):
        if abs(self.lat) > 90:
            raise InvalidArgumentError(f"station {self.id}: latitude {self.lat} out of range")
        if self.height < 0:
            raise InvalidArgumentError(f"station {self.id}: negative height")
        if self.window <= 0:
            raise InvalidArgumentError(f"station {self.id}: window must be positive")


@dataclass
class StationSeries:
    station: StationSpec
    cell: tuple                 # (level, lat index, lon index)
    clamped: bool
    times: np.ndarray           # window start, seconds from the first sample
    values: np.ndarray


def nearest_cell(grid, lat, lon):
    """Grid cell closest by great-circle distance; ties go to the lower flat index."""
    phi = np.deg2rad(grid.lat)[:, None]
    lam = np.deg2rad(grid.lon)[None, :]
    p0, l0 = np.deg2rad(lat), np.deg2rad(lon)
    cosd = np.sin(phi) * np.sin(p0) + np.cos(phi) * np.cos(p0) * np.cos(lam - l0)
    dist = np.arccos(np.clip(cosd, -1.0, 1.0)).ravel()
    best = np.nonzero(dist <= dist.min() + 1e-12)[0][0]
    return divmod(int(best), grid.n_lon)


def nearest_level(z_column, height):
    """Level whose height is closest to ``height``; flags heights outside the column."""
    z = np.asarray(z_column, dtype=float)
    clamped = bool(height < z.min() or height > z.max())
    return int(np.argmin(np.abs(z - height))), clamped


def window_mean(times, values, window):
    """Mean of ``values`` over consecutive windows of ``window`` seconds."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    bins = np.floor((times - times[0]) / window + 1e-9).astype(int)
    starts, means = [], []
    for b in np.unique(bins):
        sel = bins == b
        starts.append(times[0] + b * window)
        means.append(values[sel].mean())
    return np.array(starts), np.array(means)


def station_extract(trajectory, z, grid, times, stations):
    """Window-averaged series at the cells nearest to each station.

    ``trajectory`` and ``z`` are ``[T, lev, lat, lon]`` (``z`` may also be
    ``[lev, lat, lon]``), ``times`` are seconds. Heights outside the column
    are clamped to the nearest level and flagged.
    """
    if not stations:
        raise InvalidArgumentError("station list is empty")
    traj = np.asarray(trajectory, dtype=float)
    z = np.asarray(z, dtype=float)
    zmean = z.mean(axis=0) if z.ndim == 4 else z
    out = {}
    for st in stations:
        j, i = nearest_cell(grid, st.lat, st.lon)
        k, clamped = nearest_level(zmean[:, j, i], st.height)
        if clamped:
            log.warning("station %s: height %.1f m outside the model column, clamped to level %d",
                        st.id, st.height, k)
        t, v = window_mean(times, traj[:, k, j, i], st.window)
        out[st.id] = StationSeries(st, (k, j, i), clamped, t, v)
    return out


def default_stations(grid):
    """A small fixed registry of virtual stations spread over the globe."""
    specs = [("spo", -89.0, 335.0, 2800.0), ("mlo", 19.5, 204.4, 3400.0), ("brw", 71.3, 203.4, 10.0),
             ("cgo", -40.7, 144.7, 90.0), ("tap", 36.7, 126.1, 20.0), ("lef", 45.9, 269.7, 400.0)]
    return [StationSpec(*s) for s in specs]


# -- quarterly evaluation ----------------------------------------------------

@dataclass
class RunResult:
    run: str
    start: int
    trajectory: np.ndarray
    target: np.ndarray
    record: MetricRecord
    per_level: list
    mass: MassDiagnostics
    persistence_rmse: float


@dataclass
class QuarterlyResult:
    runs: list
    mean: MetricRecord
    steps_per_day: int
    extra: dict = field(default_factory=dict)


def quarter_starts(times, split, run_steps):
    """State indices in ``split`` falling on 00:00 of Jan/Apr/Jul/Oct 1."""
    s0, s1 = split
    out = []
    for t in range(s0, s1 - run_steps):
        dt = np.datetime64(times[t], "s").astype(object)
        if dt.day == 1 and dt.month in QUARTER_MONTHS and dt.hour == 0 and dt.minute == 0 and dt.second == 0:
            out.append(t)
    return out


def stride_starts(split, run_steps, max_runs=None):
    """Back-to-back disjoint run windows from the start of ``split``."""
    s0, s1 = split
    out = list(range(s0, s1 - run_steps, run_steps))
    return out[:max_runs] if max_runs else out


def _run_metrics(name, start, traj, target, airmass, flux_mass, steps_per_day):
    rec = compute_metrics(traj[1:], target[1:], run=name)
    n, L = len(traj) - 1, traj.shape[1]
    per_level = []
    lev = metric_arrays(traj, target, axes=(2, 3))
    for s in range(1, n + 1):
        for k in range(L):
            per_level.append({"run": name, "step": s, "level": k,
                              "rmse": float(lev["rmse"][s, k]), "r2": _opt(lev["r2"][s, k])})
    mass = mass_diagnostics(traj, target, airmass, flux_mass)
    rec.rms_mass_error_pg = mass.rms_error
    if n >= steps_per_day:
        dec = decorrelation_time(traj, target, steps_per_day)
        rec.decorrelation_days, rec.decorrelation_censored = float(dec.days), dec.censored
    pers = metric_arrays(persistence(target[0], n)[1:], target[1:])["rmse"]
    return RunResult(name, start, traj, target, rec, per_level, mass, float(pers))


def quarterly_eval(stepper, dataset, forcing, split=None, run_days=90, mode="quarterly", max_runs=None):
    """Independent rollouts reset from the target at every run start.

    ``mode="quarterly"`` starts on calendar quarter boundaries, ``"stride"``
    tiles the split with back-to-back windows.
    """
    if split is None:
        split = dataset.splits.get("test", (0, dataset.n_times))
    steps_per_day = int(round(86400.0 / dataset.dt))
    run_steps = int(round(run_days * steps_per_day))
    if run_steps < 1:
        raise InvalidArgumentError("run length shorter than one step")
    if split[1] - split[0] - 1 < run_steps:
        raise InvalidArgumentError(
            f"split {split} holds {split[1] - split[0] - 1} intervals, fewer than one {run_steps}-step run")
    if mode == "quarterly":
        starts = quarter_starts(dataset.time, split, run_steps)
    elif mode == "stride":
        starts = stride_starts(split, run_steps)
    else:
        raise InvalidArgumentError(f"unknown run mode {mode!r}")
    if max_runs:
        starts = starts[:max_runs]
    if not starts:
        raise InvalidArgumentError("insufficient forcing: no complete run window in the split")
    co2 = dataset.fields3d["co2"]
    air = dataset.fields3d["airmass"]
    runs = []
    for r, s in enumerate(starts):
        traj, _ = stepper.rollout(co2[s], forcing, s, run_steps)
        target = co2[s:s + run_steps + 1]
        fm = forcing.flux_mass(np.arange(s, s + run_steps)).numpy()
        runs.append(_run_metrics(f"run{r}", s, traj, target, air[s:s + run_steps + 1], fm, steps_per_day))
    return QuarterlyResult(runs, average_records([x.record for x in runs]), steps_per_day)


def average_records(records):
    """Field-wise mean over records, ignoring missing values."""
    out = MetricRecord(run="mean")
    for name in ("rmse", "r2", "rel_mean", "rel_var", "rms_mass_error_pg", "decorrelation_days"):
        vals = [getattr(r, name) for r in records if getattr(r, name) is not None]
        setattr(out, name, float(np.mean(vals)) if vals else None)
    out.decorrelation_censored = bool(records) and all(r.decorrelation_censored for r in records)
    return out


def lead_metrics(result, lead):
    """Global RMSE/R2 at one lead (step) averaged over runs, plus persistence RMSE."""
    rmse, r2, pers = [], [], []
    for run in result.runs:
        m = metric_arrays(run.trajectory[lead], run.target[lead])
        rmse.append(float(m["rmse"]))
        r2.append(float(m["r2"]))
        pers.append(float(metric_arrays(run.target[0], run.target[lead])["rmse"]))
    return {"rmse": float(np.mean(rmse)), "r2": float(np.mean(r2)), "persistence_rmse": float(np.mean(pers))}


# -- ablation ----------------------------------------------------------------

def ablation_harness(combinations, run_row):
    """Evaluate every combination with ``run_row(combo) -> dict(decorrelation_days, r2, rmse)``.

    Failures are recorded in the ``error`` column and the sweep continues.
    """
    rows = []
    for combo in combinations:
        row = {"arch": combo["arch"], "size": combo.get("size", "S"),
               "centflux": bool(combo.get("centflux", True)), "specloss": bool(combo.get("specloss", True)),
               "decorrelation_days": None, "r2": None, "rmse": None, "error": ""}
        try:
            row.update({k: v for k, v in run_row(combo).items() if k in ABLATION_COLUMNS})
        except Exception as exc:  # noqa: BLE001 - one failing row must not abort the sweep
            log.exception("ablation row %s failed", combo)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


# -- report writers ----------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def _write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def write_reports(outdir, result, stations=None, ablation=None, extra_summary=None):
    """Write every report file for a :class:`QuarterlyResult` into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    glob_rows, mass_rows, level_rows = [], [], []
    for run in result.runs:
        rec = run.record
        glob_rows.append({"run": run.run, "start": run.start, "n_steps": len(run.trajectory) - 1,
                          "rmse": rec.rmse, "r2": rec.r2, "rel_mean": rec.rel_mean, "rel_var": rec.rel_var,
                          "rms_mass_error_pg": rec.rms_mass_error_pg,
                          "decorrelation_days": rec.decorrelation_days,
                          "decorrelation_censored": rec.decorrelation_censored,
                          "persistence_rmse": run.persistence_rmse})
        level_rows.extend(run.per_level)
        m = run.mass
        for s in range(len(m.pred)):
            mass_rows.append({"run": run.run, "step": s, "m_pred_pg": m.pred[s], "m_target_pg": m.target[s],
                              "m_flux_cum_pg": m.flux_cumulative[s], "error_pg": m.pred[s] - m.target[s]})
    mean = result.mean
    glob_rows.append({"run": "mean", "rmse": mean.rmse, "r2": mean.r2, "rel_mean": mean.rel_mean,
                      "rel_var": mean.rel_var, "rms_mass_error_pg": mean.rms_mass_error_pg,
                      "decorrelation_days": mean.decorrelation_days,
                      "decorrelation_censored": mean.decorrelation_censored,
                      "persistence_rmse": float(np.mean([r.persistence_rmse for r in result.runs]))})
    files = {
        "metrics_global": _write_csv(outdir / "metrics_global.csv", GLOBAL_COLUMNS, glob_rows),
        "metrics_per_level": _write_csv(outdir / "metrics_per_level.csv", LEVEL_COLUMNS, level_rows),
        "mass_ledger": _write_csv(outdir / "mass_ledger.csv", MASS_COLUMNS, mass_rows),
    }
    for sid, (pred, target) in (stations or {}).items():
        rows = [{"time": t, "pred": p, "target": q} for t, p, q in zip(pred.times, pred.values, target.values)]
        files[f"stations/{sid}"] = _write_csv(outdir / "stations" / f"{sid}.csv", ("time", "pred", "target"), rows)
    if ablation is not None:
        files["ablation"] = _write_csv(outdir / "ablation.csv", ABLATION_COLUMNS, ablation)
    summary = {"mean": mean.to_dict(), "n_runs": len(result.runs), "steps_per_day": result.steps_per_day,
               "runs": [r.record.to_dict() for r in result.runs], **(extra_summary or {})}
    path = outdir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    files["summary"] = path
    return files


def write_ablation(path, rows):
    return _write_csv(path, ABLATION_COLUMNS, rows)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)

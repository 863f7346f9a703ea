import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tracerbench.evalsuite import (
    ABLATION_COLUMNS, GLOBAL_COLUMNS, LEVEL_COLUMNS, MASS_COLUMNS, Decorrelation, StationSpec,
    ablation_harness, compute_metrics, daily_r2, decorrelation_from_series, decorrelation_time,
    default_stations, lead_metrics, mass_diagnostics, metric_arrays, nearest_cell, nearest_level,
    quarter_starts, quarterly_eval, station_extract, stride_starts, window_mean, write_reports,
)
from tracerbench.exceptions import InvalidArgumentError
from tracerbench.pipeline import Dataset
from tracerbench.sphere import KG_PER_PG, PPM, Grid, HybridLevels


def brute_metrics(p, t):
    p, t = list(map(float, np.ravel(p))), list(map(float, np.ravel(t)))
    n = len(p)
    mt = math.fsum(t) / n
    mp = math.fsum(p) / n
    sse = math.fsum((a - b) ** 2 for a, b in zip(p, t))
    sst = math.fsum((b - mt) ** 2 for b in t)
    sp = math.sqrt(math.fsum((a - mp) ** 2 for a in p) / n)
    stt = math.sqrt(sst / n)
    return math.sqrt(sse / n), 1 - sse / sst, mp / mt, sp / stt


def test_metric_examples():
    t = np.array([1.0, 2.0, 3.0])
    r = compute_metrics(t, t)
    assert (r.rmse, r.r2, r.rel_mean, r.rel_var) == (0.0, 1.0, 1.0, 1.0)
    assert compute_metrics(np.full(3, 2.0), t).r2 == 0.0
    r = compute_metrics(np.array([1.0, 2.0, 4.0]), t)
    assert r.rmse == pytest.approx(math.sqrt(1 / 3), abs=1e-15)
    assert r.r2 == pytest.approx(0.5, abs=1e-15)
    assert r.rel_mean == pytest.approx(7 / 6, abs=1e-15)


def test_degenerate_metrics_are_missing():
    r = compute_metrics(np.ones(4), np.full(4, 2.0))
    assert r.r2 is None and r.rel_var is None and r.rel_mean == 0.5
    r = compute_metrics(np.ones(2), np.array([-1.0, 1.0]))
    assert r.rel_mean is None and r.r2 is not None
    with pytest.raises(InvalidArgumentError):
        compute_metrics(np.ones(3), np.ones(4))


def test_metrics_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        shape = tuple(rng.integers(1, 8, size=rng.integers(1, 4))) + (3,)
        t = rng.normal(400, 5, shape)
        p = t + rng.normal(0, rng.uniform(0.01, 10), shape)
        r = compute_metrics(p, t)
        ref = brute_metrics(p, t)
        np.testing.assert_allclose([r.rmse, r.r2, r.rel_mean, r.rel_var], ref, rtol=1e-12, atol=1e-12)


def test_metrics_over_axes():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(4, 3, 5))
    p = t + rng.normal(size=t.shape)
    m = metric_arrays(p, t, axes=(1, 2))
    for i in range(4):
        np.testing.assert_allclose([m[k][i] for k in ("rmse", "r2", "rel_mean", "rel_var")],
                                   brute_metrics(p[i], t[i]), rtol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(10, 1, 50)
    p = rng.normal(10, 1, 50)
    r = compute_metrics(p, t)
    assert r.rmse >= 0 and r.r2 <= 1 and r.rel_mean > 0 and r.rel_var > 0


def test_decorrelation_examples():
    assert decorrelation_from_series([1, 0.95, 0.92, 0.85, 0.99]) == Decorrelation(3)
    assert decorrelation_from_series([0.5, 0.4]) == Decorrelation(0)
    d = decorrelation_from_series([0.99] * 5)
    assert d.censored and str(d) == ">5"
    assert decorrelation_from_series([0.95, 0.9]).days == 1


def test_perfect_forecast_is_censored():
    t = np.random.default_rng(0).normal(size=(4 * 6 + 1, 2, 3, 4))
    d = decorrelation_time(t, t, steps_per_day=4)
    assert d.censored and d.days == 6
    with pytest.raises(InvalidArgumentError):
        decorrelation_time(t[:3], t[:3], steps_per_day=4)


def test_daily_r2_pools_each_day():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(9, 2, 3))
    p = t + rng.normal(scale=0.3, size=t.shape)
    r2 = daily_r2(p, t, 4)
    assert r2[1] == pytest.approx(brute_metrics(p[5:9], t[5:9])[1], rel=1e-12)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
@settings(max_examples=30, deadline=None)
def test_decorrelation_monotone_under_improvement(seed, shrink):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(4 * 8 + 1, 2, 3))
    noise = rng.normal(size=t.shape) * np.linspace(0, 2, len(t))[:, None, None]
    worse = decorrelation_time(t + noise, t, 4)
    better = decorrelation_time(t + shrink * noise, t, 4)
    assert better.days >= worse.days


def _mass_inputs(n=3, L=2, H=3, W=4, seed=0):
    rng = np.random.default_rng(seed)
    air = rng.uniform(1e14, 2e14, (n + 1, L, H, W))
    mu = rng.normal(400, 1, (n + 1, L, H, W))
    return mu, air


def test_mass_diagnostics_identity_and_flux():
    mu, air = _mass_inputs()
    flux = np.array([1e12, -2e12, 3e12])
    md = mass_diagnostics(mu, mu, air, flux)
    assert md.rms_error == 0.0 and np.all(md.per_level == 0)
    np.testing.assert_array_equal(md.pred, md.target)
    assert md.flux_cumulative[0] == md.target[0]
    assert md.flux_cumulative[-1] - md.flux_cumulative[0] == pytest.approx(2e12 / KG_PER_PG, rel=1e-12)


def test_mass_diagnostics_single_perturbation():
    mu, air = _mass_inputs()
    pred = mu.copy()
    dmu = 0.001 * KG_PER_PG / (PPM * air[2, 1, 0, 0])
    pred[2, 1, 0, 0] += dmu
    md = mass_diagnostics(pred, mu, air, np.zeros(3))
    expect = np.zeros_like(md.per_level)
    expect[2, 1] = 0.001
    np.testing.assert_allclose(md.per_level, expect, atol=1e-9)
    assert md.rms_error == pytest.approx(0.001 / 2, rel=1e-6)


def test_station_at_cell_center():
    grid = Grid(8, 16)
    rng = np.random.default_rng(0)
    traj = rng.normal(size=(5, 3, 8, 16))
    z = np.broadcast_to(np.array([100.0, 1000.0, 5000.0])[:, None, None], (3, 8, 16))
    s = StationSpec("x", float(grid.lat[5]), float(grid.lon[7]), 1000.0, window=1.0)
    out = station_extract(traj, z, grid, np.arange(5.0), [s])["x"]
    assert out.cell == (1, 5, 7) and not out.clamped
    np.testing.assert_array_equal(out.values, traj[:, 1, 5, 7])


def test_window_mean_and_clamping():
    t, v = window_mean([0.0, 10800.0, 21600.0], [1.0, 3.0, 5.0], 21600.0)
    np.testing.assert_array_equal(t, [0.0, 21600.0])
    np.testing.assert_array_equal(v, [2.0, 5.0])
    assert nearest_level([100.0, 1000.0], 5e4) == (1, True)
    assert nearest_level([100.0, 1000.0], 400.0) == (0, False)


def test_equidistant_tie_goes_to_lower_index():
    grid = Grid(8, 16)
    mid = 0.5 * (grid.lon[3] + grid.lon[4])
    assert nearest_cell(grid, float(grid.lat[2]), float(mid)) == (2, 3)


def test_station_validation():
    with pytest.raises(InvalidArgumentError):
        StationSpec("a", 91.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        StationSpec("a", 0.0, 0.0, -1.0)
    with pytest.raises(InvalidArgumentError):
        station_extract(np.zeros((1, 1, 8, 16)), np.zeros((1, 8, 16)), Grid(8, 16), [0.0], [])


def test_station_self_consistency(small_world):
    ds, _, _ = small_world
    co2 = ds.fields3d["co2"]
    times = np.arange(len(co2)) * ds.dt
    specs = default_stations(ds.grid)
    a = station_extract(co2, ds.fields3d["z"], ds.grid, times, specs)
    b = station_extract(co2, ds.fields3d["z"], ds.grid, times, specs)
    for sid in a:
        assert compute_metrics(a[sid].values, b[sid].values).rmse == 0.0


def test_quarter_starts_for_a_year():
    times = np.arange(np.datetime64("2001-01-01T00:00:00"), np.datetime64("2002-01-01T06:00:00"),
                      np.timedelta64(6, "h"))
    starts = quarter_starts(times, (0, len(times)), 360)
    assert len(starts) == 4
    assert [str(times[s])[:10] for s in starts] == ["2001-01-01", "2001-04-01", "2001-07-01", "2001-10-01"]
    assert all(b - a >= 360 for a, b in zip(starts, starts[1:]))
    assert stride_starts((0, 100), 30) == [0, 30, 60]


class Replay:
    """Stepper stand-in that returns the reference trajectory."""

    def __init__(self, co2, noise=0.0):
        self.co2, self.noise = co2, noise

    def rollout(self, mu0, forcing, start, n):
        traj = self.co2[start:start + n + 1].copy()
        traj[1:] += self.noise * np.arange(1, n + 1)[:, None, None, None]
        return traj, None


class NoFlux:
    def flux_mass(self, idx):
        return torch.zeros(len(idx), dtype=torch.float64)


def _year_dataset(L=2, H=4, W=8, seed=0):
    times = np.arange(np.datetime64("2001-01-01T00:00:00"), np.datetime64("2002-01-01T06:00:00"),
                      np.timedelta64(6, "h"))
    rng = np.random.default_rng(seed)
    T = len(times)
    co2 = 400 + np.cumsum(rng.normal(0, 0.1, (T, L, H, W)), axis=0)
    air = np.full((T, L, H, W), 1e15)
    grid = Grid(H, W)
    return Dataset(grid, HybridLevels.sigma(L), times, 21600.0, {"co2": co2, "airmass": air},
                   np.full((T, H, W), 1e5), {}, splits={"test": (0, T)})


def test_quarterly_eval_reference_is_perfect():
    ds = _year_dataset()
    res = quarterly_eval(Replay(ds.fields3d["co2"]), ds, NoFlux())
    assert len(res.runs) == 4
    for run in res.runs:
        assert run.record.r2 == 1.0 and run.record.rmse == 0.0 and run.record.decorrelation_censored
        assert len(run.trajectory) == 361
        assert all(r["r2"] == 1.0 for r in run.per_level)
    assert [r.start for r in res.runs] == [0, 360, 724, 1092]
    assert res.mean.decorrelation_censored


def test_quarterly_average_is_mean_of_runs():
    ds = _year_dataset()
    res = quarterly_eval(Replay(ds.fields3d["co2"], noise=0.01), ds, NoFlux())
    assert res.mean.rmse == pytest.approx(np.mean([r.record.rmse for r in res.runs]), rel=1e-14)
    assert res.mean.r2 == pytest.approx(np.mean([r.record.r2 for r in res.runs]), rel=1e-14)
    lm = lead_metrics(res, 40)
    assert lm["rmse"] == pytest.approx(0.4, rel=1e-9)


def test_quarterly_eval_errors():
    ds = _year_dataset()
    with pytest.raises(InvalidArgumentError):
        quarterly_eval(Replay(ds.fields3d["co2"]), ds, NoFlux(), split=(0, 100))
    with pytest.raises(InvalidArgumentError):
        quarterly_eval(Replay(ds.fields3d["co2"]), ds, NoFlux(), mode="weekly")
    with pytest.raises(InvalidArgumentError):
        quarterly_eval(Replay(ds.fields3d["co2"]), ds, NoFlux(), split=(1, 400))
    res = quarterly_eval(Replay(ds.fields3d["co2"]), ds, NoFlux(), split=(1, 1461), run_days=10, mode="stride",
                         max_runs=2)
    assert [r.start for r in res.runs] == [1, 41]


def test_write_reports(tmp_path):
    ds = _year_dataset(H=8, W=16)
    res = quarterly_eval(Replay(ds.fields3d["co2"], noise=0.01), ds, NoFlux(), run_days=5, mode="stride",
                         max_runs=2)
    times = np.arange(21) * ds.dt
    run = res.runs[0]
    specs = default_stations(ds.grid)[:2]
    z = np.broadcast_to(np.array([100.0, 3000.0])[:, None, None], (2, 8, 16))
    stations = {s: (p, t) for (s, p), t in zip(station_extract(run.trajectory, z, ds.grid, times, specs).items(),
                                               station_extract(run.target, z, ds.grid, times, specs).values())}
    files = write_reports(tmp_path, res, stations, ablation=[], extra_summary={"tag": 1})
    for name, cols in (("metrics_global.csv", GLOBAL_COLUMNS), ("metrics_per_level.csv", LEVEL_COLUMNS),
                       ("mass_ledger.csv", MASS_COLUMNS), ("ablation.csv", ABLATION_COLUMNS)):
        assert (tmp_path / name).read_text().splitlines()[0] == ",".join(cols)
    lines = (tmp_path / "metrics_global.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 + 1 and lines[-1].startswith("mean,")
    assert len((tmp_path / "metrics_per_level.csv").read_text().splitlines()) == 1 + 2 * 20 * 2
    assert (tmp_path / "stations" / "spo.csv").exists() and "summary" in files
    again = write_reports(tmp_path / "b", res, stations)
    assert again["metrics_global"].read_bytes() == (tmp_path / "metrics_global.csv").read_bytes()


def test_ablation_harness_isolates_failures():
    combos = [{"arch": "unet", "size": "S", "centflux": True, "specloss": False},
              {"arch": "swin", "size": "tiny", "centflux": False, "specloss": True}]

    def run_row(c):
        if c["arch"] == "swin":
            raise RuntimeError("boom")
        return {"decorrelation_days": 3.0, "r2": 0.9, "rmse": 0.1, "ignored": 1}

    rows = ablation_harness(combos, run_row)
    assert len(rows) == 2 and set(rows[0]) == set(ABLATION_COLUMNS)
    assert rows[0]["r2"] == 0.9 and rows[0]["error"] == ""
    assert rows[1]["r2"] is None and "boom" in rows[1]["error"]
    assert rows == ablation_harness(combos, run_row)

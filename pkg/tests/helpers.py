"""Shared scenario builders for the test suite."""

import numpy as np
import torch
from numpy.polynomial import legendre as npleg

from tracerbench.harmonics import colatitudes, get_sht
from tracerbench.refsolver import SECONDS_PER_DAY, ReferenceSolver, Scenario, initial_co2
from tracerbench.sphere import Grid, HybridLevels

DT = 21600.0


def rotating_blob(n_lat=32, n_lon=64, lat=0.0, radius=25.0, steps=128, alpha=0.0):
    """One solid-body revolution of a Gaussian blob.

    With ``steps = 2 * n_lon`` the Courant number of an untilted rotation is
    exactly 0.5. Returns ``(solver, mu0, mu_final, wind)``.
    """
    grid, hybrid = Grid(n_lat, n_lon), HybridLevels.sigma(1)
    solver = ReferenceSolver(grid, hybrid)
    wind = {"scheme": "solid_body", "alpha": alpha, "period_days": steps * DT / SECONDS_PER_DAY}
    sc = Scenario(n_lat=n_lat, n_lon=n_lon, n_lev=1, initial={
        "kind": "blobs", "background": 0.0,
        "blobs": [{"lat": lat, "lon": 180.0, "amplitude": 1.0, "radius": radius}]})
    mu0 = initial_co2(sc, grid, 1)
    mu = mu0.copy()
    for k in range(steps):
        mu = solver.step(mu, None, wind, k * DT, DT)
    return solver, mu0, mu, wind


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def random_bandlimited(lmax, seed=0, n_lat=32, n_lon=64):
    rng = np.random.default_rng(seed)
    L = lmax + 1
    c = rng.normal(size=(L, L)) + 1j * rng.normal(size=(L, L))
    c[:, 0] = c[:, 0].real
    c[np.triu_indices(L, 1)] = 0
    c = torch.as_tensor(c)
    return get_sht(n_lat, n_lon, lmax).inverse(c), c


def fejer_weights(n_lat, n_lon):
    """Solid-angle weights exact for Legendre degree < n_lat (moment matching)."""
    x = np.cos(colatitudes(n_lat))
    V = npleg.legvander(x, n_lat - 1).T
    rhs = np.zeros(n_lat)
    rhs[0] = 2.0
    w = np.linalg.solve(V, rhs)
    return np.repeat(w[:, None], n_lon, 1) * 2 * np.pi / n_lon


ACCEPTANCE = []


def record(capsys, criterion, passed, detail):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    with capsys.disabled():
        print("\n" + line)
    return passed


def gauss_norm2(coeffs, lmax):
    """Squared L2 norm on the sphere of the real field with coefficients ``coeffs[l, m>=0]``.

    The field is synthesized with scipy's spherical harmonics on a Gauss-Legendre
    grid, which integrates its square exactly.
    """
    from scipy.special import sph_harm_y

    n_lat, n_lon = lmax + 2, 2 * lmax + 4
    x, w = np.polynomial.legendre.leggauss(n_lat)
    th = np.arccos(x)[:, None]
    ph = (2 * np.pi * np.arange(n_lon) / n_lon)[None, :]
    c = np.asarray(coeffs)
    f = np.zeros((n_lat, n_lon))
    for l in range(lmax + 1):
        f += (c[l, 0] * sph_harm_y(l, 0, th, ph)).real
        for m in range(1, l + 1):
            f += 2 * (c[l, m] * sph_harm_y(l, m, th, ph)).real
    return float((w[:, None] * f ** 2).sum() * 2 * np.pi / n_lon)

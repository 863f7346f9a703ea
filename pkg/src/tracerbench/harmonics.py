"""Spherical harmonic analysis and synthesis on the equiangular cell-centre grid.

Basis: orthonormal ``Y_l^m = Pbar_l^m(cos colat) exp(i m lon)`` with the
Condon-Shortley phase, so a real field satisfies
``c[l, -m] = (-1)^m conj(c[l, m])``.

Analysis runs a zonal FFT and then, for every ``m``, projects the latitude
profile onto ``Pbar_l^m`` with the pseudo-inverse of the Legendre Vandermonde
matrix. Band-limited fields therefore round-trip exactly without Gaussian
latitudes. Both directions are plain linear torch ops, so autograd supplies
the adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .exceptions import InvalidArgumentError


def legendre_table(lmax, x):
    """Orthonormal associated Legendre functions ``P[m, l, j]`` at points ``x``.

    Entries with ``l < m`` are zero. Uses the standard three-term recurrence
    seeded from the sectoral terms, stable up to a few hundred degrees.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros((lmax + 1, lmax + 1, x.size))
    pmm = np.full_like(x, 1.0 / np.sqrt(4.0 * np.pi))
    for m in range(lmax + 1):
        if m > 0:
            pmm = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
        out[m, m] = pmm
        if m + 1 <= lmax:
            out[m, m + 1] = np.sqrt(2.0 * m + 3.0) * x * pmm
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            out[m, l] = a * (x * out[m, l - 1] - b * out[m, l - 2])
    return out


def colatitudes(n_lat):
    """Cell-centre colatitudes (radians), ordered south to north like the grid."""
    lat = np.deg2rad(np.linspace(-90.0, 90.0, n_lat + 1))
    return np.pi / 2 - 0.5 * (lat[:-1] + lat[1:])


def longitudes(n_lon):
    return (np.arange(n_lon) + 0.5) * 2.0 * np.pi / n_lon


class SHT:
    """Precomputed transform tables for one ``(n_lat, n_lon, lmax)`` triple.

    Instances are immutable and shared through :func:`get_sht`.
    """

    @staticmethod
    def _check_lmax(n_lat, n_lon, lmax):
        if lmax < 0:
            raise InvalidArgumentError("lmax must be non-negative")
        if lmax > n_lat - 1:
            raise InvalidArgumentError(f"lmax={lmax} exceeds n_lat-1={n_lat - 1}")
        if 2 * lmax >= n_lon:
            raise InvalidArgumentError(f"lmax={lmax} aliases on {n_lon} longitudes")

    def __init__(self, n_lat, n_lon, lmax):
        self._check_lmax(n_lat, n_lon, lmax)
        self.n_lat, self.n_lon, self.lmax = n_lat, n_lon, lmax
        L = lmax + 1
        theta = colatitudes(n_lat)
        P = legendre_table(lmax, np.cos(theta))
        pinv = np.zeros((L, L, n_lat))
        for m in range(L):
            pinv[m, m:] = np.linalg.pinv(P[m, m:].T)
        self.legendre = P          # [m, l, j]
        self.pinv = pinv           # [m, l, j]
        lam = np.arange(L) * np.pi / n_lon
        self._phase = np.exp(-1j * lam)      # half-cell longitude offset
        self._cache = {}

    def _tables(self, dtype, device):
        key = (dtype, device)
        if key not in self._cache:
            cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
            self._cache[key] = (
                torch.as_tensor(self.pinv, dtype=cdtype, device=device),
                torch.as_tensor(self.legendre, dtype=cdtype, device=device),
                torch.as_tensor(self._phase, dtype=cdtype, device=device),
            )
        return self._cache[key]

    def _check_grid(self, x):
        if tuple(x.shape[-2:]) != (self.n_lat, self.n_lon):
            raise InvalidArgumentError(
                f"field shape {tuple(x.shape[-2:])} does not match grid {(self.n_lat, self.n_lon)}")

    def forward(self, field):
        """Real field ``[..., lat, lon]`` -> coefficients ``[..., l, m>=0]``."""
        self._check_grid(field)
        if field.is_complex():
            raise InvalidArgumentError("use forward_complex for complex fields")
        pinv, _, phase = self._tables(field.dtype, field.device)
        F = torch.fft.rfft(field, dim=-1)[..., : self.lmax + 1] / self.n_lon
        g = F * phase
        return torch.einsum("mlj,...jm->...lm", pinv, g)

    def inverse(self, coeffs):
        """Coefficients ``[..., l, m>=0]`` -> real field ``[..., lat, lon]``."""
        L = self.lmax + 1
        if tuple(coeffs.shape[-2:]) != (L, L):
            raise InvalidArgumentError(f"coefficient shape {tuple(coeffs.shape[-2:])} != {(L, L)}")
        rdtype = torch.float64 if coeffs.dtype == torch.complex128 else torch.float32
        _, leg, phase = self._tables(rdtype, coeffs.device)
        g = torch.einsum("mlj,...lm->...jm", leg, coeffs)
        F = g * phase.conj() * self.n_lon
        pad = self.n_lon // 2 + 1 - L
        F = torch.nn.functional.pad(F, (0, pad))
        return torch.fft.irfft(F, n=self.n_lon, dim=-1)

    def forward_complex(self, field):
        """Complex field -> coefficients ``[..., l, m + lmax]`` for ``|m| <= lmax``."""
        self._check_grid(field)
        field = field if field.is_complex() else field.to(
            torch.complex128 if field.dtype == torch.float64 else torch.complex64)
        rdtype = torch.float64 if field.dtype == torch.complex128 else torch.float32
        pinv, _, phase = self._tables(rdtype, field.device)
        L = self.lmax + 1
        F = torch.fft.fft(field, dim=-1) / self.n_lon
        pos = F[..., :L] * phase
        neg = F[..., self.n_lon - L + 1:] * phase[1:].flip(0).conj()  # m = -lmax..-1
        cpos = torch.einsum("mlj,...jm->...lm", pinv, pos)
        sign = torch.tensor([(-1.0) ** m for m in range(L - 1, 0, -1)], dtype=rdtype)
        cneg = torch.einsum("mlj,...jm->...lm", pinv[1:].flip(0), neg) * sign
        return torch.cat([cneg, cpos], dim=-1)

    def inverse_complex(self, coeffs):
        L = self.lmax + 1
        rdtype = torch.float64 if coeffs.dtype == torch.complex128 else torch.float32
        _, leg, phase = self._tables(rdtype, coeffs.device)
        sign = torch.tensor([(-1.0) ** m for m in range(L - 1, 0, -1)], dtype=rdtype)
        gpos = torch.einsum("mlj,...lm->...jm", leg, coeffs[..., L - 1:]) * phase.conj()
        gneg = torch.einsum("mlj,...lm->...jm", leg[1:].flip(0), coeffs[..., : L - 1] * sign)
        gneg = gneg * phase[1:].flip(0)
        F = torch.zeros(coeffs.shape[:-2] + (self.n_lat, self.n_lon), dtype=coeffs.dtype)
        F[..., :L] = gpos
        F[..., self.n_lon - L + 1:] = gneg
        return torch.fft.ifft(F, dim=-1) * self.n_lon


@lru_cache(maxsize=32)
def get_sht(n_lat, n_lon, lmax):
    return SHT(n_lat, n_lon, lmax)


@dataclass
class SphCoeffs:
    """Spherical harmonic coefficients.

    For ``real=True`` the last axis holds ``m = 0..lmax`` and negative orders
    follow from conjugate symmetry; otherwise it holds ``m = -lmax..lmax``.
    """

    data: torch.Tensor
    lmax: int
    grid_shape: tuple
    real: bool = True

    def coeff(self, l, m):
        if abs(m) > l or l > self.lmax:
            raise InvalidArgumentError(f"no coefficient ({l}, {m})")
        if not self.real:
            return self.data[..., l, m + self.lmax]
        if m >= 0:
            return self.data[..., l, m]
        return (-1) ** m * self.data[..., l, -m].conj()

    @property
    def count(self):
        return (self.lmax + 1) ** 2


def _as_tensor(field):
    if isinstance(field, torch.Tensor):
        return field
    arr = np.asarray(field)
    return torch.as_tensor(arr if np.iscomplexobj(arr) else arr.astype(np.float64))


def sht_forward(field, lmax=None):
    """Analyse a field ``[..., lat, lon]`` (numpy or torch, real or complex)."""
    x = _as_tensor(field)
    n_lat, n_lon = x.shape[-2:]
    if lmax is None:
        lmax = min(n_lat - 2, n_lon // 2 - 1)
    sht = get_sht(n_lat, n_lon, lmax)
    if x.is_complex():
        return SphCoeffs(sht.forward_complex(x), lmax, (n_lat, n_lon), real=False)
    return SphCoeffs(sht.forward(x), lmax, (n_lat, n_lon), real=True)


def sht_inverse(coeffs, grid_shape=None):
    if grid_shape is not None and tuple(grid_shape) != tuple(coeffs.grid_shape):
        raise InvalidArgumentError(f"coefficients belong to grid {coeffs.grid_shape}, not {grid_shape}")
    sht = get_sht(*coeffs.grid_shape, coeffs.lmax)
    if coeffs.real:
        return sht.inverse(coeffs.data)
    return sht.inverse_complex(coeffs.data)


def power_spectrum(coeffs):
    """``S(l) = sum_m |c[l, m]|^2`` over all orders, shape ``[..., lmax+1]``."""
    p = coeffs.data.real ** 2 + coeffs.data.imag ** 2
    if coeffs.real:
        return 2.0 * p.sum(-1) - p[..., 0]
    return p.sum(-1)

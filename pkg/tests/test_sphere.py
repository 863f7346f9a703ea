import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracerbench.exceptions import InvalidArgumentError, InvalidStateError
from tracerbench.sphere import (
    EARTH_RADIUS, GRAVITY, AtmosState, FluxField, Grid, HybridLevels, air_mass, cell_areas,
    mixing_ratio, tracer_mass,
)

SURFACE = 4 * np.pi * EARTH_RADIUS ** 2


@pytest.mark.parametrize("shape", [(32, 64), (7, 5), (1, 1), (90, 180)])
def test_areas_partition_sphere(shape):
    g = Grid(*shape)
    assert abs(cell_areas(g).sum() / SURFACE - 1) < 1e-12


def test_total_area_closed_form():
    assert cell_areas(Grid(32, 64)).sum() == pytest.approx(5.1006e14, rel=1e-4)


def test_area_structure():
    g = Grid(32, 64)
    a = g.areas
    assert a[16, 0] > a[0, 0] and a[15, 0] > a[31, 0] * 5
    assert np.all(a == a[:, :1])
    assert np.all(np.diff(g.lat_edges) > 0)
    assert g.n_lon * g.dlon == 360.0


def test_grid_roundtrip_and_errors():
    g = Grid(4, 8, radius=2.0)
    assert Grid.from_dict(g.to_dict()) == g
    with pytest.raises(InvalidArgumentError):
        Grid(0, 4)
    with pytest.raises(InvalidArgumentError):
        Grid(4, 4, radius=-1)


def test_column_mass_closed_form():
    g = Grid(32, 64)
    m = air_mass(np.full(g.shape, 1013.25), HybridLevels.sigma(5), g.areas)
    assert m.sum() == pytest.approx(SURFACE * 101325 / GRAVITY, rel=1e-12)
    assert m.sum() == pytest.approx(5.27e18, rel=1e-3)


def test_zero_thickness_level_has_zero_mass():
    h = HybridLevels((0, 0, 0, 0), (1.0, 0.5, 0.5, 0.0))
    m = air_mass(np.full((2, 3), 1000.0), h, np.ones((2, 3)))
    assert np.all(m[1] == 0) and np.all(m[0] > 0)


def test_air_mass_linear_in_area():
    h = HybridLevels.sigma(3)
    ps = np.random.default_rng(0).uniform(900, 1050, (4, 8))
    a = Grid(4, 8).areas
    np.testing.assert_allclose(air_mass(ps, h, 2 * a), 2 * air_mass(ps, h, a), rtol=1e-15)


def test_air_mass_errors():
    h = HybridLevels((0.0, 500.0, 0.0), (1.0, 0.0, 0.0))
    with pytest.raises(InvalidStateError):
        air_mass(np.full((2, 2), 100.0), h, np.ones((2, 2)))
    with pytest.raises(InvalidArgumentError):
        air_mass(np.zeros((2, 2)), HybridLevels.sigma(2), np.ones((2, 2)))
    with pytest.raises(InvalidArgumentError):
        HybridLevels((0, 0), (0.5, 0.0))


@given(st.integers(1, 6), st.floats(0.05, 0.95))
@settings(max_examples=30, deadline=None)
def test_layer_split_preserves_mass(n_lev, frac):
    h = HybridLevels.sigma(n_lev)
    k = n_lev // 2
    b = list(h.b)
    b.insert(k + 1, b[k] + frac * (b[k + 1] - b[k]))
    fine = HybridLevels(tuple([0.0] * len(b)), tuple(b))
    ps = np.full((3, 4), 987.0)
    coarse = air_mass(ps, h, Grid(3, 4).areas)
    split = air_mass(ps, fine, Grid(3, 4).areas)
    np.testing.assert_allclose(split[k] + split[k + 1], coarse[k], rtol=1e-13)
    np.testing.assert_allclose(split.sum(0), coarse.sum(0), rtol=1e-13)


def test_merge_levels():
    h = HybridLevels.sigma(4)
    m = h.merge([1, 3])
    assert m.n_lev == 2 and m.b == (1.0, 0.75, 0.0)
    with pytest.raises(InvalidArgumentError):
        h.merge([2, 1])
    assert HybridLevels.from_dict(h.to_dict()) == h


def test_tracer_mass_cases():
    air = air_mass(np.full((4, 8), 1000.0), HybridLevels.sigma(2), Grid(4, 8).areas)
    assert tracer_mass(np.zeros_like(air), air)[1] == 0.0
    _, total, pg = tracer_mass(np.full_like(air, 400.0), air)
    assert total == pytest.approx(400e-6 * air.sum(), rel=1e-14)
    assert pg == total / 1e12
    mu = np.random.default_rng(2).uniform(350, 450, air.shape)
    cell, _, _ = tracer_mass(mu, air)
    np.testing.assert_allclose(mixing_ratio(cell, air), mu, rtol=1e-12)
    with pytest.raises(InvalidArgumentError):
        tracer_mass(mu[:1], air)


@given(st.floats(-1e3, 1e3), st.floats(0.1, 10))
@settings(max_examples=30, deadline=None)
def test_tracer_mass_linearity(a, s):
    rng = np.random.default_rng(5)
    mu, nu = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    air = rng.uniform(1, 2, (2, 3, 4))
    lhs = tracer_mass(a * mu + nu, air)[1]
    assert lhs == pytest.approx(a * tracer_mass(mu, air)[1] + tracer_mass(nu, air)[1], abs=1e-9)
    assert tracer_mass(mu, s * air)[1] == pytest.approx(s * tracer_mass(mu, air)[1], abs=1e-12)


def test_zonal_symmetry_of_masses():
    g = Grid(6, 12)
    m = air_mass(np.full(g.shape, 1000.0), HybridLevels.sigma(3), g.areas)
    assert np.all(m == m[..., :1])


def test_atmos_state_validation():
    g = Grid(4, 8)
    h = HybridLevels.sigma(2)
    ps = np.full(g.shape, 1000.0)
    air = air_mass(ps, h, g.areas)
    s = AtmosState(np.datetime64("2000-01-01"), np.full(air.shape, 400.0), air, ps)
    assert s.validate(h, g.areas) is s
    with pytest.raises(InvalidStateError):
        AtmosState(s.time, s.co2, air * 1.001, ps).validate(h, g.areas)
    bad = s.co2.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(InvalidStateError):
        AtmosState(s.time, bad, air, ps).validate()
    with pytest.raises(InvalidStateError):
        AtmosState(s.time, s.co2, -air, ps).validate()


def test_flux_field_mass():
    g = Grid(4, 8)
    f = FluxField(np.datetime64("2000-01-01"), 3600.0, np.full(g.shape, 1e-9), np.zeros(g.shape),
                  np.full(g.shape, 1e-9))
    assert f.mass(g.areas) == pytest.approx(2e-9 * SURFACE * 3600.0, rel=1e-12)

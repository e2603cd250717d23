import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from geobeam import fields as fl
from geobeam import geometry as geo
from geobeam import raytransform as rt
from geobeam.errors import SamplingError, ShapeError
from geobeam.experiments import ray_roundtrip
from geobeam.expressions import Expression, compile_form


@pytest.fixture(scope="module")
def fan(disk):
    return geo.boundary_fan(disk, 12, 9)


def ones(x):
    return np.ones(x.shape[:-1])


def bump(x):
    return np.exp(-4 * np.sum(x * x, axis=-1))


def test_constant_gives_chord_length(fan):
    m = rt.forward(ones, None, fan)
    lengths = np.array([p.length for p in fan])
    assert np.max(np.abs(m.values - lengths)) < 1e-10


def test_exact_form_vanishing_on_boundary_is_invisible(fan):
    # alpha = dp with p = (1 - |x|^2) x1
    def dp(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([1 - 3 * x1**2 - x2**2, -2 * x1 * x2])

    m = rt.forward(None, dp, fan)
    assert np.max(np.abs(m.values)) < 1e-8


def test_bump_along_diameter_matches_quad(diameter):
    ref = quad(lambda t: np.exp(-4 * (t - 1.0) ** 2), 0.0, 2.0, epsabs=1e-13)[0]
    m = rt.forward(bump, None, [diameter], step=0.002)
    assert abs(m.values[0] - ref) < 1e-8


def test_attenuation_along_diameter_matches_quad(diameter):
    lam = 0.7
    ref = quad(lambda t: np.exp(-4 * (t - 1.0) ** 2 - lam * t), 0.0, 2.0, epsabs=1e-13)[0]
    m = rt.forward(bump, None, [diameter], lam=lam, step=0.002)
    assert abs(m.values[0] - ref) < 1e-8


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.01, 1.0))
def test_attenuation_decreases_positive_data(lam, extra):
    fan = [geo.integrate_geodesic(geo.euclidean_disk(), np.array([-1.0, 0.0]), np.array([np.cos(0.3), np.sin(0.3)]))]
    a = rt.forward(bump, None, fan, lam=lam).values[0].real
    b = rt.forward(bump, None, fan, lam=lam + extra).values[0].real
    assert b < a


def test_sampled_field_matches_callable(fan):
    grid = fl.Grid.uniform([-1.05, -1.05], [1.05, 1.05], [211, 211])
    f = fl.SampledField(fl.GridMetric(grid), bump(grid.points()))
    a = rt.forward(f, None, fan).values
    b = rt.forward(bump, None, fan).values
    assert np.max(np.abs(a - b)) < 1e-3


def test_sampled_grid_too_small_raises(fan):
    grid = fl.Grid.uniform([-0.5, -0.5], [0.5, 0.5], [11, 11])
    f = fl.SampledField(fl.GridMetric(grid), np.zeros((11, 11)))
    with pytest.raises(SamplingError):
        rt.forward(f, None, fan)


def test_measurement_shape_checked(fan):
    with pytest.raises(ShapeError):
        rt.RayMeasurement(fan, np.zeros(len(fan) + 1), 0.0, 0.005)


def test_zero_data_inverts_to_zero(disk, fan):
    meas = rt.RayMeasurement(fan, np.zeros(len(fan)), 0.0, 0.005)
    grid = fl.Grid.uniform([-1, -1], [1, 1], [41, 41])
    inv = rt.invert(meas, disk, grid, n_basis=6)
    assert np.max(np.abs(inv.f.values)) < 1e-12
    assert np.max(np.abs(inv.curl)) < 1e-12


F_EXPR = Expression("exp(-2*((x1-0.2)^2+x2^2)) + 0.5*x1*x2")
A_EXPR = compile_form(["-x2*(1+0.5*x1)", "x1+0.3*x2^2"])


def zero_form(x):
    return np.zeros((2,) + x.shape[:-1])


def test_roundtrip_function_only(disk):
    r = ray_roundtrip(disk, F_EXPR, zero_form, 0.0, n_points=16, n_dirs=16, n_grid=61, n_basis=10)
    assert r["f_error"] < 0.05


def test_roundtrip_form_only(disk):
    zero = Expression("0")
    r = ray_roundtrip(disk, zero, A_EXPR, 0.0, n_points=16, n_dirs=16, n_grid=61, n_basis=10)
    assert r["dalpha_error"] < 0.05


def test_gauge_project_examples():
    grid = fl.Grid.uniform([-1, -1], [1, 1], [61, 61])
    geom = fl.GridMetric(grid)
    X, Y = grid.mesh()
    # dp with p = cos(pi x1 / 2) cos(pi x2 / 2), zero on the box edge, projects to zero
    p_y = -np.pi * np.cos(np.pi * X / 2) * np.sin(np.pi * Y / 2) / 2
    p_x = -np.pi / 2 * np.sin(np.pi * X / 2) * np.cos(np.pi * Y / 2)
    curl, sol = rt.gauge_project(fl.SampledOneForm(geom, np.stack([p_x, p_y])))
    assert np.max(np.abs(curl[3:-3, 3:-3])) < 1e-4
    assert np.max(np.abs(sol[:, 3:-3, 3:-3])) < 1e-3
    # x2 dx1 has d alpha = -dx1 ^ dx2
    curl, sol = rt.gauge_project(fl.SampledOneForm(geom, np.stack([Y, 0 * X])))
    assert np.max(np.abs(curl + 1)) < 1e-10
    _, sol2 = rt.gauge_project(fl.SampledOneForm(geom, sol))
    assert np.max(np.abs(sol2 - sol)) < 1e-8


def test_sinogram_csv(tmp_path, fan):
    m = rt.forward(ones, None, fan[:5])
    path = tmp_path / "s.csv"
    rt.write_sinogram(m, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["x", "y", "vx", "vy", "exit_time", "value_re", "value_im"]
    assert len(rows) == 6
    assert abs(float(rows[1][5]) - fan[0].length) < 1e-9

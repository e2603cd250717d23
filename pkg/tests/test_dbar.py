import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geobeam import dbar
from geobeam.errors import MarginError
from geobeam.fields import Grid


def plane(n, L=6.0):
    return Grid.uniform([-L, -L], [L, L], [n, n])


def gaussian(grid, c=(0.0, 0.0), s=1.0):
    X, Y = grid.mesh()
    return np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / s**2)


def radial_oracle(grid, which):
    # Cauchy transform of exp(-|z|^2): (1 - exp(-|z|^2)) / z, conjugated for d
    X, Y = grid.mesh()
    z = X + 1j * Y
    r2 = X**2 + Y**2
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(r2 > 0, -np.expm1(-r2) / np.where(r2 > 0, z, 1), 0)
    return u if which == "dbar" else np.conj(u)


def test_zero_data():
    g = dbar.PlaneField(plane(32), np.zeros((32, 32)))
    assert np.all(dbar.cauchy_solve(g).values == 0)


@pytest.mark.parametrize("which", ["dbar", "d"])
def test_gaussian_against_closed_form(which):
    grid = plane(129)
    u = dbar.cauchy_solve(dbar.PlaneField(grid, gaussian(grid)), which)
    ref = radial_oracle(grid, which)
    assert np.max(np.abs(u.values - ref)) < 1e-4


def test_gaussian_residual_at_256():
    grid = plane(256)
    g = dbar.PlaneField(grid, gaussian(grid, (0.3, -0.2)) * (1 + 0.5j))
    u = dbar.cauchy_solve(g)
    assert dbar.relative_residual(u, g) < 1e-3


def test_residual_decreases_under_refinement():
    res = []
    for n in (64, 128, 256):
        grid = plane(n)
        g = dbar.PlaneField(grid, gaussian(grid, s=0.8))
        res.append(dbar.relative_residual(dbar.cauchy_solve(g, order=2), g))
    orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(orders >= 1.0)


def test_fft_matches_direct_sum():
    grid = plane(41, 4.0)
    g = dbar.PlaneField(grid, gaussian(grid, (0.2, 0.1), 0.5) * np.exp(1j * grid.mesh()[0]))
    fast = dbar.cauchy_solve(g).values
    slow = dbar.cauchy_solve_direct(g).values
    assert np.max(np.abs(fast - slow)) < 1e-12


def test_margin_error():
    grid = plane(32)
    with pytest.raises(MarginError):
        dbar.cauchy_solve(dbar.PlaneField(grid, np.ones((32, 32))))


@settings(max_examples=10, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.complex_numbers(max_magnitude=3), st.complex_numbers(max_magnitude=3))
def test_linearity(cx, cy, a, b):
    grid = plane(48)
    g1 = gaussian(grid, (cx, cy), 0.9)
    g2 = gaussian(grid, (-cy, cx), 0.6) * grid.mesh()[0]
    u1 = dbar.cauchy_solve(dbar.PlaneField(grid, g1)).values
    u2 = dbar.cauchy_solve(dbar.PlaneField(grid, g2)).values
    u = dbar.cauchy_solve(dbar.PlaneField(grid, a * g1 + b * g2)).values
    assert np.max(np.abs(u - a * u1 - b * u2)) <= 1e-12 * (1 + abs(a) + abs(b)) * 10


def test_sup_bound_stable_across_inputs():
    # |u|_inf <= C |g|_inf diam(supp g) with one C for bumps of several sizes
    grid = plane(201, 8.0)
    ratios = []
    for s in (0.4, 0.8, 1.2):
        g = gaussian(grid, s=s)
        u = dbar.cauchy_solve(dbar.PlaneField(grid, g)).values
        ratios.append(np.max(np.abs(u)) / (np.max(g) * 6 * s))
    assert max(ratios) / min(ratios) < 1.01

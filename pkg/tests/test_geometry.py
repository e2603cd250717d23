import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geobeam import geometry as geo
from geobeam.errors import ConfigurationError, DomainError, FrameError, UnsupportedGeometryError


def round_sphere():
    return geo.round_sphere_polar()


def test_christoffel_flat_is_zero(disk):
    pts = np.array([[0.1, 0.2], [-0.5, 0.3]])
    assert np.all(geo.christoffel(disk, pts) == 0.0)


def test_christoffel_polar_metric():
    ch = geo.polar_plane(r_range=(0.5, 3.0))
    G = geo.christoffel(ch, np.array([2.0, 0.1]))
    assert G[0, 1, 1] == pytest.approx(-2.0, abs=1e-8)
    assert G[1, 0, 1] == pytest.approx(0.5, abs=1e-8)
    assert G[1, 1, 0] == pytest.approx(0.5, abs=1e-8)


def test_christoffel_round_sphere():
    G = geo.christoffel(round_sphere(), np.array([np.pi / 4, 0.3]))
    assert G[0, 1, 1] == pytest.approx(-0.5, abs=1e-8)


def test_christoffel_outside_domain(disk):
    with pytest.raises(DomainError):
        geo.christoffel(disk, np.array([2.0, 0.0]))


def test_diameter_exit(disk):
    p = geo.integrate_geodesic(disk, np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    assert p.classification == geo.NON_TANGENTIAL
    assert p.exit_time == pytest.approx(2.0, abs=1e-9)
    assert np.allclose(p.exit_point, [-1.0, 0.0], atol=1e-9)


def test_chord_at_sixty_degrees(disk):
    a = np.pi / 3
    v = np.array([-np.cos(a), np.sin(a)])
    p = geo.integrate_geodesic(disk, np.array([1.0, 0.0]), v)
    assert p.exit_time == pytest.approx(2 * np.cos(a), abs=1e-9)


def test_cap_geodesic_is_great_circle():
    cap = geo.spherical_cap(0.5)
    R = geo.cap_radius(0.5)
    x0 = np.array([R, 0.0])
    v = -x0 / R
    g = cap.metric(x0)
    v = v / np.sqrt(v @ g @ v)
    p = geo.integrate_geodesic(cap, x0, v)
    # a radial chord through the pole stays on the plane x2 = 0 of the sphere
    X = geo.stereo_to_sphere(p.x)
    assert np.max(np.abs(X[:, 1])) < 1e-6
    # and on the unit sphere with arclength matching the great-circle angle
    ang = np.arccos(np.clip(X[0] @ X[-1], -1, 1))
    assert p.length == pytest.approx(ang, abs=1e-6)


def test_cap_off_center_great_circle():
    cap = geo.spherical_cap(0.5)
    R = geo.cap_radius(0.5)
    x0 = R * np.array([np.cos(0.3), np.sin(0.3)])
    n = geo.inward_normal(cap, x0)
    e1, e2 = geo.orthonormal_frame(cap, x0, n)
    v = np.cos(0.7) * e1 + np.sin(0.7) * e2
    p = geo.integrate_geodesic(cap, x0, v)
    X = geo.stereo_to_sphere(p.x)
    # great circle: all points lie on the plane through the origin spanned by the first two
    normal = np.cross(X[0], X[len(X) // 2])
    normal /= np.linalg.norm(normal)
    assert np.max(np.abs(X @ normal)) < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-1.4, 1.4))
def test_unit_speed_preserved(phi, ang):
    cap = geo.spherical_cap(0.5)
    R = geo.cap_radius(0.5)
    x0 = R * np.array([np.cos(phi), np.sin(phi)])
    e1, e2 = geo.orthonormal_frame(cap, x0, geo.inward_normal(cap, x0))
    p = geo.integrate_geodesic(cap, x0, np.cos(ang) * e1 + np.sin(ang) * e2)
    if p.classification == geo.NON_TANGENTIAL:
        assert p.speed_drift(cap) < 1e-7 * max(p.length, 1.0)
        assert np.all(np.diff(p.t) > 0)
        assert p.t[-1] == p.exit_time


def test_fan_counts_and_chord_lengths(disk):
    fan = geo.boundary_fan(disk, 4, 3, tangency=0.1)
    assert len(fan) == 12
    assert all(p.classification == geo.NON_TANGENTIAL for p in fan)
    angles = -0.5 * np.pi + np.pi * (np.arange(3) + 0.5) / 3
    expected = 4 * np.sum(2 * np.cos(angles))
    assert sum(p.length for p in fan) == pytest.approx(expected, abs=1e-6)


def test_fan_degenerate_threshold(disk):
    with pytest.raises(ConfigurationError):
        geo.boundary_fan(disk, 4, 2, tangency=0.999)


def test_simplicity_examples(disk):
    assert geo.check_simple(geo.spherical_cap(0.5)).simple
    assert geo.check_simple(disk).simple
    hemi = geo.check_simple(geo.spherical_cap(0.0))
    assert not hemi.convex_boundary
    assert not hemi.simple


def test_fermi_flat(disk, diameter):
    fr = geo.fermi_coordinates(disk, diameter, 0.3)
    t = np.linspace(0, 2, 7)
    y = np.full_like(t, 0.2)
    assert np.allclose(fr.chart_map(t, y), np.stack([t - 1, y], -1), atol=1e-8)
    assert np.allclose(fr.metric_in_frame(t, y), np.eye(2), atol=1e-8)


def test_fermi_perturbed_metric():
    ch = geo.conformal_disk(lambda x: 1 + 0.1 * np.exp(-np.sum(x * x, -1)))
    x0 = np.array([-1.0, 0.15])
    x0 = x0 / np.linalg.norm(x0)
    v = np.array([1.0, -0.1])
    v = v / np.sqrt(v @ ch.metric(x0) @ v)
    p = geo.integrate_geodesic(ch, x0, v)
    fr = geo.fermi_coordinates(ch, p, 0.2)
    t = np.linspace(0.1, p.length - 0.1, 9)
    assert np.allclose(fr.metric_in_frame(t, 0 * t), np.eye(2), atol=1e-6)
    d = 1e-3
    dg = (fr.metric_in_frame(t, 0 * t + d) - fr.metric_in_frame(t, 0 * t - d)) / (2 * d)
    assert np.max(np.abs(dg)) < 1e-4
    rng = np.random.default_rng(0)
    tt = rng.uniform(0.1, p.length - 0.1, 100)
    yy = rng.uniform(-0.15, 0.15, 100)
    X = fr.chart_map(tt, yy)
    back = fr.inverse_map(X)
    assert np.max(np.abs(fr.chart_map(back[:, 0], back[:, 1]) - X)) < 1e-8


def test_fermi_too_wide_rejected():
    cap = geo.spherical_cap(0.5)
    R = geo.cap_radius(0.5)
    x0 = np.array([-R, 0.0])
    v = np.array([1.0, 0.0])
    v = v / np.sqrt(v @ cap.metric(x0) @ v)
    p = geo.integrate_geodesic(cap, x0, v)
    with pytest.raises(FrameError):
        geo.fermi_coordinates(cap, p, 3.5)


def test_polar_flat_center(disk):
    pc = geo.polar_normal_coords(disk, (0.0, 0.0))
    x = np.array([[0.3, 0.4], [-0.5, 0.1]])
    rt = pc.to_polar(x)
    assert np.allclose(rt[:, 0], np.hypot(x[:, 0], x[:, 1]), atol=1e-12)
    assert pc.m(0.5, 0.3) == pytest.approx(0.25, abs=1e-6)


def test_polar_flat_boundary_pole(disk):
    pc = geo.polar_normal_coords(disk, (1.0, 0.0))
    x = np.array([[0.3, 0.4], [-0.5, 0.1]])
    assert np.allclose(pc.to_polar(x)[:, 0], np.linalg.norm(x - [1.0, 0.0], axis=1), atol=1e-8)


def test_polar_gauss_lemma_on_cap():
    cap = geo.spherical_cap(0.5)
    pc = geo.polar_normal_coords(cap, (0.0, 0.0))
    r, th = np.meshgrid(np.linspace(0.1, 0.9, 5), np.linspace(-3, 3, 5))
    G = pc.metric(r, th)
    assert np.max(np.abs(G[..., 0, 0] - 1.0)) < 1e-6
    assert np.max(np.abs(G[..., 0, 1])) < 1e-6


def test_polar_requires_simple():
    with pytest.raises(UnsupportedGeometryError):
        geo.polar_normal_coords(geo.spherical_cap(0.0), (0.0, 0.0))


def test_chart_from_config_kinds(tmp_path):
    ax = np.linspace(-1.2, 1.2, 49)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    g = (1 + 0.2 * X**2)[..., None, None] * np.eye(2)
    np.savez(tmp_path / "m.npz", x=ax, y=ax, g=g)
    tab = geo.chart_from_config({"kind": "tabulated", "file": "m.npz"}, tmp_path)
    conf = geo.chart_from_config({"kind": "conformal_disk", "factor": "1 + 0.2*x1^2"})
    p = np.array([[0.3, 0.4]])
    assert np.allclose(tab.metric(p), conf.metric(p), atol=1e-5)
    assert geo.chart_from_config({"kind": "spherical_cap", "alpha0": "0.5"}).domain["radius"] == pytest.approx(geo.cap_radius(0.5))
    with pytest.raises(ConfigurationError):
        geo.chart_from_config({"kind": "torus"})
    with pytest.raises(ConfigurationError):
        geo.chart_from_config({"kind": "tabulated", "file": "missing.npz"}, tmp_path)

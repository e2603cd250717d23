import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geobeam import fields as fl
from geobeam import geometry as geo
from geobeam import gaussianbeam as gb
from geobeam.errors import ConstructionError, ContractError, ParameterError


def const_q(value):
    return lambda p: np.full(p.shape[:-1], value)


@pytest.fixture(scope="module")
def beams(disk, diameter):
    out = {}
    for h in (0.1, 0.05):
        b = gb.assemble_quasimode(disk, diameter, None, None, fl.SemiclassicalParams(h), delta_prime=10.0)
        out[h] = (b, gb.residual_bound(b, q_exact=const_q(2.0)))
    return out


# -- Riccati ----------------------------------------------------------------


def test_riccati_closed_form():
    ric = gb.solve_riccati(None, 1j * np.eye(1), (0.0, 2.0), t0=0.0)
    t = np.linspace(0, 2, 41)
    exact = 1.0 / (t - 1j)
    assert np.max(np.abs(ric.H_at(t)[:, 0, 0] - exact)) < 1e-6
    assert np.max(np.abs(ric.H_at(t)[:, 0, 0].imag - 1 / (t**2 + 1))) < 1e-6
    assert ric.im_min_eigenvalue() > 0
    assert ric.det_identity_error() < 1e-6
    assert ric.residual() < 1e-6


def test_riccati_matrix_closed_form_backwards():
    H0 = np.array([[2j, 0], [0, 0.5j]])
    ric = gb.solve_riccati(None, H0, (-1.0, 1.0), t0=0.5)
    t = np.linspace(-1, 1, 9)
    exact = np.stack([1 / (t - 0.5 + 1 / H0[0, 0]), 1 / (t - 0.5 + 1 / H0[1, 1])], axis=-1)
    got = np.diagonal(ric.H_at(t), axis1=-2, axis2=-1)
    assert np.max(np.abs(got - exact)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(0.1, 3.0))
def test_riccati_preserves_symmetry(entries, omega):
    a, b, c = entries
    S = np.array([[a, b], [b, c]])

    def F(t):
        return S * np.cos(omega * t)[..., None, None]

    ric = gb.solve_riccati(F, 1j * np.eye(2), (0.0, 1.0))
    assert ric.asymmetry() < 1e-10
    assert ric.im_min_eigenvalue() > 0
    assert ric.det_identity_error() < 1e-6


def test_riccati_rejects_bad_initial_data():
    with pytest.raises(ParameterError):
        gb.solve_riccati(None, np.array([[1j, 1], [0, 1j]]), (0, 1))
    with pytest.raises(ParameterError):
        gb.solve_riccati(None, np.array([[-1j]]), (0, 1))
    with pytest.raises(ParameterError):
        gb.solve_riccati(None, np.array([[1j]]), (0, 1), t0=2.0)


# -- phase ------------------------------------------------------------------


def test_flat_phase_defect_is_quartic(disk, diameter):
    frame = geo.fermi_coordinates(disk, diameter, 0.5)
    ric = gb.solve_riccati(None, 1j * np.eye(1), frame.t_range, t0=1.0)
    phase = gb.build_phase(frame, ric)
    t = np.linspace(0.2, 1.8, 5)[:, None]
    y = np.geomspace(0.01, 0.2, 8)[None, :]
    d = phase.eikonal_defect(t, y)
    # (1 + H' y^2 / 2)^2 + H^2 y^2 - 1 = (H')^2 y^4 / 4 since H' = -H^2
    Hd = ric.Hdot_at(t[:, 0])[:, 0, 0][:, None]
    assert np.max(np.abs(d - 0.25 * Hd**2 * y**4)) < 1e-8
    assert gb.fit_exponent(y[0], np.max(np.abs(d), axis=0)) >= 3.7
    assert np.max(np.abs(phase.eikonal_defect(t, 0 * y))) < 1e-8


def test_im_phase_lower_bound(disk, diameter):
    frame = geo.fermi_coordinates(disk, diameter, 0.5)
    ric = gb.solve_riccati(None, 1j * np.eye(1), frame.t_range, t0=1.0)
    phase = gb.build_phase(frame, ric)
    rng = np.random.default_rng(0)
    t = rng.uniform(*frame.t_range, 10_000)
    y = rng.uniform(-0.5, 0.5, 10_000)
    c = phase.im_lower_constant()
    assert np.all(phase.phi(t, y).imag >= c * y**2 - 1e-14)
    assert np.all(phase.phi(t, 0 * y).imag == 0)


def test_curved_phase_needs_the_frame_source():
    cap = geo.spherical_cap(0.5)
    R = geo.cap_radius(0.5)
    path = geo.integrate_geodesic(cap, np.array([-R, 0.0]), np.array([1.0, 0.0]) / np.sqrt(cap.metric(np.array([-R, 0.0]))[0, 0]))
    frame = geo.fermi_coordinates(cap, path, 0.3)
    good = gb.solve_riccati(gb.riccati_source(frame), 1j * np.eye(1), frame.t_range, t0=0.5 * path.length)
    assert gb.build_phase(frame, good).defect_exponent >= 2.7
    bad = gb.solve_riccati(None, 1j * np.eye(1), frame.t_range, t0=0.5 * path.length)
    with pytest.raises(ConstructionError):
        gb.build_phase(frame, bad)


# -- amplitude and assembled beam ---------------------------------------------


def test_zero_potential_amplitude(beams):
    b, _ = beams[0.1]
    amp = b.amplitude
    assert np.all(amp.Phi == 0)
    assert np.max(np.abs(amp.a0 - np.exp(amp.f)[None, :])) < 1e-14
    assert amp.transport_residual < 1e-5


def test_normalization_at_t0():
    H0 = np.array([[0.3 + 2j]])
    f0 = gb.normalization_constant(H0)
    assert abs(np.exp(2 * f0) * np.sqrt(np.pi) / np.sqrt(2.0) - 1) < 1e-10


def test_slice_norm_matches_gaussian_prediction(beams):
    b, _ = beams[0.05]
    assert abs(gb.slice_norm(b, 0.0) / gb.slice_norm_oracle(b, 0.0) - 1) < 0.1


def test_beam_vanishes_outside_tube(beams):
    b, _ = beams[0.05]
    y = np.array([5.0, 5.5, -7.0])
    assert np.all(b.evaluate(np.zeros(3), np.ones(3), y) == 0)


def test_boundary_trace_bounded(beams):
    vals = [gb.boundary_trace_norm(beams[h][0], 0.0) for h in (0.1, 0.05)]
    assert max(vals) / min(vals) < 3


def test_residual_over_h_decreases(beams):
    r1, r2 = beams[0.1][1], beams[0.05][1]
    assert r2.bound / r2.h < r1.bound / r1.h


def test_constant_q_term_is_order_h_squared(beams):
    r1, r2 = beams[0.1][1], beams[0.05][1]
    assert gb.fit_exponent([0.1, 0.05], [r1.groups["potential"], r2.groups["potential"]]) >= 1.9


def test_cutoff_term_exponentially_small(beams):
    assert beams[0.05][1].groups["cutoff"] < 1e-8


def test_residual_rejects_other_tau(beams, kink_sampled):
    b, _ = beams[0.1]
    with pytest.raises(ContractError):
        gb.residual_bound(b, A=kink_sampled)


def test_sigma_range(disk, diameter):
    with pytest.raises(ParameterError):
        gb.assemble_quasimode(disk, diameter, None, None, fl.SemiclassicalParams(0.1), sigma=0.5)


def test_self_intersection_detection():
    s = np.linspace(0, 2 * np.pi, 400)
    figure_eight = np.stack([np.sin(s), np.sin(s) * np.cos(s)], axis=-1)
    hits = gb._polyline_self_intersections(figure_eight)
    assert len(hits) >= 1
    assert all(a > 0.5 for _, _, a in hits)
    assert gb._polyline_self_intersections(np.stack([s, 0 * s], axis=-1)) == []


# -- concentration --------------------------------------------------------------


@pytest.fixture(scope="module")
def pair(disk, diameter):
    out = {}
    for lam in (0.0, 1.0):
        p = fl.SemiclassicalParams(1e-3, lam)
        v = gb.assemble_quasimode(disk, diameter, None, None, p, delta_prime=10.0)
        w = gb.assemble_quasimode(disk, diameter, None, None, p, kind="w", delta_prime=10.0)
        out[lam] = (v, w)
    return out


def dt_form(x):
    return np.stack([0 * x[..., 0], np.ones(x.shape[:-1]), 0 * x[..., 0]])


def test_concentration_product_limits(pair):
    L = 2.0
    v, w = pair[0.0]
    assert abs(gb.geodesic_limit(v, w, None, 0.0) - L) < 1e-6
    assert abs(gb.concentration_integral(v, w, None, 0.0) / L - 1) < 0.05
    v, w = pair[1.0]
    ref = (1 - np.exp(-2 * L)) / 2
    assert abs(gb.geodesic_limit(v, w, None, 0.0) - ref) < 1e-6
    assert abs(gb.concentration_integral(v, w, None, 0.0) / ref - 1) < 0.05


def test_alpha_pairing_signs(pair):
    v, w = pair[0.0]
    dv = gb.concentration_integral(v, w, None, 0.0, "alpha_dv", dt_form)
    dw = gb.concentration_integral(v, w, None, 0.0, "alpha_dw", dt_form)
    assert abs(gb.geodesic_limit(v, w, None, 0.0, "alpha_dv", dt_form) - 2j) < 1e-6
    assert abs(gb.geodesic_limit(v, w, None, 0.0, "alpha_dw", dt_form) + 2j) < 1e-6
    assert abs(dv / 2j - 1) < 0.05
    assert abs(dw / -2j - 1) < 0.05


def test_concentration_contract(pair):
    v, w = pair[0.0]
    with pytest.raises(ContractError):
        gb.concentration_integral(w, v, None, 0.0)
    with pytest.warns(UserWarning):
        assert gb.concentration_integral(v, w, None, 5.0) == 0

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geobeam import fields as fl
from geobeam import geometry as geo
from geobeam.errors import ContractError, ParameterError, ResolutionError, ShapeError


def flat(n=65, lo=-1.0, hi=1.0, d=2):
    return fl.GridMetric(fl.Grid.uniform([lo] * d, [hi] * d, [n] * d))


def bump(X, Y, R=0.8):
    r2 = (X**2 + Y**2) / R**2
    with np.errstate(divide="ignore"):
        return np.where(r2 < 1, np.exp(-1 / np.where(r2 < 1, 1 - r2, 1)), 0.0)


def test_exterior_d_constant_and_linear():
    g = flat()
    assert np.all(fl.exterior_d(fl.field_from_function(g, lambda x, y: 1.0 + 0 * x)).components == 0)
    d = fl.exterior_d(fl.field_from_function(g, lambda x, y: x)).components
    assert np.allclose(d[0], 1.0, atol=1e-12) and np.allclose(d[1], 0.0, atol=1e-12)


def test_exterior_d_trig():
    g = flat(128)
    d = fl.exterior_d(fl.field_from_function(g, lambda x, y: np.sin(x) * np.cos(y))).components
    X, Y = g.grid.mesh()
    assert np.max(np.abs(d[0] - np.cos(X) * np.cos(Y))) < 1e-6
    assert np.max(np.abs(d[1] + np.sin(X) * np.sin(Y))) < 1e-6


def test_resolution_guard():
    g = fl.GridMetric(fl.Grid.uniform([0, 0], [1, 1], [4, 4]))
    with pytest.raises(ResolutionError):
        fl.exterior_d(fl.field_from_function(g, lambda x, y: x))


def test_codifferential_examples():
    g = flat()
    v = fl.one_form_from_functions(g, [lambda x, y: x, lambda x, y: 0 * x])
    assert np.allclose(fl.codifferential(v).values, -1.0, atol=1e-10)
    ch = geo.polar_plane(r_range=(0.5, 2.0), theta_range=(-1.0, 1.0))
    grid = fl.Grid.uniform([0.5, -1.0], [2.0, 1.0], [61, 41])
    pg = fl.GridMetric(grid, ch)
    dr = fl.one_form_from_functions(pg, [lambda r, t: 1 + 0 * r, lambda r, t: 0 * r])
    R = grid.mesh()[0]
    assert np.max(np.abs(fl.codifferential(dr).values + 1 / R)) < 1e-8


def test_adjointness():
    g = flat(161, -1.2, 1.2)
    X, Y = g.grid.mesh()
    u = fl.SampledField(g, bump(X, Y) * np.sin(2 * X + Y))
    v = fl.SampledOneForm(g, np.stack([bump(X - 0.1, Y, 0.9) * Y, bump(X, Y + 0.1, 0.9) * np.cos(X)]))
    w = g.volume_weights
    lhs = np.sum(np.sum(fl.exterior_d(u).components * v.components, 0) * w)
    rhs = np.sum(u.values * fl.codifferential(v).values * w)
    assert abs(lhs - rhs) < 1e-5


def test_schrodinger_simple_cases():
    g = flat()
    u = fl.field_from_function(g, lambda x, y: x**2)
    assert np.allclose(fl.magnetic_schrodinger_apply(u, None, None).values, -2.0, atol=1e-9)
    one = fl.field_from_function(g, lambda x, y: 1 + 0 * x)
    q = fl.field_from_function(g, lambda x, y: 3.5 + 0 * x)
    assert np.allclose(fl.magnetic_schrodinger_apply(one, None, q).values, 3.5)


def test_schrodinger_grid_mismatch():
    u = fl.field_from_function(flat(33), lambda x, y: x)
    q = fl.field_from_function(flat(35), lambda x, y: x)
    with pytest.raises(ShapeError):
        fl.magnetic_schrodinger_apply(u, None, q)


def test_gauge_covariance():
    g = flat(201, -1.0, 1.0)
    X, Y = g.grid.mesh()
    phi = 0.7 * (1 - X**2) * (1 - Y**2) * np.sin(X + 2 * Y)
    u = np.exp(-(X**2 + 2 * Y**2)) * (1 + 0.3j * X)
    A = np.stack([0.4 * np.cos(Y), 0.2 * X * Y])
    dphi = fl.gradient(phi, g.grid)
    lhs = fl.magnetic_schrodinger_apply(fl.SampledField(g, u), fl.SampledOneForm(g, A + dphi), None).values
    rhs = np.exp(-1j * phi) * fl.magnetic_schrodinger_apply(fl.SampledField(g, np.exp(1j * phi) * u), fl.SampledOneForm(g, A), None).values
    inner = (slice(4, -4), slice(4, -4))
    assert np.max(np.abs(lhs - rhs)[inner]) / np.max(np.abs(lhs[inner])) < 1e-5


def test_conjugated_constants():
    g = flat(33)
    p = fl.SemiclassicalParams(0.1, 2.0)
    one = fl.field_from_function(g, lambda x, y: 1 + 0 * x)
    out = fl.conjugated_apply(one, None, None, p, scaled=True).values
    assert np.allclose(out, -(1 + 1j * 0.1 * 2.0) ** 2, atol=1e-10)
    x1 = fl.field_from_function(g, lambda x, y: x)
    out = fl.conjugated_apply(x1, None, None, p).values
    assert np.allclose(out, -p.s**2 * g.grid.mesh()[0] + 2 * p.s, atol=1e-8)


def test_conjugated_matches_direct_at_moderate_mu():
    g = flat(161)
    X, Y = g.grid.mesh()
    p = fl.SemiclassicalParams(0.25, 0.5)
    u = np.exp(-(X**2 + Y**2)) * np.cos(X * Y)
    A = fl.SampledOneForm(g, np.stack([0.3 * np.sin(Y), 0.2 + 0 * X]))
    q = fl.SampledField(g, 1 + X**2)
    exp_expanded = fl.conjugated_apply(fl.SampledField(g, u), A, q, p).values
    direct = np.exp(p.s * X) * fl.magnetic_schrodinger_apply(fl.SampledField(g, np.exp(-p.s * X) * u), A, q).values
    # equality holds up to the finite-difference error of the direct route
    inner = (slice(4, -4), slice(4, -4))
    rel = np.max(np.abs(exp_expanded - direct)[inner]) / np.max(np.abs(direct[inner]))
    assert rel < 1e-6


def test_conjugated_h_positive():
    with pytest.raises(ParameterError):
        fl.SemiclassicalParams(0.0)


def test_mollify_preserves_constants_inside():
    g = flat(201, -2, 2)
    A = fl.SampledOneForm(g, np.stack([np.full(g.grid.shape, 0.7), np.full(g.grid.shape, -0.2)]))
    At = fl.mollify(A, 0.2).components
    X, Y = g.grid.mesh()
    far = (np.abs(X) < 1.7) & (np.abs(Y) < 1.7)
    assert np.max(np.abs(At[:, far] - A.components[:, far])) < 1e-10


def test_mollify_resolution_guard():
    g = flat(21)
    A = fl.SampledOneForm(g, np.zeros((2,) + g.grid.shape))
    with pytest.raises(ResolutionError):
        fl.mollify(A, 0.1)


def _kink_form(n=301):
    g = flat(n, -1.5, 1.5)
    X, Y = g.grid.mesh()
    return fl.SampledOneForm(g, np.stack([0.5 * np.maximum(0.8 - np.hypot(X, Y), 0), 0.3 * np.abs(X - 0.1)]))


def test_mollifier_rates_lipschitz():
    rates = fl.mollifier_rates(_kink_form(), [0.1, 0.05, 0.025])
    # Lipschitz data: tau |grad A_tau| <= tau Lip, tau^2 |Delta A_tau| = O(tau)
    assert np.all(np.diff(rates["grad"]) < 0)
    assert np.all(np.diff(rates["lap"]) < 0)
    assert np.all(np.diff(rates["l2_error"]) < 0)


def test_mollifier_rates_jump_saturates():
    # a unit jump is the borderline case: tau |grad A_tau| tends to the peak
    # of the kernel marginal, (5 / pi) * int (1 - y^2)^4 dy = 256 / (63 pi)
    g = flat(601, -0.6, 0.6)
    X, _ = g.grid.mesh()
    A = fl.SampledOneForm(g, np.stack([np.where(X > 0, 1.0, 0.0), 0 * X]))
    r = fl.mollifier_rates(A, [0.1, 0.05, 0.025])
    assert np.allclose(r["grad"], 256 / (63 * np.pi), rtol=0.05)


def _conformal_chart(c):
    def g(x):
        return c(x)[..., None, None] * np.eye(3)

    return geo.MetricChart(dim=3, metric_fn=g, boundary_fn=lambda x: np.max(np.abs(x), -1) - 1, domain={"kind": "box", "lo": [-1] * 3, "hi": [1] * 3}, conformal_factor=c)


def test_conformal_reduce_identity_and_constant():
    grid = fl.Grid.uniform([-1] * 3, [1] * 3, [17] * 3)
    q = lambda ch: fl.SampledField(fl.GridMetric(grid, ch), 1 + grid.mesh()[0] ** 2)
    one = _conformal_chart(lambda x: np.ones(x.shape[:-1]))
    _, qt, _, _ = fl.conformal_reduce(None, q(one), one)
    assert np.allclose(qt.values, q(one).values)
    three = _conformal_chart(lambda x: np.full(x.shape[:-1], 3.0))
    _, qt, red, _ = fl.conformal_reduce(None, q(three), three)
    assert np.allclose(qt.values, 3 * q(three).values, atol=1e-10)
    assert np.allclose(red.g, np.eye(3), atol=1e-12)


def test_conformal_operator_identity():
    c = lambda x: 1 + 0.2 * np.exp(-np.sum(x * x, -1))
    ch = _conformal_chart(c)
    grid = fl.Grid.uniform([-1] * 3, [1] * 3, [64] * 3)
    geom = fl.GridMetric(grid, ch)
    X, Y, Z = grid.mesh()
    cv = c(grid.points())
    w = np.exp(-(X**2 + Y**2 + Z**2)) * (1 + 0.5 * X)
    A = fl.SampledOneForm(geom, np.stack([0.3 * np.cos(Y), 0.1 * X, 0.2 + 0 * X]))
    q = fl.SampledField(geom, 0.5 + Z**2)
    lhs = cv ** 1.25 * fl.magnetic_schrodinger_apply(fl.SampledField(geom, cv ** -0.25 * w), A, q).values
    A2, qt, red, _ = fl.conformal_reduce(A, q, ch)
    rhs = fl.magnetic_schrodinger_apply(fl.SampledField(red, w), A2, qt).values
    inner = (slice(6, -6),) * 3
    assert np.max(np.abs(lhs - rhs)[inner]) / np.max(np.abs(rhs[inner])) < 1e-4


def test_norm_scl_basic():
    g = fl.GridMetric(fl.Grid.uniform([0, 0], [1, 1], [33, 33]))
    p = fl.SemiclassicalParams(0.1)
    z = fl.norm_scl(fl.SampledField(g, np.zeros(g.grid.shape)), p)
    assert z.l2 == 0 and z.h1_scl == 0
    one = fl.norm_scl(fl.SampledField(g, np.ones(g.grid.shape)), p)
    assert one.l2 == pytest.approx(1.0) and one.h1_scl == pytest.approx(1.0)
    with pytest.raises(ContractError):
        fl.norm_scl(np.ones(3), p)


def test_dual_bound_dominates_pairings():
    g = flat(129)
    X, Y = g.grid.mesh()
    h = 0.1
    p = fl.SemiclassicalParams(h)
    w0 = np.exp(-(X**2 + Y**2)) * np.cos(3 * X)
    w1 = np.stack([bump(X, Y) * np.sin(5 * Y), bump(X, Y) * X])
    W = g.volume_weights
    dec = fl.ResidualDecomposition(w0, w1, W)
    bound = fl.norm_scl(dec, p).h_minus1_scl_bound
    res = w0 + fl.divergence_form(w1, g)
    rng = np.random.default_rng(4)
    for _ in range(50):
        k = rng.normal(size=2) * 4
        c = rng.uniform(-0.5, 0.5, 2)
        psi = bump(X - c[0] * 0.3, Y - c[1] * 0.3, 0.6) * np.cos(k[0] * X + k[1] * Y)
        pairing = abs(np.sum(res * psi * W))
        nrm = fl.norm_scl(fl.SampledField(g, psi), p).h1_scl
        assert pairing / nrm <= bound


def test_field_dump_round_trip(tmp_path):
    g = flat(9)
    X, Y = g.grid.mesh()
    A = fl.SampledOneForm(g, np.stack([X + 1j * Y, X * Y]))
    fl.save_field(tmp_path / "a.csv", A)
    B = fl.load_field(tmp_path / "a.csv")
    assert np.allclose(B.components, A.components)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 1))
def test_partial_exact_on_quartics(a, b, hstep):
    x = np.arange(12) * hstep
    f = a * x**4 + b * x**3 + x
    df = 4 * a * x**3 + 3 * b * x**2 + 1
    assert np.allclose(fl.partial(f, 0, hstep), df, atol=1e-8 * (1 + np.max(np.abs(df))))

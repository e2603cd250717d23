import numpy as np
import pytest

from geobeam import boundary as bd
from geobeam import geometry as geo
from geobeam.errors import ChartError, ParameterError


def const_form(a):
    a = np.asarray(a, float)
    return lambda p: np.broadcast_to(a.reshape((3,) + (1,) * (p.ndim - 1)), (3,) + p.shape[:-1]).copy()


def c1_form(p):
    x1, x2, xn = p[..., 0], p[..., 1], p[..., 2]
    return np.stack([0.7 + x1 + 2 * xn + x2**2, 0.2 + np.sin(x1), 0.1 + 0 * x1])


@pytest.fixture(scope="module")
def hs():
    return bd.half_space()


def test_profile_normalisation():
    assert abs(bd.Profile().boundary_normalisation() - 1) < 1e-8
    assert abs(bd.Profile(radius=0.5).boundary_normalisation() - 1) < 1e-8


def test_modulus(hs):
    lam = 2e-3
    pr = bd.BoundaryProbe(hs, [1, 0, 0], lam)
    rng = np.random.default_rng(3)
    X = rng.uniform([-0.04, -0.04, 0], [0.04, 0.04, 0.04], (500, 3))
    ref = pr.profile.value(X / np.sqrt(lam)) * np.exp(-X[:, 2] / lam)
    assert np.max(np.abs(np.abs(pr.evaluate(X)) - ref)) < 1e-14


def test_gradient_matches_differences(hs):
    pr = bd.BoundaryProbe(hs, [0.6, 0.8, 0], 5e-3)
    x = np.array([0.01, -0.02, 0.004])
    d = 1e-7
    fd = np.array([(pr.evaluate(x + d * e) - pr.evaluate(x - d * e)) / (2 * d) for e in np.eye(3)])
    assert np.max(np.abs(pr.gradient(x) - fd)) < 1e-5 * np.max(np.abs(fd))


def test_zero_potential(hs):
    r = bd.tangential_recovery(hs, [1, 0, 0], const_form([0, 0, 0]))
    assert np.all(r.values == 0) and r.estimate == 0


def test_constant_tangential_component(hs):
    r = bd.tangential_recovery(hs, [1, 0, 0], const_form([0.7, 0.2, 0.1]))
    assert abs(r.values[-1] / 0.7 - 1) < 0.05
    assert abs(r.estimate / 0.7 - 1) < 1e-4


def test_orthogonal_direction(hs):
    r = bd.tangential_recovery(hs, [1, 0, 0], const_form([0.0, 0.4, 0.0]))
    assert abs(r.estimate) < 0.05 * 0.4


def test_linearity(hs):
    pr = bd.BoundaryProbe(hs, [0.6, 0.8, 0], 2e-3)
    a, b = const_form([0.3, -0.1, 0.5]), c1_form
    both = lambda p: a(p) + 2.0 * b(p)
    assert abs(bd.I1(pr, both) - bd.I1(pr, a) - 2.0 * bd.I1(pr, b)) < 1e-12


def test_first_order_convergence(hs):
    r = bd.tangential_recovery(hs, [1, 0, 0], c1_form, lams=[8e-3, 4e-3, 2e-3, 1e-3])
    assert r.converged
    assert abs(r.order - 1) < 0.2
    assert abs(r.estimate - 0.7) < 1e-3


def test_rate_exponents(hs):
    got = bd.rate_exponents(hs, [1, 0, 0], [4e-3, 2e-3, 1e-3, 5e-4])
    want = bd.expected_exponents()
    assert want["v0"] == 1.0
    for k in got:
        assert abs(got[k] - want[k]) < 0.1


def test_sampled_data_norm(hs):
    pr = bd.BoundaryProbe(hs, [1, 0, 0], 2e-3)
    f = bd.oscillatory_data(pr)
    l2 = np.sqrt(np.sum(np.abs(f.values) ** 2 * f.geom.volume_weights))
    assert abs(l2 / bd.probe_norms(pr)["v0"] - 1) < 0.1


def test_probe_contracts(hs):
    with pytest.raises(ParameterError):
        bd.BoundaryProbe(hs, [1, 0, 0.1], 1e-3)
    with pytest.raises(ParameterError):
        bd.BoundaryProbe(hs, [2, 0, 0], 1e-3)
    with pytest.raises(ParameterError):
        bd.BoundaryProbe(hs, [1, 0, 0], 0.0)
    with pytest.raises(ChartError):
        bd.BoundaryProbe(bd.half_space((0.01, 0.01)), [1, 0, 0], 1e-2)
    with pytest.raises(ParameterError):
        bd.oscillatory_data(bd.BoundaryProbe(hs, [1, 0, 0], 1e-6))


def test_product_chart_recovery():
    bc = bd.product_boundary_chart(geo.euclidean_disk(1.0), 0.3)
    assert bc.block_form_error() < 1e-8
    A = const_form([0.5, 0.3, -0.4])
    J = bc.jacobian(np.zeros(3))
    target = np.array([0.5, 0.3, -0.4]) @ J[:, 1]
    assert abs(bd.tangential_recovery(bc, [0, 1, 0], A).estimate - target) < 1e-5

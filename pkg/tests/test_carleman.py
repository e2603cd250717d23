import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geobeam import carleman as cm
from geobeam import fields as fl
from geobeam.errors import ContractError, ParameterError


def box_geom(h, nodes_per_h=5):
    n = int(2 / (h / nodes_per_h)) + 1
    return fl.GridMetric(fl.Grid.uniform([-1, -1], [1, 1], [n, n]))


@pytest.fixture(scope="module")
def sweep():
    out = {}
    for h in (0.1, 0.05):
        geom = box_geom(h)
        fam = cm.packet_family(geom, h, n=8)
        out[h] = (geom, fam, cm.verify_carleman(geom, fam, fl.SemiclassicalParams(h), 0.3))
    return out


def test_weight_values():
    w = cm.CarlemanWeight(0.1, 0.5)
    x = np.array([-1.0, 0.0, 2.0])
    assert np.allclose(w.value(x), x + 0.1 * x**2)
    assert np.allclose(w.derivative(x), 1 + 0.2 * x)
    plain = cm.CarlemanWeight(0.1, np.inf)
    assert not plain.convexified
    assert np.all(plain.value(x) == x)


def test_weight_constraints():
    with pytest.raises(ParameterError):
        cm.CarlemanWeight(0.2, 0.3)
    with pytest.raises(ParameterError):
        cm.CarlemanWeight(0.1, 0.3).check_lower_bound(np.linspace(-2, 2, 5))
    with pytest.raises(ParameterError):
        cm.CarlemanWeight(0.1, -1.0)


def test_compact_support_contract(sweep):
    geom, fam, _ = sweep[0.1]
    with pytest.raises(ContractError):
        cm.check_compact(fl.SampledField(geom, np.zeros(geom.grid.shape)))
    with pytest.raises(ContractError):
        cm.verify_carleman(geom, [fl.SampledField(geom, np.ones(geom.grid.shape))], fl.SemiclassicalParams(0.1), 0.3)


def test_family_on_other_grid_rejected(sweep):
    geom, _, _ = sweep[0.1]
    _, fam, _ = sweep[0.05]
    with pytest.raises(ContractError):
        cm.verify_carleman(geom, fam[:1], fl.SemiclassicalParams(0.1), 0.3)


def test_plain_weight_needs_lhs_eps(sweep):
    geom, fam, _ = sweep[0.1]
    with pytest.raises(ParameterError):
        cm.verify_carleman(geom, fam[:1], fl.SemiclassicalParams(0.1), np.inf)


@settings(max_examples=10, deadline=None)
@given(st.complex_numbers(min_magnitude=0.1, max_magnitude=10))
def test_homogeneity(c):
    h = 0.1
    geom = box_geom(h)
    u = cm.wave_packet(geom, (0.1, -0.2), 0.3, (0.3, 0.8), h)
    cu = fl.SampledField(geom, c * u.values)
    p = fl.SemiclassicalParams(h)
    r1 = cm.verify_carleman(geom, [u], p, 0.3).ratios[0]
    r2 = cm.verify_carleman(geom, [cu], p, 0.3).ratios[0]
    assert abs(r1 - r2) < 1e-10 * r1


def test_decomposition_identity(sweep):
    for h, (geom, fam, _) in sweep.items():
        for u in fam[:3]:
            assert cm.decomposition_identity(u, cm.CarlemanWeight(h, 0.3))["relative_error"] < 1e-4


def test_dirichlet_dual_norm_on_eigenvector():
    n, h = 33, 0.2
    geom = fl.GridMetric(fl.Grid.uniform([0, 0], [1, 1], [n, n]))
    X, Y = geom.grid.mesh()
    f = np.sin(2 * np.pi * X) * np.sin(3 * np.pi * Y)
    dx = 1 / (n - 1)
    lam = (2 - 2 * np.cos(2 * np.pi * dx)) / dx**2 + (2 - 2 * np.cos(3 * np.pi * dx)) / dx**2
    l2 = np.sqrt(np.sum(f**2) * dx * dx)
    assert abs(cm.h_minus1_dirichlet(f, geom, h) - l2 / np.sqrt(1 + h * h * lam)) < 1e-12


def test_convexified_ratio_bounded_below(sweep):
    mins = [sweep[h][2].min_ratio for h in (0.1, 0.05)]
    assert min(mins) > 0.5
    assert cm.fit_constant_spread([sweep[h][2] for h in (0.1, 0.05)]) < 2.0


def test_magnetic_variant_positive(sweep):
    geom, fam, _ = sweep[0.1]
    rep = cm.verify_carleman(geom, fam[:4], fl.SemiclassicalParams(0.1), 0.3, which="magnetic")
    assert rep.min_ratio > 0
    assert rep.as_dict()["fitted_C"] == pytest.approx(1 / rep.min_ratio)

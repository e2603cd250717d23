"""Boundary determination of the tangential part of a magnetic potential.

The probe concentrates at a boundary point ``x0`` (the origin of boundary
normal coordinates ``(x', x_n)``, ``x_n`` the distance to the boundary):

    v0(x) = eta(x / lam^{1/2}) exp((i / lam) (tau' . x' + i x_n))

and the quantity

    I1(lam) = lam^{-(n-1)/2} int i <A, v0 d conj(v0) - conj(v0) d v0>_g dV

tends to ``<A(x0), tau>`` as ``lam -> 0``.  All integrals are computed in
the scaled variables ``x' = lam^{1/2} y'``, ``x_n = lam z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ChartError, ParameterError
from .fields import Grid, GridMetric, SampledField, SampledOneForm, PointSampler
from .gaussianbeam import fit_exponent
from .geometry import MetricChart, flow, inward_normal, norm_g

DIM = 3


# ---------------------------------------------------------------------------
# boundary normal coordinates


class BoundaryNormalChart:
    """Boundary normal coordinates ``(x', x_n)`` near a boundary point.

    ``to_chart`` maps them to chart points of the ambient chart; the metric
    has the block form ``g = g'(x', x_n) + dx_n^2``.  ``extent`` bounds the
    tangential and normal ranges on which the map is trusted.
    """

    def __init__(self, to_chart: Callable, metric: Callable, extent: tuple, x0: np.ndarray, name: str = "", fd: float = 1e-6):
        self.to_chart = to_chart
        self._metric = metric
        self.extent = extent
        self.x0 = np.asarray(x0, float)
        self.name = name
        self.fd = fd

    def metric(self, x) -> np.ndarray:
        return self._metric(np.asarray(x, float))

    def jacobian(self, x) -> np.ndarray:
        """``d(chart) / d(x', x_n)`` by central differences, ``(..., 3, 3)``."""
        x = np.asarray(x, float)
        cols = []
        for k in range(DIM):
            e = np.zeros(DIM)
            e[k] = self.fd
            cols.append((self.to_chart(x + e) - self.to_chart(x - e)) / (2 * self.fd))
        return np.stack(cols, axis=-1)

    def block_form_error(self, n: int = 5) -> float:
        """``max |g_nn - 1| + max |g_jn|`` on a small lattice."""
        t, nn = self.extent
        ax = np.linspace(-0.5 * t, 0.5 * t, n)
        zn = np.linspace(0.0, 0.5 * nn, n)
        X = np.stack(np.meshgrid(ax, ax, zn, indexing="ij"), axis=-1)
        g = self.metric(X)
        return float(np.max(np.abs(g[..., 2, 2] - 1.0)) + np.max(np.abs(g[..., :2, 2])))


def half_space(extent: tuple = (1.0, 1.0)) -> BoundaryNormalChart:
    """Flat half-space ``x_n >= 0`` (chart coordinates equal boundary normal ones)."""

    def to_chart(x):
        return np.asarray(x, float)

    def metric(x):
        return np.broadcast_to(np.eye(DIM), np.asarray(x).shape[:-1] + (DIM, DIM)).copy()

    return BoundaryNormalChart(to_chart, metric, extent, np.zeros(DIM), "half_space")


def product_boundary_chart(base: MetricChart, angle: float, x1: float = 0.0, extent: tuple = (0.2, 0.2), n_sub: int = 16) -> BoundaryNormalChart:
    """Boundary normal coordinates of ``R x base`` at ``(x1, p(angle))``.

    ``base`` must have a disk domain.  The boundary is parametrised by the
    polar angle, rescaled so the tangential coordinate has unit speed at
    the base point; inward unit-normal geodesics supply ``x_n``.
    """
    dom = base.domain
    if dom.get("kind") != "disk":
        raise ChartError("boundary normal charts need a disk domain")
    R = dom["radius"]
    c0 = np.asarray(dom.get("center", (0.0, 0.0)), float)

    def bpoint(a):
        return c0 + R * np.stack([np.cos(a), np.sin(a)], axis=-1)

    d = 1e-6
    p0 = bpoint(np.array(angle))
    speed = float(norm_g(base, p0, (bpoint(np.array(angle + d)) - bpoint(np.array(angle - d))) / (2 * d)))

    def to_chart(x):
        x = np.asarray(x, float)
        a = angle + x[..., 1] / speed
        p = bpoint(a)
        nu = inward_normal(base, p)
        if base.flat:
            xp = p + x[..., 2:3] * nu
        else:
            xp, _ = flow(base, p, nu, x[..., 2], n_sub)
        return np.concatenate([x1 + x[..., :1], xp], axis=-1)

    chart = BoundaryNormalChart(to_chart, None, extent, np.array([x1, *p0]), f"boundary({base.name})")

    def metric(x):
        J = chart.jacobian(x)
        G = np.zeros(J.shape)
        G[..., 0, 0] = 1.0
        G[..., 1:, 1:] = base.metric(to_chart(x)[..., 1:])
        return np.einsum("...ia,...ij,...jb->...ab", J, G, J)

    chart._metric = metric
    return chart


# ---------------------------------------------------------------------------
# profile and probe


def _bump1(t):
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(np.abs(t) < 1.0, np.exp(1.0 - 1.0 / np.where(np.abs(t) < 1.0, 1.0 - t * t, 1.0)), 0.0)


def _dbump1(t):
    inside = np.abs(t) < 1.0
    tt = np.where(inside, t, 0.0)
    return np.where(inside, _bump1(tt) * (-2.0 * tt / (1.0 - tt * tt) ** 2), 0.0)


@dataclass
class Profile:
    """``eta(y', y_n) = N b(|y'| / R) b(y_n / R)`` with ``int eta(y', 0)^2 dy' = 1``."""

    radius: float = 1.0
    norm: float = field(init=False)

    def __post_init__(self):
        r = np.linspace(0.0, self.radius, 200001)
        f = 2 * np.pi * r * _bump1(r / self.radius) ** 2
        # trapezoid is spectrally accurate for this flat-ended integrand
        self.norm = float(1.0 / np.sqrt(np.trapezoid(f, r)))

    def value(self, y):
        y = np.asarray(y, float)
        rho = np.sqrt(y[..., 0] ** 2 + y[..., 1] ** 2) / self.radius
        return self.norm * _bump1(rho) * _bump1(y[..., 2] / self.radius)

    def gradient(self, y):
        y = np.asarray(y, float)
        rho = np.sqrt(y[..., 0] ** 2 + y[..., 1] ** 2)
        r = rho / self.radius
        bn = _bump1(y[..., 2] / self.radius)
        with np.errstate(invalid="ignore", divide="ignore"):
            radial = np.where(rho > 0, _dbump1(r) / self.radius / np.where(rho > 0, rho, 1.0), 0.0)
        g = np.stack([radial * y[..., 0] * bn, radial * y[..., 1] * bn, _bump1(r) * _dbump1(y[..., 2] / self.radius) / self.radius], axis=-1)
        return self.norm * g

    def boundary_normalisation(self, n: int = 801) -> float:
        """``int eta(y', 0)^2 dy'`` by tensor trapezoid (equals 1)."""
        ax = np.linspace(-self.radius, self.radius, n)
        Y = np.stack([*np.meshgrid(ax, ax, indexing="ij"), np.zeros((n, n))], axis=-1)
        return float(np.trapezoid(np.trapezoid(self.value(Y) ** 2, ax), ax))


@dataclass
class BoundaryProbe:
    chart: BoundaryNormalChart
    tau: np.ndarray  # unit tangent vector at x0 in boundary normal coordinates
    lam: float
    profile: Profile = field(default_factory=Profile)

    def __post_init__(self):
        self.tau = np.asarray(self.tau, float)
        if self.lam <= 0:
            raise ParameterError("lam must be positive")
        if abs(self.tau[-1]) > 1e-12:
            raise ParameterError("tau must be tangent to the boundary")
        g0 = self.chart.metric(np.zeros(DIM))
        nt = float(np.sqrt(self.tau @ g0 @ self.tau))
        if abs(nt - 1.0) > 1e-8:
            raise ParameterError("tau must be a unit vector")
        tmax, nmax = self.chart.extent
        R = self.profile.radius
        if np.sqrt(self.lam) * R > tmax or min(np.sqrt(self.lam) * R, 40 * self.lam) > nmax:
            raise ChartError("probe support does not fit in the boundary chart")

    @property
    def tau_covector(self) -> np.ndarray:
        return self.chart.metric(np.zeros(DIM)) @ self.tau

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        lam = self.lam
        tc = self.tau_covector
        phase = (x[..., :2] @ tc[:2] + 1j * x[..., 2]) / lam
        return self.profile.value(x / np.sqrt(lam)) * np.exp(1j * phase)

    def gradient(self, x) -> np.ndarray:
        """``d v0`` as ``(..., 3)`` covector components."""
        x = np.asarray(x, float)
        lam = self.lam
        sl = np.sqrt(lam)
        tc = self.tau_covector
        phase = (x[..., :2] @ tc[:2] + 1j * x[..., 2]) / lam
        e = np.exp(1j * phase)
        eta = self.profile.value(x / sl)
        deta = self.profile.gradient(x / sl) / sl
        dphase = np.array([tc[0], tc[1], 1j]) / lam
        return (deta + 1j * eta[..., None] * dphase) * e[..., None]


# ---------------------------------------------------------------------------
# quadrature in scaled variables


def _gl(a, b, n_panels, n_per=8):
    xg, wg = np.polynomial.legendre.leggauss(n_per)
    edges = np.linspace(a, b, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + half[:, None] * xg).ravel(), (half[:, None] * wg).ravel()


def scaled_nodes(probe: BoundaryProbe, n_tan: int = 6, n_nor: int = 6, z_max: float = 24.0):
    """Physical nodes ``(x', x_n)`` and weights (coordinate measure) of the probe support."""
    lam = probe.lam
    R = probe.profile.radius
    y, wy = _gl(-R, R, n_tan)
    # x_n = lam z; the profile cuts off at x_n = R lam^{1/2}
    z_hi = min(z_max, R / np.sqrt(lam))
    z, wz = _gl(0.0, z_hi, n_nor)
    Y1, Y2, Z = np.meshgrid(y, y, z, indexing="ij")
    W = (wy[:, None, None] * wy[None, :, None] * wz[None, None, :]) * lam * lam ** ((DIM - 1) / 2.0)
    X = np.stack([np.sqrt(lam) * Y1, np.sqrt(lam) * Y2, lam * Z], axis=-1)
    return X, W


def probe_norms(probe: BoundaryProbe) -> dict:
    """``||v0||``, ``||x_n dv0||`` and ``||dv0||`` in ``L^2(M)``."""
    X, W = scaled_nodes(probe)
    g = probe.chart.metric(X)
    ginv = np.linalg.inv(g)
    dV = W * np.sqrt(np.linalg.det(g))
    v = probe.evaluate(X)
    dv = probe.gradient(X)
    dv2 = np.real(np.einsum("...i,...ij,...j->...", dv, ginv, np.conj(dv)))
    return {
        "v0": float(np.sqrt(np.sum(np.abs(v) ** 2 * dV))),
        "xn_dv0": float(np.sqrt(np.sum(X[..., 2] ** 2 * dv2 * dV))),
        "dv0": float(np.sqrt(np.sum(dv2 * dV))),
    }


def rate_exponents(chart: BoundaryNormalChart, tau, lams: Sequence[float], profile: Optional[Profile] = None) -> dict:
    """Fitted ``lam``-exponents of the three probe norms."""
    profile = Profile() if profile is None else profile
    rows = [probe_norms(BoundaryProbe(chart, tau, lam, profile)) for lam in lams]
    return {k: fit_exponent(lams, [r[k] for r in rows]) for k in rows[0]}


def expected_exponents(n: int = DIM) -> dict:
    base = (n - 1) / 4.0 + 0.5
    return {"v0": base, "xn_dv0": base, "dv0": base - 1.0}


def oscillatory_data(probe: BoundaryProbe, nodes_per_wavelength: int = 12, n_normal: int = 41) -> SampledField:
    """``v0`` sampled on a uniform half-space grid covering its support."""
    lam = probe.lam
    R = probe.profile.radius
    half = R * np.sqrt(lam)
    step = 2 * np.pi * lam / nodes_per_wavelength
    n = int(np.ceil(2 * half / step)) + 1
    if n > 2001:
        raise ParameterError("lam too small for a uniform grid; use probe_norms")
    top = min(half, 24 * lam)
    grid = Grid.uniform([-half, -half, 0.0], [half, half, top], [n, n, n_normal])
    X = grid.points()
    geom = GridMetric(grid, metric=probe.chart.metric(X))
    return SampledField(geom, probe.evaluate(X))


def _pull_back(probe: BoundaryProbe, A, X) -> np.ndarray:
    """Potential components in boundary normal coordinates at ``X``, ``(..., 3)``."""
    P = probe.chart.to_chart(X)
    if isinstance(A, SampledOneForm):
        comps = PointSampler(A.grid, A.components)(P)
    else:
        comps = np.asarray(A(P))
    comps = np.moveaxis(comps, 0, -1)
    J = probe.chart.jacobian(X)
    return np.einsum("...ia,...i->...a", J, comps)


def I1(probe: BoundaryProbe, A) -> complex:
    """``lam^{-(n-1)/2} int i <A, v0 d conj(v0) - conj(v0) d v0>_g dV``.

    ``A`` is a ``SampledOneForm`` on the ambient chart or a callable
    ``points (..., 3) -> (3, ...)``.
    """
    X, W = scaled_nodes(probe)
    g = probe.chart.metric(X)
    ginv = np.linalg.inv(g)
    dV = W * np.sqrt(np.linalg.det(g))
    v = probe.evaluate(X)
    dv = probe.gradient(X)
    current = v[..., None] * np.conj(dv) - np.conj(v)[..., None] * dv
    Ab = _pull_back(probe, A, X)
    integrand = 1j * np.einsum("...i,...ij,...j->...", Ab, ginv, current)
    return complex(np.sum(integrand * dV) * probe.lam ** (-(DIM - 1) / 2.0))


@dataclass
class RecoveryReport:
    lams: np.ndarray
    values: np.ndarray
    estimate: complex
    converged: bool
    order: float

    def rows(self) -> list:
        return [(float(l), float(v.real), float(v.imag), self.estimate) for l, v in zip(self.lams, self.values)]


def richardson(lams, values, degree: int = 1) -> complex:
    """Polynomial extrapolation of ``values(lam)`` to ``lam = 0``."""
    lams = np.asarray(lams, float)
    values = np.asarray(values, complex)
    V = np.vander(lams, degree + 1, increasing=True)
    cr = np.linalg.lstsq(V, values.real, rcond=None)[0]
    ci = np.linalg.lstsq(V, values.imag, rcond=None)[0]
    return complex(cr[0], ci[0])


def tangential_recovery(
    chart: BoundaryNormalChart,
    tau,
    A,
    lams: Sequence[float] = (4e-3, 2e-3, 1e-3),
    profile: Optional[Profile] = None,
    degree: int = 1,
) -> RecoveryReport:
    """Estimate ``<A(x0), tau>`` from ``I1`` along a decreasing ``lam`` sequence."""
    profile = Profile() if profile is None else profile
    lams = np.asarray(sorted(lams, reverse=True), float)
    vals = np.array([I1(BoundaryProbe(chart, tau, lam, profile), A) for lam in lams])
    diffs = np.abs(np.diff(vals))
    scale = max(np.max(np.abs(vals)), 1e-300)
    monotone = bool(np.all(diffs[1:] <= diffs[:-1] * 1.05 + 1e-12 * scale)) if len(diffs) > 1 else True
    est = richardson(lams, vals, degree) if monotone and len(lams) > degree else complex(vals[-1])
    order = np.nan
    if len(diffs) > 1 and np.all(diffs > 1e-14 * scale):
        order = float(np.log(diffs[0] / diffs[1]) / np.log(lams[0] / lams[1]))
    return RecoveryReport(lams, vals, est, monotone, order)

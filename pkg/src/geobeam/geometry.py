"""Coordinate charts, geodesic flow and transversal coordinate systems.

Charts are vectorised: ``metric_fn`` maps an array of points of shape
``(..., d)`` to metric matrices of shape ``(..., d, d)``.  Derivatives of
user metrics are taken with fourth order central differences whose step is a
fixed fraction of the domain diameter, unless the chart carries analytic
hooks (``christoffel_fn``, ``curvature_fn``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import (
    ConditioningError,
    ConfigurationError,
    DomainError,
    FrameError,
    GeometryError,
    IntegrationError,
    UnsupportedGeometryError,
)

ArrayFn = Callable[[np.ndarray], np.ndarray]

NON_TANGENTIAL = "non_tangential"
TANGENTIAL = "tangential"
TRAPPED = "trapped"


@dataclass(frozen=True)
class MetricChart:
    dim: int
    metric_fn: ArrayFn
    boundary_fn: ArrayFn
    domain: dict
    conformal_factor: Optional[ArrayFn] = None
    christoffel_fn: Optional[ArrayFn] = None
    curvature_fn: Optional[ArrayFn] = None
    name: str = "chart"
    fd_step: float = 1e-4
    tangency: float = 0.05
    max_length: Optional[float] = None
    flat: bool = False

    @property
    def diameter(self) -> float:
        kind = self.domain["kind"]
        if kind == "disk":
            return 2.0 * float(self.domain["radius"])
        if kind == "box":
            lo, hi = np.asarray(self.domain["lo"]), np.asarray(self.domain["hi"])
            return float(np.linalg.norm(hi - lo))
        if kind == "product":
            return float(self.domain["diameter"])
        raise GeometryError(f"unknown domain kind {kind!r}")

    @property
    def step(self) -> float:
        return self.fd_step * self.diameter

    @property
    def length_cap(self) -> float:
        return self.max_length if self.max_length is not None else 20.0 * self.diameter

    def metric(self, x) -> np.ndarray:
        return np.asarray(self.metric_fn(np.asarray(x, dtype=float)), dtype=float)

    def inverse_metric(self, x) -> np.ndarray:
        return np.linalg.inv(self.metric(x))

    def conformal(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.conformal_factor is None:
            return np.ones(x.shape[:-1])
        return np.asarray(self.conformal_factor(x), dtype=float)

    def boundary(self, x) -> np.ndarray:
        return np.asarray(self.boundary_fn(np.asarray(x, dtype=float)), dtype=float)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return self.boundary(x) <= tol

    def boundary_gradient(self, x) -> np.ndarray:
        """Euclidean gradient of the boundary function (a covector)."""
        return _fd_gradient(self.boundary_fn, np.asarray(x, dtype=float), self.step)

    def boundary_points(self, n: int) -> np.ndarray:
        kind = self.domain["kind"]
        if kind == "disk":
            c = np.asarray(self.domain.get("center", np.zeros(self.dim)), dtype=float)
            r = float(self.domain["radius"])
            ang = 2.0 * np.pi * np.arange(n) / n
            return c + r * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        raise GeometryError("boundary sampling is only available for disk domains")


# ---------------------------------------------------------------------------
# chart factories


def _disk_domain(radius, center=(0.0, 0.0)):
    return {"kind": "disk", "radius": float(radius), "center": tuple(float(c) for c in center)}


def _disk_boundary(radius, center=(0.0, 0.0)):
    c = np.asarray(center, dtype=float)

    def b(x):
        return np.linalg.norm(np.asarray(x) - c, axis=-1) - radius

    return b


def _box_boundary(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)

    def b(x):
        x = np.asarray(x)
        return np.max(np.maximum(lo - x, x - hi), axis=-1)

    return b


def _identity_metric(d):
    def g(x):
        x = np.asarray(x)
        return np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy()

    return g


def _zero_christoffel(d):
    def gam(x):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1] + (d, d, d))

    return gam


def euclidean_disk(radius: float = 1.0, center=(0.0, 0.0), **kw) -> MetricChart:
    return MetricChart(
        dim=2,
        metric_fn=_identity_metric(2),
        boundary_fn=_disk_boundary(radius, center),
        domain=_disk_domain(radius, center),
        christoffel_fn=_zero_christoffel(2),
        curvature_fn=lambda x: np.zeros(np.asarray(x).shape[:-1]),
        name="euclidean_disk",
        flat=True,
        **kw,
    )


def conformal_disk(factor: ArrayFn, radius: float = 1.0, **kw) -> MetricChart:
    """Disk with metric ``factor(x) * delta``."""

    def g(x):
        x = np.asarray(x)
        return factor(x)[..., None, None] * np.eye(2)

    return MetricChart(
        dim=2,
        metric_fn=g,
        boundary_fn=_disk_boundary(radius),
        domain=_disk_domain(radius),
        name="conformal_disk",
        **kw,
    )


def cap_radius(alpha0: float) -> float:
    """Stereographic radius of the cap ``{x_n >= alpha0}`` on the unit sphere."""
    if not -1.0 < alpha0 < 1.0:
        raise GeometryError("cap height must lie in (-1, 1)")
    return float(np.sqrt((1.0 - alpha0) / (1.0 + alpha0)))


def spherical_cap(alpha0: float = 0.5, **kw) -> MetricChart:
    """Cap ``{x_n >= alpha0}`` of the unit sphere in stereographic coordinates.

    The projection is taken from the south pole, so the metric is
    ``4 / (1 + |u|^2)^2 * delta`` and the cap is the disk
    ``|u|^2 <= (1 - alpha0) / (1 + alpha0)``.
    """
    R = cap_radius(alpha0)

    def g(x):
        x = np.asarray(x)
        f = 4.0 / (1.0 + np.sum(x * x, axis=-1)) ** 2
        return f[..., None, None] * np.eye(2)

    def gam(x):
        # conformal metric e^{2w} delta with w = log 2 - log(1 + |u|^2)
        x = np.asarray(x)
        dw = -2.0 * x / (1.0 + np.sum(x * x, axis=-1))[..., None]
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        eye = np.eye(2)
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    out[..., i, j, k] = (
                        eye[i, j] * dw[..., k] + eye[i, k] * dw[..., j] - eye[j, k] * dw[..., i]
                    )
        return out

    return MetricChart(
        dim=2,
        metric_fn=g,
        boundary_fn=_disk_boundary(R),
        domain=_disk_domain(R),
        christoffel_fn=gam,
        curvature_fn=lambda x: np.ones(np.asarray(x).shape[:-1]),
        name=f"spherical_cap({alpha0:g})",
        **kw,
    )


def tabulated_disk(axes, values, radius: float = 1.0, **kw) -> MetricChart:
    """Disk whose metric is cubically interpolated from samples ``values[i, j] = g(x_i, y_j)``."""
    from scipy.interpolate import RegularGridInterpolator

    values = np.asarray(values, dtype=float)
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    if values.shape != (len(axes[0]), len(axes[1]), 2, 2):
        raise ConfigurationError("tabulated metric must have shape (nx, ny, 2, 2)")
    if np.max(np.abs(values - np.swapaxes(values, -1, -2))) > 1e-12:
        raise ConfigurationError("tabulated metric is not symmetric")
    if np.min(np.linalg.eigvalsh(values)) <= 0:
        raise ConfigurationError("tabulated metric is not positive definite")
    for a in axes:
        if a[0] > -radius or a[-1] < radius:
            raise ConfigurationError("tabulated metric does not cover the disk")
    interp = RegularGridInterpolator(axes, values.reshape(values.shape[:2] + (4,)), method="cubic")

    def g(x):
        x = np.asarray(x, dtype=float)
        return interp(x.reshape(-1, 2)).reshape(x.shape[:-1] + (2, 2))

    return MetricChart(
        dim=2,
        metric_fn=g,
        boundary_fn=_disk_boundary(radius),
        domain=_disk_domain(radius),
        name="tabulated_disk",
        **kw,
    )


def chart_from_config(opts: dict, base_dir=None) -> MetricChart:
    """Chart from key-value settings.

    ``kind`` is one of ``euclidean_disk`` (``radius``), ``conformal_disk``
    (``radius``, ``factor``: an expression in ``x1, x2`` or callable),
    ``spherical_cap`` (``alpha0``) or ``tabulated`` (``file``: an ``.npz``
    with arrays ``x``, ``y``, ``g``; ``radius``).  ``tangency`` is accepted
    by every kind.
    """
    from pathlib import Path

    opts = dict(opts)
    kind = opts.pop("kind", "euclidean_disk")
    kw = {}
    if "tangency" in opts:
        kw["tangency"] = float(opts.pop("tangency"))
    radius = float(opts.pop("radius", 1.0))
    if kind == "euclidean_disk":
        chart = euclidean_disk(radius, **kw)
    elif kind == "conformal_disk":
        factor = opts.pop("factor", None)
        if factor is None:
            raise ConfigurationError("conformal_disk needs a factor")
        if isinstance(factor, str):
            from .expressions import Expression

            factor = Expression(factor)
        chart = conformal_disk(factor, radius, **kw)
    elif kind == "spherical_cap":
        chart = spherical_cap(float(opts.pop("alpha0", 0.5)), **kw)
    elif kind == "tabulated":
        path = opts.pop("file", None)
        if path is None:
            raise ConfigurationError("tabulated chart needs a file")
        path = Path(path) if base_dir is None else Path(base_dir) / path
        if not path.is_file():
            raise ConfigurationError(f"metric file {str(path)!r} does not exist")
        data = np.load(path)
        chart = tabulated_disk((data["x"], data["y"]), data["g"], radius, **kw)
    else:
        raise ConfigurationError(f"unknown chart kind {kind!r}")
    if opts:
        raise ConfigurationError(f"unused chart settings: {sorted(opts)}")
    return chart


def stereo_to_sphere(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    s = np.sum(u * u, axis=-1)
    return np.concatenate([2.0 * u / (1.0 + s)[..., None], ((1.0 - s) / (1.0 + s))[..., None]], axis=-1)


def polar_plane(r_range=(0.5, 3.0), theta_range=(-1.5, 1.5), **kw) -> MetricChart:
    """Euclidean plane in polar coordinates ``dr^2 + r^2 dtheta^2``."""

    def g(x):
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = x[..., 0] ** 2
        return out

    lo, hi = (r_range[0], theta_range[0]), (r_range[1], theta_range[1])
    return MetricChart(
        dim=2,
        metric_fn=g,
        boundary_fn=_box_boundary(lo, hi),
        domain={"kind": "box", "lo": lo, "hi": hi},
        name="polar_plane",
        **kw,
    )


def round_sphere_polar(theta_range=(0.2, 2.9), phi_range=(-3.0, 3.0), **kw) -> MetricChart:
    """Round sphere in colatitude/longitude ``dtheta^2 + sin^2(theta) dphi^2``."""

    def g(x):
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = np.sin(x[..., 0]) ** 2
        return out

    lo, hi = (theta_range[0], phi_range[0]), (theta_range[1], phi_range[1])
    return MetricChart(
        dim=2,
        metric_fn=g,
        boundary_fn=_box_boundary(lo, hi),
        domain={"kind": "box", "lo": lo, "hi": hi},
        curvature_fn=lambda x: np.ones(np.asarray(x).shape[:-1]),
        name="round_sphere_polar",
        **kw,
    )


def product_chart(base: MetricChart, x1_range=(-1.0, 1.0), factor: Optional[ArrayFn] = None) -> MetricChart:
    """Chart of ``R x M0`` with metric ``c (e + g0)``; ``x[..., 0]`` is ``x1``."""
    d = base.dim + 1

    def g(x):
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (d, d))
        out[..., 0, 0] = 1.0
        out[..., 1:, 1:] = base.metric(x[..., 1:])
        if factor is not None:
            out = out * np.asarray(factor(x))[..., None, None]
        return out

    def b(x):
        x = np.asarray(x)
        lo, hi = x1_range
        return np.maximum(base.boundary(x[..., 1:]), np.maximum(lo - x[..., 0], x[..., 0] - hi))

    return MetricChart(
        dim=d,
        metric_fn=g,
        boundary_fn=b,
        domain={"kind": "product", "x1_range": tuple(x1_range), "base": base.domain, "diameter": float(np.hypot(x1_range[1] - x1_range[0], base.diameter))},
        conformal_factor=factor,
        name=f"product({base.name})",
        flat=base.flat and factor is None,
    )




# ---------------------------------------------------------------------------
# differential geometry


def _fd_gradient(fn: ArrayFn, x: np.ndarray, h: float) -> np.ndarray:
    d = x.shape[-1]
    out = np.empty(x.shape, dtype=float)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        out[..., k] = (-fn(x + 2 * e) + 8 * fn(x + e) - 8 * fn(x - e) + fn(x - 2 * e)) / (12 * h)
    return out


def metric_derivatives(chart: MetricChart, x: np.ndarray) -> np.ndarray:
    """``dg[..., k, i, j] = d_k g_ij`` by fourth order central differences."""
    x = np.asarray(x, dtype=float)
    h = chart.step
    d = chart.dim
    out = np.empty(x.shape[:-1] + (d, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        out[..., k, :, :] = (
            -chart.metric(x + 2 * e) + 8 * chart.metric(x + e) - 8 * chart.metric(x - e) + chart.metric(x - 2 * e)
        ) / (12 * h)
    return out


def _christoffel_raw(chart: MetricChart, x: np.ndarray) -> np.ndarray:
    if chart.christoffel_fn is not None:
        return np.asarray(chart.christoffel_fn(x), dtype=float)
    dg = metric_derivatives(chart, x)
    ginv = np.linalg.inv(chart.metric(x))
    # lowered symbol: G_ljk = 1/2 (d_j g_lk + d_k g_lj - d_l g_jk)
    low = 0.5 * (
        np.einsum("...jlk->...ljk", dg) + np.einsum("...klj->...ljk", dg) - dg
    )
    return np.einsum("...il,...ljk->...ijk", ginv, low)


def christoffel(chart: MetricChart, x) -> np.ndarray:
    """Christoffel symbols ``Gamma[i, j, k]`` of the chart metric at ``x``."""
    x = np.asarray(x, dtype=float)
    if np.any(chart.boundary(x) > 1e-9 * chart.diameter):
        raise DomainError("point lies outside the chart domain")
    g = chart.metric(x)
    if np.any(np.linalg.cond(g) > 1e12):
        raise ConditioningError("metric is nearly singular")
    return _christoffel_raw(chart, x)


def gaussian_curvature(chart: MetricChart, x) -> np.ndarray:
    """Gaussian curvature of a two dimensional chart."""
    x = np.asarray(x, dtype=float)
    if chart.curvature_fn is not None:
        return np.asarray(chart.curvature_fn(x), dtype=float)
    if chart.dim != 2:
        raise UnsupportedGeometryError("curvature is implemented for surfaces only")
    h = 10.0 * chart.step
    gam = _christoffel_raw(chart, x)
    dgam = np.empty(x.shape[:-1] + (2, 2, 2, 2))  # [..., m, i, j, k] = d_m Gamma^i_jk
    for m in range(2):
        e = np.zeros(2)
        e[m] = h
        dgam[..., m, :, :, :] = (
            -_christoffel_raw(chart, x + 2 * e)
            + 8 * _christoffel_raw(chart, x + e)
            - 8 * _christoffel_raw(chart, x - e)
            + _christoffel_raw(chart, x - 2 * e)
        ) / (12 * h)
    # R^i_{jkl} = d_k G^i_lj - d_l G^i_kj + G^i_km G^m_lj - G^i_lm G^m_kj, with (j,k,l) = (1,0,1)
    i_r = (
        dgam[..., 0, :, 1, 1]
        - dgam[..., 1, :, 0, 1]
        + np.einsum("...im,...m->...i", gam[..., :, 0, :], gam[..., :, 1, 1])
        - np.einsum("...im,...m->...i", gam[..., :, 1, :], gam[..., :, 0, 1])
    )
    g = chart.metric(x)
    r0101 = np.einsum("...i,...i->...", g[..., 0, :], i_r)
    return r0101 / np.linalg.det(g)


def _geodesic_rhs(chart: MetricChart, x: np.ndarray, v: np.ndarray):
    gam = _christoffel_raw(chart, x)
    return v, -np.einsum("...ijk,...j,...k->...i", gam, v, v)


def _rk4(chart: MetricChart, x, v, dt):
    dt = np.asarray(dt, dtype=float)
    if dt.ndim:
        dt = dt[..., None]
    k1x, k1v = _geodesic_rhs(chart, x, v)
    k2x, k2v = _geodesic_rhs(chart, x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
    k3x, k3v = _geodesic_rhs(chart, x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
    k4x, k4v = _geodesic_rhs(chart, x + dt * k3x, v + dt * k3v)
    return (
        x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
        v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v),
    )


def flow(chart: MetricChart, x, v, length, n_sub: int):
    """Geodesic flow for ``length`` (array allowed) using ``n_sub`` RK4 steps."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    dt = np.asarray(length, dtype=float) / n_sub
    for _ in range(n_sub):
        x, v = _rk4(chart, x, v, dt)
    return x, v


def norm_g(chart: MetricChart, x, v) -> np.ndarray:
    g = chart.metric(x)
    return np.sqrt(np.einsum("...i,...ij,...j->...", v, g, v))


def normal_cosine(chart: MetricChart, x, v) -> np.ndarray:
    """``<v, nu>_g`` for the outward unit normal ``nu`` at a boundary point."""
    x = np.asarray(x, dtype=float)
    db = chart.boundary_gradient(x)
    ginv = chart.inverse_metric(x)
    ndb = np.sqrt(np.einsum("...i,...ij,...j->...", db, ginv, db))
    if np.any(ndb < 1e-12):
        raise GeometryError("boundary function has vanishing gradient")
    return np.einsum("...i,...i->...", db, v) / ndb


@dataclass
class GeodesicPath:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    exit_time: float
    classification: str
    start: tuple = field(default_factory=tuple)
    step: float = 0.0

    @property
    def length(self) -> float:
        return float(self.t[-1])

    @property
    def exit_point(self) -> np.ndarray:
        return self.x[-1]

    def _spline(self):
        if not hasattr(self, "_sp"):
            self._sp = CubicHermiteSpline(self.t, self.x, self.v, axis=0)
            self._dsp = self._sp.derivative()
        return self._sp, self._dsp

    def evaluate(self, s):
        """Position and velocity at arclength ``s`` (cubic Hermite interpolation)."""
        if len(self.t) < 2:
            s = np.asarray(s, dtype=float)
            return np.broadcast_to(self.x[0], s.shape + self.x.shape[1:]), np.broadcast_to(self.v[0], s.shape + self.v.shape[1:])
        sp, dsp = self._spline()
        return sp(s), dsp(s)

    def speed_drift(self, chart: MetricChart) -> float:
        return float(np.max(np.abs(norm_g(chart, self.x, self.v) - 1.0)))


def integrate_geodesic(
    chart: MetricChart,
    x0,
    v0,
    step: float = 0.01,
    max_length: Optional[float] = None,
    tangency: Optional[float] = None,
    bisect_tol: float = 1e-10,
) -> GeodesicPath:
    """Integrate a unit speed geodesic from a boundary point until it exits.

    Fixed-step RK4; the exit is located by bisection on the step length so
    that the boundary function changes sign within ``bisect_tol``.
    """
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    tangency = chart.tangency if tangency is None else tangency
    max_length = chart.length_cap if max_length is None else max_length
    if abs(norm_g(chart, x0, v0) - 1.0) > 1e-8:
        raise ValueError("initial velocity must have unit length")
    cos0 = float(normal_cosine(chart, x0, v0))
    if cos0 > 0:
        raise ValueError("initial velocity points outward")
    if abs(cos0) <= tangency:
        return GeodesicPath(np.array([0.0]), x0[None], v0[None], 0.0, TANGENTIAL, (x0, v0), step)

    ts, xs, vs = [0.0], [x0], [v0]
    x, v, t = x0, v0, 0.0
    while True:
        xn, vn = _rk4(chart, x, v, step)
        if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(vn))):
            raise IntegrationError("geodesic state blew up")
        if chart.boundary(xn) > 0.0:
            lo, hi = 0.0, step
            while hi - lo > bisect_tol:
                mid = 0.5 * (lo + hi)
                xm, _ = _rk4(chart, x, v, mid)
                if chart.boundary(xm) > 0.0:
                    hi = mid
                else:
                    lo = mid
            xe, ve = _rk4(chart, x, v, hi)
            ts.append(t + hi)
            xs.append(xe)
            vs.append(ve)
            cos_e = float(normal_cosine(chart, xe, ve))
            cls = NON_TANGENTIAL if cos_e > tangency else TANGENTIAL
            return GeodesicPath(np.array(ts), np.array(xs), np.array(vs), t + hi, cls, (x0, v0), step)
        t += step
        x, v = xn, vn
        ts.append(t)
        xs.append(x)
        vs.append(v)
        if t > max_length:
            return GeodesicPath(np.array(ts), np.array(xs), np.array(vs), np.inf, TRAPPED, (x0, v0), step)


def orthonormal_frame(chart: MetricChart, x, first) -> tuple[np.ndarray, np.ndarray]:
    """g-orthonormal pair ``(e1, e2)`` with ``e1`` parallel to ``first``."""
    x = np.asarray(x, dtype=float)
    g = chart.metric(x)
    e1 = np.asarray(first, dtype=float)
    e1 = e1 / np.sqrt(np.einsum("...i,...ij,...j->...", e1, g, e1))[..., None]
    w = np.stack([-e1[..., 1], e1[..., 0]], axis=-1)
    w = w - np.einsum("...i,...ij,...j->...", w, g, e1)[..., None] * e1
    w = w / np.sqrt(np.einsum("...i,...ij,...j->...", w, g, w))[..., None]
    return e1, w


def inward_normal(chart: MetricChart, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    db = chart.boundary_gradient(x)
    ginv = chart.inverse_metric(x)
    n = -np.einsum("...ij,...j->...i", ginv, db)
    return n / norm_g(chart, x, n)[..., None]


def boundary_fan(
    chart: MetricChart,
    n_points: int,
    n_dirs: int,
    step: float = 0.01,
    tangency: Optional[float] = None,
) -> list[GeodesicPath]:
    """Geodesics from ``n_points`` boundary points in ``n_dirs`` inward directions.

    Directions make angles ``-pi/2 + pi (j + 1/2) / n_dirs`` with the inward
    normal; only non-tangential geodesics are kept.
    """
    tangency = chart.tangency if tangency is None else tangency
    pts = chart.boundary_points(n_points)
    angles = -0.5 * np.pi + np.pi * (np.arange(n_dirs) + 0.5) / n_dirs
    fan = []
    for p in pts:
        n, tvec = orthonormal_frame(chart, p, inward_normal(chart, p))
        for a in angles:
            if abs(np.cos(a)) <= tangency:
                continue
            v = np.cos(a) * n + np.sin(a) * tvec
            path = integrate_geodesic(chart, p, v, step=step, tangency=tangency)
            if path.classification == NON_TANGENTIAL:
                fan.append(path)
    if not fan:
        raise ConfigurationError("no non-tangential geodesics survive the tangency filter")
    return fan


@dataclass
class SimplicityReport:
    convex_boundary: bool
    no_conjugate_points: bool
    diffeomorphic_exp: Optional[bool]
    min_second_fundamental_form: float
    min_jacobi: float
    n_trapped: int

    @property
    def simple(self) -> bool:
        # exp is not checked independently; it is reported true exactly when
        # convexity and absence of conjugate points both hold
        return bool(self.diffeomorphic_exp)


def second_fundamental_form(chart: MetricChart, x) -> np.ndarray:
    """``II(T, T)`` of the boundary at ``x`` w.r.t. the inward normal (2-D charts).

    Positive values mean strictly convex.  Computed as the covariant Hessian
    of the boundary function on the unit tangent divided by ``|db|_g``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = chart.step
    b = chart.boundary_fn
    d = chart.dim
    hess = np.empty(x.shape[:-1] + (d, d))
    for j in range(d):
        ej = np.zeros(d)
        ej[j] = h
        hess[..., j, j] = (-b(x + 2 * ej) + 16 * b(x + ej) - 30 * b(x) + 16 * b(x - ej) - b(x - 2 * ej)) / (12 * h * h)
        for k in range(j + 1, d):
            ek = np.zeros(d)
            ek[k] = h
            val = (b(x + ej + ek) - b(x + ej - ek) - b(x - ej + ek) + b(x - ej - ek)) / (4 * h * h)
            hess[..., j, k] = hess[..., k, j] = val
    db = chart.boundary_gradient(x)
    gam = _christoffel_raw(chart, x)
    cov = hess - np.einsum("...ijk,...i->...jk", gam, db)
    ginv = chart.inverse_metric(x)
    ndb = np.sqrt(np.einsum("...i,...ij,...j->...", db, ginv, db))
    if np.any(ndb < 1e-12):
        raise GeometryError("non-smooth boundary sampling")
    nvec = -np.einsum("...ij,...j->...i", ginv, db) / ndb[..., None]
    _, tvec = orthonormal_frame(chart, x, nvec)
    return np.einsum("...j,...jk,...k->...", tvec, cov, tvec) / ndb


def jacobi_minimum(chart: MetricChart, path: GeodesicPath) -> float:
    """Minimum over ``(0, tau]`` of the normal Jacobi field with ``J(0)=0, J'(0)=1``,
    normalised by arclength so that flat geodesics give exactly 1."""
    if len(path.t) < 3:
        return 1.0
    L = path.length
    n = max(8, int(np.ceil(L / path.step)))
    s = np.linspace(0.0, L, n + 1)
    ds = L / n
    mids = 0.5 * (s[1:] + s[:-1])
    K_nodes = gaussian_curvature(chart, path.evaluate(s)[0])
    K_mid = gaussian_curvature(chart, path.evaluate(mids)[0])
    J, Jp = 0.0, 1.0
    worst = np.inf
    for i in range(n):
        k0, km, k1 = K_nodes[i], K_mid[i], K_nodes[i + 1]
        a1, b1 = Jp, -k0 * J
        a2, b2 = Jp + 0.5 * ds * b1, -km * (J + 0.5 * ds * a1)
        a3, b3 = Jp + 0.5 * ds * b2, -km * (J + 0.5 * ds * a2)
        a4, b4 = Jp + ds * b3, -k1 * (J + ds * a3)
        J = J + ds / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        Jp = Jp + ds / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        worst = min(worst, J / s[i + 1])
    return float(worst)


def check_simple(chart: MetricChart, n_boundary: int = 64, fan_points: int = 8, fan_dirs: int = 9, tol: float = 1e-6) -> SimplicityReport:
    if chart.dim != 2:
        raise UnsupportedGeometryError("simplicity checks need a two dimensional chart")
    pts = chart.boundary_points(n_boundary)
    II = second_fundamental_form(chart, pts)
    min_ii = float(np.min(II))
    convex = bool(min_ii > tol)

    min_j = np.inf
    trapped = 0
    pts_f = chart.boundary_points(fan_points)
    angles = -0.5 * np.pi + np.pi * (np.arange(fan_dirs) + 0.5) / fan_dirs
    for p in pts_f:
        n, tvec = orthonormal_frame(chart, p, inward_normal(chart, p))
        for a in angles:
            v = np.cos(a) * n + np.sin(a) * tvec
            path = integrate_geodesic(chart, p, v, step=0.01 * chart.diameter, tangency=0.0)
            if path.classification == TRAPPED:
                trapped += 1
                continue
            min_j = min(min_j, jacobi_minimum(chart, path))
    no_conj = bool(min_j > 0.0 and trapped == 0)
    diffeo = True if (convex and no_conj) else None
    return SimplicityReport(convex, no_conj, diffeo, min_ii, float(min_j), trapped)


# ---------------------------------------------------------------------------
# Fermi coordinates


@dataclass
class FermiFrame:
    """Fermi coordinates ``(t, y)`` along a geodesic of a surface chart."""

    chart: MetricChart
    base_geodesic: GeodesicPath
    half_width: float
    t_range: tuple
    fd_step: float
    n_normal: int = 8

    def _base(self, t, k=None):
        geo = self.base_geodesic
        t = np.asarray(t, dtype=float)
        if k is None:
            k = self._knot(t)
        x0 = geo.x[k]
        v0 = geo.v[k]
        dt = t - geo.t[k]
        n_sub = max(1, int(np.ceil(np.max(np.abs(dt)) / max(geo.step, 1e-12)))) if dt.size else 1
        if self.chart.flat:
            return x0 + dt[..., None] * v0, np.broadcast_to(v0, x0.shape).copy()
        return flow(self.chart, x0, v0, dt, n_sub)

    def _knot(self, t):
        geo = self.base_geodesic
        idx = np.searchsorted(geo.t, np.asarray(t), side="right") - 1
        return np.clip(idx, 0, len(geo.t) - 1)

    def chart_map(self, t, y, k=None) -> np.ndarray:
        t, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float))
        xb, vb = self._base(t, k)
        _, nb = orthonormal_frame(self.chart, xb, vb)
        if self.chart.flat:
            return xb + y[..., None] * nb
        x, _ = flow(self.chart, xb, nb, y, self.n_normal)
        return x

    def jacobian(self, t, y, exact_axis: bool = True) -> np.ndarray:
        """``J[..., :, 0] = d x / d t``, ``J[..., :, 1] = d x / d y``.

        On the axis the exact frame ``(gamma', n)`` is used unless
        ``exact_axis`` is False (difference stencils need one consistent rule).
        """
        t, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float))
        k = self._knot(t)
        h = self.fd_step
        f = lambda tt, yy: self.chart_map(tt, yy, k)
        jt = (-f(t + 2 * h, y) + 8 * f(t + h, y) - 8 * f(t - h, y) + f(t - 2 * h, y)) / (12 * h)
        jy = (-f(t, y + 2 * h) + 8 * f(t, y + h) - 8 * f(t, y - h) + f(t, y - 2 * h)) / (12 * h)
        on_axis = y == 0.0
        if exact_axis and np.any(on_axis):
            xb, vb = self._base(t, k)
            _, nb = orthonormal_frame(self.chart, xb, vb)
            jt = np.where(on_axis[..., None], vb, jt)
            jy = np.where(on_axis[..., None], nb, jy)
        return np.stack([jt, jy], axis=-1)

    def metric_in_frame(self, t, y, exact_axis: bool = True) -> np.ndarray:
        x = self.chart_map(t, y)
        J = self.jacobian(t, y, exact_axis)
        return np.einsum("...ia,...ij,...jb->...ab", J, self.chart.metric(x), J)

    def inverse_map(self, x, tol: float = 1e-13, max_iter: int = 40) -> np.ndarray:
        """Chart points to ``(t, y)`` by Newton iteration."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        geo = self.base_geodesic
        d2 = np.sum((x[:, None, :] - geo.x[None, :, :]) ** 2, axis=-1)
        k = np.argmin(d2, axis=1)
        g = self.chart.metric(geo.x[k])
        dx = x - geo.x[k]
        _, nk = orthonormal_frame(self.chart, geo.x[k], geo.v[k])
        t = geo.t[k] + np.einsum("ni,nij,nj->n", dx, g, geo.v[k])
        y = np.einsum("ni,nij,nj->n", dx, g, nk)
        for _ in range(max_iter):
            r = self.chart_map(t, y) - x
            J = self.jacobian(t, y)
            delta = np.linalg.solve(J, r[..., None])[..., 0]
            t = t - delta[:, 0]
            y = y - delta[:, 1]
            if np.max(np.abs(delta)) < tol:
                break
        return np.stack([t, y], axis=-1)

    def source_matrix(self, t) -> np.ndarray:
        """Riccati source ``F(t) = -1/2 d_y^2 g^{tt}(t, 0)`` as ``(..., 1, 1)`` arrays."""
        t = np.asarray(t, dtype=float)
        dy = 100.0 * self.fd_step
        ginv = lambda yy: np.linalg.inv(self.metric_in_frame(t, np.full_like(t, yy), exact_axis=False))[..., 0, 0]
        d2 = (-ginv(2 * dy) + 16 * ginv(dy) - 30 * ginv(0.0) + 16 * ginv(-dy) - ginv(-2 * dy)) / (12 * dy * dy)
        return (-0.5 * d2)[..., None, None]


def fermi_coordinates(chart: MetricChart, geo: GeodesicPath, half_width: float, extension: float = 0.0, n_check: int = 9) -> FermiFrame:
    if chart.dim != 2:
        raise UnsupportedGeometryError("Fermi frames are built on two dimensional transversal charts")
    if geo.classification != NON_TANGENTIAL:
        raise GeometryError("Fermi frames need a non-tangential geodesic")
    if half_width <= 0:
        raise FrameError("half width must be positive")
    frame = FermiFrame(
        chart=chart,
        base_geodesic=geo,
        half_width=float(half_width),
        t_range=(-extension, geo.length + extension),
        fd_step=1e-4 * chart.diameter,
    )
    ts = np.linspace(frame.t_range[0], frame.t_range[1], n_check)
    for yy in (-half_width, -0.5 * half_width, 0.5 * half_width, half_width):
        G = frame.metric_in_frame(ts, np.full_like(ts, yy))
        ev = np.linalg.eigvalsh(G)
        J = frame.jacobian(ts, np.full_like(ts, yy))
        if np.min(ev) < 1e-3 or np.min(np.linalg.det(J)) <= 1e-3 * np.sqrt(np.max(ev)):
            raise FrameError("tube too wide: frame metric degenerates")
    return frame


# ---------------------------------------------------------------------------
# polar normal coordinates


@dataclass
class PolarNormalChart:
    chart: MetricChart
    center: np.ndarray
    frame: tuple
    n_sub: int = 64

    def from_polar(self, r, theta) -> np.ndarray:
        r, theta = np.broadcast_arrays(np.asarray(r, float), np.asarray(theta, float))
        e1, e2 = self.frame
        u = np.cos(theta)[..., None] * e1 + np.sin(theta)[..., None] * e2
        if self.chart.flat:
            return self.center + r[..., None] * u
        x0 = np.broadcast_to(self.center, u.shape)
        x, _ = flow(self.chart, x0, u, r, self.n_sub)
        return x

    def to_polar(self, x, tol: float = 1e-13, max_iter: int = 40) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        e1, e2 = self.frame
        g0 = self.chart.metric(self.center)
        dx = x - self.center
        a = np.einsum("...i,ij,j->...", dx, g0, e1)
        b = np.einsum("...i,ij,j->...", dx, g0, e2)
        r, th = np.hypot(a, b), np.arctan2(b, a)
        if self.chart.flat:
            return np.stack([r, th], axis=-1)
        h = 1e-6 * self.chart.diameter
        for _ in range(max_iter):
            res = self.from_polar(r, th) - x
            jr = (self.from_polar(r + h, th) - self.from_polar(r - h, th)) / (2 * h)
            jt = (self.from_polar(r, th + h) - self.from_polar(r, th - h)) / (2 * h)
            J = np.stack([jr, jt], axis=-1)
            delta = np.linalg.solve(J, res[..., None])[..., 0]
            r = r - delta[..., 0]
            th = th - delta[..., 1]
            if np.max(np.abs(delta)) < tol:
                break
        return np.stack([r, th], axis=-1)

    def metric(self, r, theta) -> np.ndarray:
        """Metric in ``(r, theta)``; block form ``diag(1, m)`` by the Gauss lemma."""
        r, theta = np.broadcast_arrays(np.asarray(r, float), np.asarray(theta, float))
        h = 1e-4 * self.chart.diameter
        f = self.from_polar
        jr = (-f(r + 2 * h, theta) + 8 * f(r + h, theta) - 8 * f(r - h, theta) + f(r - 2 * h, theta)) / (12 * h)
        jt = (-f(r, theta + 2 * h) + 8 * f(r, theta + h) - 8 * f(r, theta - h) + f(r, theta - 2 * h)) / (12 * h)
        J = np.stack([jr, jt], axis=-1)
        return np.einsum("...ia,...ij,...jb->...ab", J, self.chart.metric(f(r, theta)), J)

    def m(self, r, theta) -> np.ndarray:
        return self.metric(r, theta)[..., 1, 1]


def polar_normal_coords(chart: MetricChart, center, report: Optional[SimplicityReport] = None) -> PolarNormalChart:
    if chart.dim != 2:
        raise UnsupportedGeometryError("polar normal coordinates need a two dimensional chart")
    if report is None:
        report = check_simple(chart)
    if not report.simple:
        raise UnsupportedGeometryError("chart is not simple")
    center = np.asarray(center, dtype=float)
    e1, e2 = orthonormal_frame(chart, center, np.array([1.0, 0.0]))
    return PolarNormalChart(chart, center, (e1, e2))

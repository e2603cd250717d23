"""Attenuated geodesic ray transform of (function, one-form) pairs.

    I(f, alpha)(gamma) = int_0^tau [f(gamma(t)) + alpha(gamma'(t))] e^{-lam t} dt

Inversion fits Legendre tensor coefficients for ``f`` and the two
components of ``alpha`` by penalised least squares.  The kernel of the
transform at ``lam = 0`` is ``(0, dp)`` with ``p = 0`` on the boundary, so
``alpha`` is only recovered up to such exact forms; ``d alpha`` and ``f``
are the recoverable quantities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from numpy.polynomial import legendre as L
from scipy import sparse
from scipy.integrate import simpson
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import spsolve

from .errors import ConditioningError, SamplingError, ShapeError
from .fields import Grid, GridMetric, SampledField, SampledOneForm, partial
from .geometry import GeodesicPath, MetricChart


@dataclass
class RayMeasurement:
    fan: list
    values: np.ndarray
    lam: float
    quadrature_step: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (len(self.fan),):
            raise ShapeError("one value per geodesic is required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measurement contains non-finite values")


def quadrature_nodes(path: GeodesicPath, step: float):
    """Odd number of equispaced arclength nodes on ``[0, tau]``."""
    n = max(3, int(np.ceil(path.length / step)))
    if n % 2:
        n += 1
    s = np.linspace(0.0, path.length, n + 1)
    x, v = path.evaluate(s)
    return s, x, v


def _interpolator(obj, values):
    grid = obj.grid
    return RegularGridInterpolator(grid.axes, values, method="linear", bounds_error=False, fill_value=None)


def _sampler_f(f):
    if f is None:
        return lambda x: np.zeros(x.shape[:-1])
    if callable(f):
        return f
    interp = _interpolator(f, f.values)
    grid = f.grid

    def fn(x):
        _inside(grid, x)
        return interp(x)

    return fn


def _sampler_alpha(alpha):
    if alpha is None:
        return lambda x: np.zeros((x.shape[-1],) + x.shape[:-1])
    if callable(alpha):
        return alpha
    grid = alpha.grid
    interps = [_interpolator(alpha, c) for c in alpha.components]

    def fn(x):
        _inside(grid, x)
        return np.stack([it(x) for it in interps])

    return fn


def _inside(grid: Grid, x):
    tol = 1e-9 * float(np.max(grid.hi - grid.lo))
    if np.any(x < grid.lo - tol) or np.any(x > grid.hi + tol):
        raise SamplingError("geodesic leaves the field grid")


FieldLike = Union[SampledField, Callable, None]
FormLike = Union[SampledOneForm, Callable, None]


def forward(f: FieldLike, alpha: FormLike, fan: list, lam: float = 0.0, step: float = 0.005) -> RayMeasurement:
    """Attenuated ray transform along every geodesic of ``fan``.

    ``f`` and ``alpha`` may be sampled (bilinear interpolation) or callables
    mapping points ``(..., 2)`` to values ``(...)`` resp. components ``(2, ...)``.
    """
    fs = _sampler_f(f)
    als = _sampler_alpha(alpha)
    vals = np.empty(len(fan), dtype=complex)
    for k, path in enumerate(fan):
        s, x, v = quadrature_nodes(path, step)
        integrand = (fs(x) + np.sum(als(x) * np.moveaxis(v, -1, 0), axis=0)) * np.exp(-lam * s)
        vals[k] = simpson(integrand, x=s)
    return RayMeasurement(fan, vals, lam, step)


def write_sinogram(meas: RayMeasurement, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "vx", "vy", "exit_time", "value_re", "value_im"])
        for geo, val in zip(meas.fan, meas.values):
            w.writerow([*(f"{c:.12g}" for c in geo.x[0]), *(f"{c:.12g}" for c in geo.v[0]), f"{geo.exit_time:.12g}", f"{val.real:.12g}", f"{val.imag:.12g}"])


# ---------------------------------------------------------------------------
# inversion


@dataclass
class LegendreBasis:
    """Tensor Legendre basis on the box ``center +- half`` of degree < ``n`` per axis."""

    n: int
    center: np.ndarray
    half: float

    def _scaled(self, x):
        x = np.asarray(x, dtype=float)
        u = (x - self.center) / self.half
        return u[..., 0], u[..., 1]

    def values(self, x) -> np.ndarray:
        u, w = self._scaled(x)
        return L.legvander2d(u, w, [self.n - 1, self.n - 1])

    def derivatives(self, x):
        """``(d/dx, d/dy)`` of every basis function."""
        u, w = self._scaled(x)
        vu = L.legvander(u, self.n - 1)
        vw = L.legvander(w, self.n - 1)
        eye = np.eye(self.n)
        du = np.stack([L.legval(u, L.legder(eye[i])) for i in range(self.n)], axis=-1)
        dw = np.stack([L.legval(w, L.legder(eye[i])) for i in range(self.n)], axis=-1)
        dx = (du[..., :, None] * vw[..., None, :]).reshape(u.shape + (-1,)) / self.half
        dy = (vu[..., :, None] * dw[..., None, :]).reshape(u.shape + (-1,)) / self.half
        return dx, dy

    @property
    def size(self) -> int:
        return self.n * self.n


@dataclass
class InversionResult:
    f: SampledField
    alpha: SampledOneForm
    curl: np.ndarray
    solenoidal: np.ndarray
    coefficients: np.ndarray
    residual: float
    condition: float
    info: dict = field(default_factory=dict)


def _disk_quadrature(center, radius, n=64):
    ax = np.linspace(-radius, radius, n)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    mask = X**2 + Y**2 <= radius**2
    pts = np.stack([X[mask], Y[mask]], axis=-1) + center
    w = np.full(len(pts), (ax[1] - ax[0]) ** 2)
    return pts, w


def design_matrix(fan: list, basis: LegendreBasis, lam: float, step: float) -> np.ndarray:
    nb = basis.size
    G = np.empty((len(fan), 3 * nb))
    for k, path in enumerate(fan):
        s, x, v = quadrature_nodes(path, step)
        B = basis.values(x) * np.exp(-lam * s)[:, None]
        blocks = [B, B * v[:, 0:1], B * v[:, 1:2]]
        G[k] = np.concatenate([simpson(b, x=s, axis=0) for b in blocks])
    return G


def invert(
    meas: RayMeasurement,
    chart: MetricChart,
    grid: Grid,
    ridge: float = 1e-6,
    n_basis: int = 12,
    max_condition: float = 1e11,
) -> InversionResult:
    """Penalised least squares for ``(f, alpha)`` on a Legendre tensor basis.

    Minimises ``|G c - m|^2 + ridge * s * (|f|^2 + |d alpha|^2 + |delta alpha|^2)``
    where ``s = tr(G^T G) / tr(R)`` makes ``ridge`` scale free.
    """
    dom = chart.domain
    if dom.get("kind") != "disk":
        raise ShapeError("inversion is implemented on disk charts")
    center = np.asarray(dom.get("center", (0.0, 0.0)), dtype=float)
    radius = float(dom["radius"])
    basis = LegendreBasis(n_basis, center, radius)
    nb = basis.size
    G = design_matrix(meas.fan, basis, meas.lam, meas.quadrature_step)

    pts, w = _disk_quadrature(center, radius)
    V = basis.values(pts)
    Dx, Dy = basis.derivatives(pts)
    Z = np.zeros_like(V)
    sw = np.sqrt(w)[:, None]
    rows = [
        np.hstack([V, Z, Z]) * sw,
        np.hstack([Z, -Dy, Dx]) * sw,  # d alpha
        np.hstack([Z, Dx, Dy]) * sw,  # divergence of alpha
    ]
    Rm = np.vstack(rows)
    scale = np.sum(G * G) / np.sum(Rm * Rm)
    # solve the stacked system by SVD rather than forming G^T G + ridge R,
    # which would square an already large condition number
    S = np.vstack([G, np.sqrt(ridge * scale) * Rm])
    U, sv, Vt = np.linalg.svd(S, full_matrices=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    if cond > max_condition:
        raise ConditioningError(f"stacked system condition number {cond:.3e} exceeds {max_condition:.1e}")
    rhs = np.concatenate([meas.values, np.zeros(Rm.shape[0])])
    c = Vt.T @ ((U.T @ rhs) / sv)
    resid = float(np.linalg.norm(G @ c - meas.values) / max(np.linalg.norm(meas.values), 1e-300))

    geom = GridMetric(grid, chart if not chart.flat else None)
    P = grid.points()
    Vg = basis.values(P)
    fv = Vg @ c[:nb]
    a1 = Vg @ c[nb : 2 * nb]
    a2 = Vg @ c[2 * nb :]
    alpha = SampledOneForm(geom, np.stack([a1, a2]))
    curl = exterior_d2(alpha)
    sol = gauge_project(alpha, mask=chart.contains(P))[1]
    return InversionResult(
        SampledField(geom, fv), alpha, curl, sol, c, resid, cond,
        {"ridge": ridge, "ridge_scale": float(scale), "n_basis": n_basis, "n_geodesics": len(meas.fan)},
    )


# ---------------------------------------------------------------------------
# gauge projection


def exterior_d2(alpha: SampledOneForm) -> np.ndarray:
    """Coefficient of ``dx_1 ^ dx_2`` in ``d alpha``."""
    g = alpha.grid
    return partial(alpha.components[1], 0, g.spacing[0], 2) - partial(alpha.components[0], 1, g.spacing[1], 2)


def _diff_matrix(n: int, h: float) -> sparse.csr_matrix:
    """Sparse matrix of the fourth order first derivative used in ``fields.partial``."""
    D = sparse.lil_matrix((n, n))
    for i in range(2, n - 2):
        D[i, i - 2 : i + 3] = np.array([1, -8, 0, 8, -1]) / (12 * h)
    D[0, :5] = np.array([-25, 48, -36, 16, -3]) / (12 * h)
    D[1, :5] = np.array([-3, -10, 18, -6, 1]) / (12 * h)
    D[n - 1, n - 5 :] = np.array([3, -16, 36, -48, 25]) / (12 * h)
    D[n - 2, n - 5 :] = np.array([-1, 6, -18, 10, 3]) / (12 * h)
    return D.tocsr()


def gauge_project(alpha: SampledOneForm, mask: Optional[np.ndarray] = None):
    """Return ``(d alpha, alpha - dp)`` with ``p`` the least-squares potential.

    ``p`` vanishes outside ``mask`` (default: on the outer ring of the grid),
    which encodes the Dirichlet condition.
    """
    g = alpha.grid
    nx, ny = g.shape
    Dx = sparse.kron(_diff_matrix(nx, g.spacing[0]), sparse.identity(ny))
    Dy = sparse.kron(sparse.identity(nx), _diff_matrix(ny, g.spacing[1]))
    D = sparse.vstack([Dx, Dy]).tocsr()
    if mask is None:
        mask = np.zeros(g.shape, dtype=bool)
        mask[1:-1, 1:-1] = True
    else:
        mask = np.asarray(mask, dtype=bool).copy()
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = False
    cols = np.flatnonzero(mask.ravel())
    Dm = D[:, cols]
    rhs = np.concatenate([alpha.components[0].ravel(), alpha.components[1].ravel()])
    Nm = (Dm.T @ Dm).tocsc()
    b = Dm.T @ rhs
    if np.iscomplexobj(b):
        pc = spsolve(Nm, b.real) + 1j * spsolve(Nm, b.imag)
    else:
        pc = spsolve(Nm, b)
    p = np.zeros(nx * ny, dtype=pc.dtype)
    p[cols] = pc
    dp = D @ p
    sol = rhs - dp
    sol = sol.reshape(2, nx, ny)
    return exterior_d2(alpha), sol

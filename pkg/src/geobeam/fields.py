"""Sampled scalar fields and one-forms on tensor grids.

Derivatives use fourth order central stencils in the interior and fourth
order one-sided stencils on the two outermost nodes of each axis.  All
pairings ``<a, b>`` are bilinear (no complex conjugation), matching the
convention of the magnetic Schrodinger operator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConformalError, ContractError, ParameterError, ResolutionError, ShapeError
from .geometry import MetricChart

MIN_NODES = 5


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid given by its 1-D axes."""

    axes: tuple

    @classmethod
    def uniform(cls, lo: Sequence[float], hi: Sequence[float], n: Sequence[int]) -> "Grid":
        return cls(tuple(np.linspace(a, b, int(k)) for a, b, k in zip(lo, hi, n)))

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def spacing(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def lo(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def hi(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])

    def mesh(self) -> list:
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self) -> np.ndarray:
        return np.stack(self.mesh(), axis=-1)

    def weights(self) -> np.ndarray:
        """Tensor trapezoid weights (coordinate volume)."""
        w = np.ones(())
        for a in self.axes:
            wa = np.full(len(a), a[1] - a[0])
            wa[0] *= 0.5
            wa[-1] *= 0.5
            w = np.multiply.outer(w, wa)
        return w

    def check_resolution(self):
        if min(self.shape) < MIN_NODES:
            raise ResolutionError(f"need at least {MIN_NODES} nodes per axis, got {self.shape}")


class GridMetric:
    """Grid together with the metric sampled at its nodes."""

    def __init__(self, grid: Grid, chart: Optional[MetricChart] = None, metric: Optional[np.ndarray] = None):
        self.grid = grid
        self.chart = chart
        d = grid.ndim
        if metric is None:
            if chart is not None:
                metric = chart.metric(grid.points())
            else:
                metric = np.broadcast_to(np.eye(d), grid.shape + (d, d))
        metric = np.asarray(metric, dtype=float)
        if metric.shape != grid.shape + (d, d):
            raise ShapeError("metric array does not match the grid")
        self.g = metric
        self.ginv = np.linalg.inv(metric)
        self.sqrtg = np.sqrt(np.linalg.det(metric))

    @property
    def volume_weights(self) -> np.ndarray:
        return self.grid.weights() * self.sqrtg

    def same_as(self, other: "GridMetric") -> bool:
        if self is other:
            return True
        return self.grid.shape == other.grid.shape and all(
            np.array_equal(a, b) for a, b in zip(self.grid.axes, other.grid.axes)
        )


@dataclass
class SampledField:
    geom: GridMetric
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != self.geom.grid.shape:
            raise ShapeError("values do not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @property
    def grid(self) -> Grid:
        return self.geom.grid


@dataclass
class SampledOneForm:
    geom: GridMetric
    components: np.ndarray
    tangential_zero: bool = False

    def __post_init__(self):
        self.components = np.asarray(self.components)
        if self.components.shape != (self.geom.grid.ndim,) + self.geom.grid.shape:
            raise ShapeError("one-form components must have shape (dim, *grid.shape)")
        if not np.all(np.isfinite(self.components)):
            raise ValueError("one-form contains non-finite values")

    @property
    def grid(self) -> Grid:
        return self.geom.grid


@dataclass(frozen=True)
class SemiclassicalParams:
    h: float
    lam: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.h <= 1.0:
            raise ParameterError("h must lie in (0, 1]")

    @property
    def mu(self) -> float:
        return 1.0 / self.h

    @property
    def s(self) -> complex:
        return complex(self.mu, self.lam)


def field_from_function(geom: GridMetric, fn) -> SampledField:
    return SampledField(geom, np.broadcast_to(fn(*geom.grid.mesh()), geom.grid.shape).copy())


def one_form_from_functions(geom: GridMetric, fns, tangential_zero: bool = False) -> SampledOneForm:
    mesh = geom.grid.mesh()
    comps = [np.broadcast_to(f(*mesh), geom.grid.shape) for f in fns]
    return SampledOneForm(geom, np.stack(comps), tangential_zero)


# ---------------------------------------------------------------------------
# finite differences


def partial(values: np.ndarray, axis: int, step: float, ndim: Optional[int] = None) -> np.ndarray:
    """Fourth order derivative along spatial ``axis`` of the trailing ``ndim`` axes."""
    values = np.asarray(values)
    ndim = values.ndim if ndim is None else ndim
    ax = values.ndim - ndim + axis
    f = np.moveaxis(values, ax, -1)
    n = f.shape[-1]
    if n < MIN_NODES:
        raise ResolutionError(f"need at least {MIN_NODES} nodes along axis {axis}")
    out = np.empty_like(f)
    out[..., 2:-2] = (f[..., :-4] - 8 * f[..., 1:-3] + 8 * f[..., 3:-1] - f[..., 4:]) / (12 * step)
    out[..., 0] = (-25 * f[..., 0] + 48 * f[..., 1] - 36 * f[..., 2] + 16 * f[..., 3] - 3 * f[..., 4]) / (12 * step)
    out[..., 1] = (-3 * f[..., 0] - 10 * f[..., 1] + 18 * f[..., 2] - 6 * f[..., 3] + f[..., 4]) / (12 * step)
    out[..., -1] = (25 * f[..., -1] - 48 * f[..., -2] + 36 * f[..., -3] - 16 * f[..., -4] + 3 * f[..., -5]) / (12 * step)
    out[..., -2] = (3 * f[..., -1] + 10 * f[..., -2] - 18 * f[..., -3] + 6 * f[..., -4] - f[..., -5]) / (12 * step)
    return np.moveaxis(out, -1, ax)


def gradient(values: np.ndarray, grid: Grid) -> np.ndarray:
    return np.stack([partial(values, k, grid.spacing[k], grid.ndim) for k in range(grid.ndim)])


def pair(a: np.ndarray, b: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """Bilinear pairing ``a_j g^{jk} b_k`` of component arrays ``(d, *shape)``."""
    return np.einsum("j...,...jk,k...->...", a, ginv, b)


def raise_index(a: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    return np.einsum("...jk,k...->j...", ginv, a)


def divergence_form(comps: np.ndarray, geom: GridMetric) -> np.ndarray:
    """``d^* v = -|g|^{-1/2} d_j (|g|^{1/2} g^{jk} v_k)`` on raw arrays."""
    flux = geom.sqrtg * raise_index(comps, geom.ginv)
    grid = geom.grid
    acc = sum(partial(flux[j], j, grid.spacing[j], grid.ndim) for j in range(grid.ndim))
    return -acc / geom.sqrtg


def laplacian_values(values: np.ndarray, geom: GridMetric) -> np.ndarray:
    return -divergence_form(gradient(values, geom.grid), geom)


def _check_same(*objs):
    base = objs[0].geom
    for o in objs[1:]:
        if o is not None and not base.same_as(o.geom):
            raise ShapeError("fields live on different grids")


def exterior_d(u: SampledField) -> SampledOneForm:
    u.grid.check_resolution()
    return SampledOneForm(u.geom, gradient(u.values, u.grid))


def codifferential(v: SampledOneForm) -> SampledField:
    v.grid.check_resolution()
    return SampledField(v.geom, divergence_form(v.components, v.geom))


def laplacian(u: SampledField) -> SampledField:
    return SampledField(u.geom, laplacian_values(u.values, u.geom))


def _magnetic_terms(u: np.ndarray, du: np.ndarray, A: np.ndarray, q: np.ndarray, geom: GridMetric) -> np.ndarray:
    """``i d^*(A u) - i <A, du> + (<A, A> + q) u``."""
    ginv = geom.ginv
    return (
        1j * divergence_form(A * u, geom)
        - 1j * pair(A, du, ginv)
        + (pair(A, A, ginv) + q) * u
    )


def magnetic_schrodinger_apply(u: SampledField, A: Optional[SampledOneForm], q: Optional[SampledField]) -> SampledField:
    """``-Delta u + i d^*(A u) - i <A, du> + (<A, A> + q) u``."""
    _check_same(u, A, q)
    u.grid.check_resolution()
    geom = u.geom
    du = gradient(u.values, geom.grid)
    Ac = np.zeros((geom.grid.ndim,) + geom.grid.shape) if A is None else A.components
    qv = 0.0 if q is None else q.values
    out = divergence_form(du, geom) + _magnetic_terms(u.values, du, Ac, qv, geom)
    return SampledField(geom, out)


def conjugated_apply(
    u: SampledField,
    A: Optional[SampledOneForm],
    q: Optional[SampledField],
    params: SemiclassicalParams,
    weight: str = "complex_s",
    eps: Optional[float] = None,
    scaled: bool = False,
) -> SampledField:
    """Expanded form of ``e^{Phi} L e^{-Phi} u`` (times ``h^2`` when ``scaled``).

    ``weight='complex_s'`` uses ``Phi = s x_1`` with ``s = 1/h + i lam``;
    ``weight='real_x1'`` uses ``Phi = phi/h`` with ``phi = x_1 + h x_1^2 / (2 eps)``
    (plain ``x_1`` when ``eps`` is None).  The exponentials are never formed:

        -Delta u + 2<dPhi, du> - <dPhi, dPhi> u + (Delta Phi) u + 2i <A, dPhi> u + magnetic terms
    """
    if params.h <= 0:
        raise ParameterError("h must be positive")
    _check_same(u, A, q)
    u.grid.check_resolution()
    geom = u.geom
    grid = geom.grid
    x1 = grid.mesh()[0]
    d = grid.ndim
    if weight == "complex_s":
        coef = params.s * np.ones_like(x1)
    elif weight == "real_x1":
        if eps is None:
            coef = np.full_like(x1, params.mu)
        else:
            coef = params.mu * (1.0 + (params.h / eps) * x1)
    else:
        raise ParameterError(f"unknown weight {weight!r}")
    # dPhi = coef * dx_1; Delta Phi = -d^*(dPhi) evaluated by finite differences
    dphi = np.zeros((d,) + grid.shape, dtype=complex)
    dphi[0] = coef
    lap_phi = -divergence_form(dphi, geom)
    du = gradient(u.values, grid)
    Ac = np.zeros((d,) + grid.shape) if A is None else A.components
    qv = 0.0 if q is None else q.values
    ginv = geom.ginv
    out = (
        divergence_form(du, geom)
        + 2.0 * pair(dphi, du, ginv)
        - pair(dphi, dphi, ginv) * u.values
        + lap_phi * u.values
        + 2j * pair(Ac, dphi, ginv) * u.values
        + _magnetic_terms(u.values, du, Ac, qv, geom)
    )
    if scaled:
        out = params.h**2 * out
    return SampledField(geom, out)


# ---------------------------------------------------------------------------
# mollification


def bump_kernel(grid: Grid, tau: float) -> np.ndarray:
    """Discretely normalised kernel ``(1 - |x/tau|^2)^4`` on the grid spacing."""
    axes = []
    for dx in grid.spacing:
        m = int(np.floor(tau / dx))
        axes.append(np.arange(-m, m + 1) * dx)
    mesh = np.meshgrid(*axes, indexing="ij")
    r2 = sum(m * m for m in mesh) / tau**2
    k = np.where(r2 < 1.0, (1.0 - r2) ** 4, 0.0)
    return k / k.sum()


def mollify_array(values: np.ndarray, grid: Grid, tau: float) -> np.ndarray:
    if tau <= 2.0 * max(grid.spacing):
        raise ResolutionError("smoothing length must exceed two grid steps")
    k = bump_kernel(grid, tau)
    values = np.asarray(values)
    lead = values.ndim - grid.ndim
    if lead:
        k = k.reshape((1,) * lead + k.shape)
    if np.iscomplexobj(values):
        return fftconvolve(values.real, k, mode="same", axes=tuple(range(lead, values.ndim))) + 1j * fftconvolve(
            values.imag, k, mode="same", axes=tuple(range(lead, values.ndim))
        )
    return fftconvolve(values, k, mode="same", axes=tuple(range(lead, values.ndim)))


def mollify(A, tau: float):
    """Componentwise convolution with the normalised bump of radius ``tau``.

    Values outside the grid are treated as zero, i.e. the field is extended
    by zero.
    """
    if isinstance(A, SampledOneForm):
        return SampledOneForm(A.geom, mollify_array(A.components, A.grid, tau))
    if isinstance(A, SampledField):
        return SampledField(A.geom, mollify_array(A.values, A.grid, tau))
    raise ContractError("mollify expects a sampled field or one-form")


def mollifier_rates(A: SampledOneForm, taus: Sequence[float], trim: Optional[float] = None) -> dict:
    """Scaled sup norms ``tau |grad A_tau|`` and ``tau^2 |Delta A_tau|`` per ``tau``.

    Sup norms are taken over nodes at distance ``> trim`` (default
    ``max(taus)``) from the grid edge, away from the zero extension.  Also
    reports ``|A - A_tau|_{L^2}`` over the same nodes.
    """
    grid = A.grid
    trim = max(taus) if trim is None else trim
    inner = np.ones(grid.shape, dtype=bool)
    for k, ax in enumerate(grid.axes):
        sl = [np.newaxis] * grid.ndim
        sl[k] = slice(None)
        inner &= ((ax > ax[0] + trim) & (ax < ax[-1] - trim))[tuple(sl)]
    w = A.geom.volume_weights * inner
    out = {"tau": [], "grad": [], "lap": [], "l2_error": []}
    for tau in taus:
        At = mollify(A, tau).components
        g = max(float(np.max(np.abs(partial(At[j], k, grid.spacing[k], grid.ndim))[inner])) for j in range(len(At)) for k in range(grid.ndim))
        lap = max(float(np.max(np.abs(laplacian_values(At[j], A.geom))[inner])) for j in range(len(At)))
        out["tau"].append(float(tau))
        out["grad"].append(tau * g)
        out["lap"].append(tau * tau * lap)
        out["l2_error"].append(one_form_l2(A.components - At, w))
    return {k: np.array(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# conformal reduction


def conformal_reduce(A: Optional[SampledOneForm], q: SampledField, chart: MetricChart):
    """Strip the conformal factor: returns ``(A, q_tilde, reduced_geom, reduced_chart)``.

    ``q_tilde = c (q - c^{(n-2)/4} Delta_g c^{-(n-2)/4})`` and the reduced
    metric is ``g / c``.
    """
    geom = q.geom
    grid = geom.grid
    n = grid.ndim
    c = chart.conformal(grid.points())
    if np.min(c) <= 0 or not np.all(np.isfinite(c)):
        raise ConformalError("conformal factor must be positive")
    p = (n - 2) / 4.0
    lap = laplacian_values(c ** (-p), geom)
    q_tilde = c * (q.values - c**p * lap)
    reduced_metric = geom.g / c[..., None, None]
    red_geom = GridMetric(grid, None, reduced_metric)

    factor = chart.conformal_factor

    def reduced_fn(x):
        g = chart.metric(x)
        if factor is None:
            return g
        return g / np.asarray(factor(x))[..., None, None]

    red_chart = MetricChart(
        dim=chart.dim,
        metric_fn=reduced_fn,
        boundary_fn=chart.boundary_fn,
        domain=chart.domain,
        name=f"reduced({chart.name})",
    )
    A_out = None if A is None else SampledOneForm(red_geom, A.components, A.tangential_zero)
    return A_out, SampledField(red_geom, q_tilde), red_geom, red_chart


# ---------------------------------------------------------------------------
# semiclassical norms


@dataclass
class ResidualDecomposition:
    """Residual written as ``smooth + d^*(divergence)``.

    ``weights`` are quadrature weights including the volume density and
    ``ginv`` the inverse metric at the quadrature nodes.
    """

    smooth: np.ndarray
    divergence: np.ndarray
    weights: np.ndarray
    ginv: Optional[np.ndarray] = None
    groups: dict = field(default_factory=dict)


@dataclass
class NormReport:
    l2: Optional[float]
    h1_scl: Optional[float]
    h_minus1_scl_bound: float

    def as_dict(self) -> dict:
        return {"l2": self.l2, "h1_scl": self.h1_scl, "h_minus1_scl_bound": self.h_minus1_scl_bound}


def weighted_l2(values: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.abs(values) ** 2 * weights)))


def one_form_l2(comps: np.ndarray, weights: np.ndarray, ginv: Optional[np.ndarray] = None) -> float:
    if ginv is None:
        dens = np.sum(np.abs(comps) ** 2, axis=0)
    else:
        dens = np.real(np.einsum("j...,...jk,k...->...", comps, ginv, np.conj(comps)))
    return float(np.sqrt(np.sum(dens * weights)))


def norm_scl(obj, params: SemiclassicalParams) -> NormReport:
    """Semiclassical norms of a field, or the certified dual bound of a decomposition."""
    h = params.h
    if isinstance(obj, SampledField):
        geom = obj.geom
        w = geom.volume_weights
        l2 = weighted_l2(obj.values, w)
        du = gradient(obj.values, geom.grid)
        grad2 = one_form_l2(du, w, geom.ginv) ** 2
        h1 = float(np.sqrt(l2**2 + h * h * grad2))
        # ||u||_{H^{-1}} <= ||u||_{L^2}
        return NormReport(l2, h1, l2)
    if isinstance(obj, ResidualDecomposition):
        b = weighted_l2(obj.smooth, obj.weights) + one_form_l2(obj.divergence, obj.weights, obj.ginv) / h
        return NormReport(None, None, float(b))
    if isinstance(obj, SampledOneForm):
        raise ContractError("divergence content must be passed as a ResidualDecomposition")
    raise ContractError(f"cannot take a semiclassical norm of {type(obj).__name__}")


# ---------------------------------------------------------------------------
# node dumps


def save_field(path, f) -> None:
    """CSV node dump with a JSON sidecar header ``<path>.json``."""
    grid = f.grid
    vals = f.values[None] if isinstance(f, SampledField) else f.components
    flat = vals.reshape(vals.shape[0], -1).T
    cols = np.concatenate([flat.real, flat.imag], axis=1) if np.iscomplexobj(flat) else flat
    np.savetxt(path, cols, delimiter=",", fmt="%.17g")
    header = {
        "shape": list(grid.shape),
        "lo": grid.lo.tolist(),
        "hi": grid.hi.tolist(),
        "components": int(vals.shape[0]),
        "complex": bool(np.iscomplexobj(flat)),
        "chart": getattr(f.geom.chart, "name", None),
        "kind": "field" if isinstance(f, SampledField) else "one_form",
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(header, fh, indent=2)


def load_field(path, chart: Optional[MetricChart] = None):
    with open(f"{path}.json") as fh:
        header = json.load(fh)
    grid = Grid.uniform(header["lo"], header["hi"], header["shape"])
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    k = header["components"]
    if header["complex"]:
        data = data[:, :k] + 1j * data[:, k:]
    vals = data.T.reshape((k,) + tuple(header["shape"]))
    geom = GridMetric(grid, chart)
    if header["kind"] == "field":
        return SampledField(geom, vals[0])
    return SampledOneForm(geom, vals)


# ---------------------------------------------------------------------------
# point evaluation


class PointSampler:
    """Cubic spline evaluation of grid data at arbitrary points.

    Data are extended by zero outside the grid.  ``exact`` optionally
    supplies a callable that replaces interpolation (used for analytic
    potentials whose kinks a spline would smear).
    """

    def __init__(self, grid: Grid, values: np.ndarray, exact=None, order: int = 3):
        from scipy.ndimage import spline_filter

        self.grid = grid
        self.exact = exact
        self.order = order
        values = np.asarray(values)
        self.lead = values.shape[: values.ndim - grid.ndim]
        flat = values.reshape((-1,) + grid.shape)
        self._complex = np.iscomplexobj(values)
        parts = []
        for v in flat:
            if self._complex:
                parts.append((spline_filter(v.real, order, mode="constant"), spline_filter(v.imag, order, mode="constant")))
            else:
                parts.append((spline_filter(np.asarray(v, float), order, mode="constant"), None))
        self._coef = parts

    def __call__(self, points: np.ndarray) -> np.ndarray:
        from scipy.ndimage import map_coordinates

        points = np.asarray(points, dtype=float)
        if self.exact is not None:
            return np.asarray(self.exact(points))
        g = self.grid
        idx = (points - g.lo) / np.array(g.spacing)
        coords = np.moveaxis(idx, -1, 0).reshape(g.ndim, -1)
        out = []
        for re, im in self._coef:
            v = map_coordinates(re, coords, order=self.order, mode="constant", cval=0.0, prefilter=False)
            if im is not None:
                v = v + 1j * map_coordinates(im, coords, order=self.order, mode="constant", cval=0.0, prefilter=False)
            out.append(v.reshape(points.shape[:-1]))
        out = np.stack(out).reshape(self.lead + points.shape[:-1])
        return out


def one_form_sampler(A: SampledOneForm, exact=None) -> PointSampler:
    """Sampler returning components with a leading axis of length ``dim``."""
    return PointSampler(A.grid, A.components, exact)

"""Numerical checks of the Carleman estimates for the weight ``x1``.

For compactly supported ``u`` the conjugated semiclassical Laplacian
``P = e^{phi/h} (-h^2 Delta) e^{-phi/h}`` with the convexified weight
``phi = x1 + h x1^2 / (2 eps)`` should satisfy

    (h / sqrt(eps)) ||u||_{H^2_scl} <= C ||P u||,

and both sides are evaluated by finite differences.  The inequality is
tested as a ratio ``||P u|| / LHS`` minimised over a family of test
functions; the constant is fitted, never assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.fft import dstn, idstn

from .errors import ContractError, ParameterError
from .fields import (
    GridMetric,
    SampledField,
    SampledOneForm,
    SemiclassicalParams,
    conjugated_apply,
    gradient,
    laplacian_values,
    norm_scl,
    one_form_l2,
    partial,
    weighted_l2,
)


@dataclass(frozen=True)
class CarlemanWeight:
    """``phi = x1 + (h / 2 eps) x1^2``; ``eps = inf`` gives the plain weight."""

    h: float
    eps: float
    eps0: float = 0.5

    def __post_init__(self):
        if self.h <= 0 or self.eps <= 0:
            raise ParameterError("h and eps must be positive")
        if self.h / self.eps > self.eps0:
            raise ParameterError(f"h/eps = {self.h / self.eps:.3g} exceeds eps0 = {self.eps0}")

    @property
    def convexified(self) -> bool:
        return np.isfinite(self.eps)

    def value(self, x1):
        x1 = np.asarray(x1, float)
        return x1 if not self.convexified else x1 + 0.5 * (self.h / self.eps) * x1 * x1

    def derivative(self, x1):
        """``psi = 1 + (h/eps) x1``."""
        x1 = np.asarray(x1, float)
        return np.ones_like(x1) if not self.convexified else 1.0 + (self.h / self.eps) * x1

    def check_lower_bound(self, x1) -> float:
        m = float(np.min(self.derivative(x1)))
        if m < 0.5:
            raise ParameterError("1 + (h/eps) x1 drops below 1/2 on the domain")
        return m


def check_compact(u: SampledField, ring: int = 2, tol: float = 1e-12):
    v = np.abs(u.values)
    scale = float(np.max(v))
    if scale == 0:
        raise ContractError("the zero function is excluded")
    mask = np.ones(v.shape, dtype=bool)
    mask[(slice(ring, -ring),) * v.ndim] = False
    if np.max(v[mask]) > tol * scale:
        raise ContractError("test function does not vanish near the boundary")


def h2_scl_norm(u: SampledField, h: float) -> float:
    """``(||u||^2 + ||h grad u||^2 + ||h^2 grad^2 u||^2)^{1/2}`` with coordinate second derivatives."""
    geom = u.geom
    grid = geom.grid
    w = geom.volume_weights
    du = gradient(u.values, grid)
    second = 0.0
    for j in range(grid.ndim):
        for k in range(grid.ndim):
            second += weighted_l2(partial(du[j], k, grid.spacing[k], grid.ndim), w) ** 2
    first = one_form_l2(du, w, geom.ginv) ** 2
    return float(np.sqrt(weighted_l2(u.values, w) ** 2 + h * h * first + h**4 * second))


def h_minus1_dirichlet(values: np.ndarray, geom: GridMetric, h: float) -> float:
    """``sup <f, v> / ||v||_{H^1_scl}`` over ``v`` vanishing on the box boundary.

    Flat grids only: ``<f, (1 - h^2 Delta_D)^{-1} f>^{1/2}`` with the
    discrete Dirichlet Laplacian diagonalised by a type-I sine transform.
    """
    grid = geom.grid
    if not np.allclose(geom.g, np.eye(grid.ndim)):
        raise ContractError("the sine-transform dual norm needs a flat grid")
    inner = values[(slice(1, -1),) * grid.ndim]
    lam = 0.0
    for k, (n, dx) in enumerate(zip(grid.shape, grid.spacing)):
        j = np.arange(1, n - 1)
        ev = (2.0 - 2.0 * np.cos(np.pi * j / (n - 1))) / dx**2
        shape = [1] * grid.ndim
        shape[k] = n - 2
        lam = lam + ev.reshape(shape)
    cell = float(np.prod(grid.spacing))
    out = 0.0
    for part in (inner.real, inner.imag):
        F = dstn(part, type=1, norm="ortho")
        out += np.sum(F * F / (1.0 + h * h * lam)) * cell
    return float(np.sqrt(out))


@dataclass
class CarlemanReport:
    h: float
    eps: float
    which: str
    ratios: np.ndarray
    family: str = ""
    identity_errors: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def min_ratio(self) -> float:
        return float(np.min(self.ratios))

    @property
    def fitted_constant(self) -> float:
        return 1.0 / self.min_ratio

    def as_dict(self) -> dict:
        return {"h": self.h, "eps": self.eps, "which": self.which, "family": self.family, "min_ratio": self.min_ratio, "fitted_C": self.fitted_constant}


def conjugated_laplacian(u: SampledField, weight: CarlemanWeight) -> np.ndarray:
    """``e^{phi/h} (-h^2 Delta) e^{-phi/h} u`` in expanded form."""
    params = SemiclassicalParams(weight.h)
    eps = weight.eps if weight.convexified else None
    return conjugated_apply(u, None, None, params, weight="real_x1", eps=eps, scaled=True).values


def decomposition_identity(u: SampledField, weight: CarlemanWeight) -> dict:
    """Check ``||P u||^2 = ||A u||^2 + ||K u||^2 + ([A, K] u, u)`` on a flat grid.

    ``A = -h^2 Delta - psi^2`` is the symmetric part and
    ``K = 2 h psi d_1 + h^2 / eps`` the antisymmetric part, so
    ``[A, K] = 4 h (h / eps) (psi^2 - h^2 d_1^2)``.
    """
    geom = u.geom
    grid = geom.grid
    h = weight.h
    w = geom.volume_weights
    x1 = grid.mesh()[0]
    psi = weight.derivative(x1)
    k = (h / weight.eps) if weight.convexified else 0.0
    uv = u.values
    d1 = partial(uv, 0, grid.spacing[0], grid.ndim)
    Au = -h * h * laplacian_values(uv, geom) - psi**2 * uv
    Ku = 2 * h * psi * d1 + h * k * uv
    Pu = conjugated_laplacian(u, weight)
    comm = 4 * h * k * (weighted_l2(psi * uv, w) ** 2 + h * h * weighted_l2(d1, w) ** 2)
    lhs = weighted_l2(Pu, w) ** 2
    rhs = weighted_l2(Au, w) ** 2 + weighted_l2(Ku, w) ** 2 + comm
    return {"P": lhs, "A": weighted_l2(Au, w) ** 2, "K": weighted_l2(Ku, w) ** 2, "commutator": comm, "relative_error": abs(lhs - rhs) / lhs}


def verify_carleman(
    geom: GridMetric,
    family: Sequence[SampledField],
    params: SemiclassicalParams,
    eps: float,
    which: str = "laplace_s0",
    A: Optional[SampledOneForm] = None,
    q: Optional[SampledField] = None,
    family_name: str = "",
    lhs_eps: Optional[float] = None,
) -> CarlemanReport:
    """Ratios ``RHS / LHS`` of the Carleman inequality over ``family``.

    ``laplace_s0``: ``||P u|| / ((h / sqrt(eps)) ||u||_{H^2_scl})``.
    ``magnetic``: ``||e^{phi/h} h^2 L e^{-phi/h} u||_{H^{-1}_scl} / (h ||u||_{H^1_scl})``.
    ``eps = inf`` drops the convexification of the weight; ``lhs_eps``
    then supplies the ``eps`` of the left side.
    """
    h = params.h
    weight = CarlemanWeight(h, eps)
    weight.check_lower_bound(geom.grid.axes[0])
    scale_eps = eps if lhs_eps is None else lhs_eps
    if not np.isfinite(scale_eps) and which == "laplace_s0":
        raise ParameterError("the left side needs a finite eps")
    ratios = []
    for u in family:
        if not u.geom.same_as(geom):
            raise ContractError("test function lives on another grid")
        check_compact(u)
        if which == "laplace_s0":
            rhs = weighted_l2(conjugated_laplacian(u, weight), geom.volume_weights)
            lhs = h / np.sqrt(scale_eps) * h2_scl_norm(u, h)
        elif which == "magnetic":
            pe = None if not weight.convexified else eps
            Pu = conjugated_apply(u, A, q, params, weight="real_x1", eps=pe, scaled=True).values
            try:
                rhs = h_minus1_dirichlet(Pu, geom, h)
            except ContractError:
                rhs = norm_scl(SampledField(geom, Pu), params).h_minus1_scl_bound
            lhs = h * norm_scl(u, params).h1_scl
        else:
            raise ParameterError(f"unknown inequality {which!r}")
        ratios.append(rhs / lhs)
    return CarlemanReport(h, eps, which, np.array(ratios), family_name)


def _bump(r2):
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(r2 < 1.0, np.exp(-1.0 / np.where(r2 < 1.0, 1.0 - r2, 1.0)), 0.0)


def wave_packet(geom: GridMetric, center, width: float, xi, h: float) -> SampledField:
    """``e^{i xi . x / h}`` times a compactly supported bump of radius ``width``."""
    X = np.stack(geom.grid.mesh())
    c = np.asarray(center, float).reshape((-1,) + (1,) * geom.grid.ndim)
    xi = np.asarray(xi, float).reshape((-1,) + (1,) * geom.grid.ndim)
    r2 = np.sum((X - c) ** 2, axis=0) / width**2
    return SampledField(geom, _bump(r2) * np.exp(1j * np.sum(xi * X, axis=0) / h))


def _support_box(geom: GridMetric, width: float):
    lo = geom.grid.lo + width + 3 * np.array(geom.grid.spacing)
    hi = geom.grid.hi - width - 3 * np.array(geom.grid.spacing)
    if np.any(hi < lo):
        raise ParameterError("bump radius too large for the grid")
    return lo, hi


def packet_family(geom: GridMetric, h: float, n: int = 20, seed: int = 0, width: float = 0.35) -> list:
    """``n`` wave packets with random centres and frequencies ``|xi| <= 1.5``.

    A quarter of the packets sit on the characteristic set
    ``xi_1 = 0, |xi| = 1`` of the conjugated symbol; the rest include
    non-oscillating bumps.
    """
    rng = np.random.default_rng(seed)
    d = geom.grid.ndim
    lo, hi = _support_box(geom, width)
    out = []
    for k in range(n):
        c = lo + (hi - lo) * rng.random(d)
        if k % 4 == 0:
            xi = np.zeros(d)
            xi[1 + (k // 4) % (d - 1)] = 1.0 if (k // 4) % 2 == 0 else -1.0
        elif k % 4 == 1:
            xi = np.zeros(d)
        else:
            v = rng.normal(size=d)
            xi = 1.5 * rng.random() * v / np.linalg.norm(v)
        out.append(wave_packet(geom, c, width * (0.7 + 0.3 * rng.random()), xi, h))
    return out


def adversarial_family(geom: GridMetric, h: float, n: int = 20, seed: int = 1, width: float = 0.35) -> list:
    """Packets with frequencies on the characteristic set ``xi_1 = 0, |xi| = 1``."""
    rng = np.random.default_rng(seed)
    d = geom.grid.ndim
    lo, hi = _support_box(geom, width)
    out = []
    for k in range(n):
        c = lo + (hi - lo) * rng.random(d)
        v = np.zeros(d)
        v[1:] = rng.normal(size=d - 1)
        xi = v / np.linalg.norm(v)
        out.append(wave_packet(geom, c, width, xi, h))
    return out


def fit_constant_spread(reports: Sequence[CarlemanReport]) -> float:
    """``max C / min C`` over a sweep."""
    cs = np.array([r.fitted_constant for r in reports])
    return float(cs.max() / cs.min())

"""Parallel transport, loop holonomy and gauge functions for ``d + i A``.

Along a curve the transport equation is ``s' + i A(gamma') s = 0`` with
solution ``s(b) = exp(-i int_gamma A) s(a)``.  For a closed form with
trivial holonomy the gauge function ``F(m) = exp(i int_{m0}^{m} A)`` is
single valued and ``-i F^{-1} dF = A``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.ndimage import binary_erosion, label

from .errors import ClosednessError, GaugeError, IntegrationError, SamplingError
from .fields import PointSampler, SampledField, SampledOneForm, partial

TWO_PI = 2.0 * np.pi
FormLike = Union[SampledOneForm, Callable]


@dataclass
class Curve:
    """Samples ``(t, x, xdot)`` of a C^1 path in chart coordinates."""

    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray
    closed: bool = False

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.x = np.asarray(self.x, float)
        self.xdot = np.asarray(self.xdot, float)
        if self.closed and np.max(np.abs(self.x[0] - self.x[-1])) > 1e-10:
            raise ValueError("closed curve must end where it starts")
        self._spline = CubicHermiteSpline(self.t, self.x, self.xdot, axis=0)
        self._dspline = self._spline.derivative()

    @classmethod
    def from_function(cls, fn: Callable, dfn: Callable, t, closed: bool = False) -> "Curve":
        t = np.asarray(t, float)
        return cls(t, fn(t), dfn(t), closed)

    def position(self, t) -> np.ndarray:
        return self._spline(np.asarray(t, float))

    def velocity(self, t) -> np.ndarray:
        return self._dspline(np.asarray(t, float))

    def reversed(self) -> "Curve":
        T = self.t[0] + self.t[-1]
        return Curve(T - self.t[::-1], self.x[::-1], -self.xdot[::-1], self.closed)

    def then(self, other: "Curve") -> "Curve":
        """Concatenation (``other`` must start where ``self`` ends)."""
        if np.max(np.abs(self.x[-1] - other.x[0])) > 1e-10:
            raise ValueError("curves do not connect")
        t2 = other.t - other.t[0] + self.t[-1]
        closed = bool(np.max(np.abs(self.x[0] - other.x[-1])) <= 1e-10)
        return Curve(np.concatenate([self.t, t2[1:]]), np.concatenate([self.x, other.x[1:]]), np.concatenate([self.xdot, other.xdot[1:]]), closed)


def circle(center=(0.0, 0.0), radius: float = 1.0, n: int = 2001, turns: float = 1.0, phase: float = 0.0) -> Curve:
    c = np.asarray(center, float)
    t = np.linspace(0.0, TWO_PI * turns, n)
    a = t + phase
    x = c + radius * np.stack([np.cos(a), np.sin(a)], axis=-1)
    v = radius * np.stack([-np.sin(a), np.cos(a)], axis=-1)
    return Curve(t, x, v, closed=abs(turns - round(turns)) < 1e-14 and turns != 0)


def segment(p, q, n: int = 201) -> Curve:
    p, q = np.asarray(p, float), np.asarray(q, float)
    t = np.linspace(0.0, 1.0, n)
    return Curve(t, p + t[:, None] * (q - p), np.broadcast_to(q - p, (n, len(p))).copy())


def _evaluator(A: FormLike) -> Callable:
    if isinstance(A, SampledOneForm):
        sampler = PointSampler(A.grid, A.components)
        lo, hi = A.grid.lo, A.grid.hi

        def ev(x):
            x = np.asarray(x, float)
            if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
                raise SamplingError("curve leaves the sampling grid")
            return sampler(x)

        return ev
    return lambda x: np.asarray(A(np.asarray(x, float)))


def _pairing(A_ev, curve: Curve, t) -> np.ndarray:
    comps = A_ev(curve.position(t))
    return np.sum(np.moveaxis(comps, 0, -1) * curve.velocity(t), axis=-1)


def line_integral(A: FormLike, curve: Curve, n_per: int = 8) -> float:
    """``int_gamma A`` by Gauss-Legendre on every sample interval."""
    A_ev = _evaluator(A)
    xg, wg = np.polynomial.legendre.leggauss(n_per)
    a, b = curve.t[:-1], curve.t[1:]
    half = 0.5 * (b - a)
    tt = (0.5 * (a + b))[:, None] + half[:, None] * xg
    vals = _pairing(A_ev, curve, tt.ravel()).reshape(tt.shape)
    return complex(np.sum(vals * half[:, None] * wg)).real if np.isrealobj(vals) else complex(np.sum(vals * half[:, None] * wg))


@dataclass
class TransportResult:
    value: complex
    closed_form: complex
    integral: complex
    discrepancy: float


def parallel_transport(A: FormLike, curve: Curve, s0: complex = 1.0, tol: float = 1e-8, substeps: int = 4) -> TransportResult:
    """RK4 solve of ``s' = -i A(gamma') s`` checked against ``exp(-i int A) s0``."""
    A_ev = _evaluator(A)
    t = curve.t
    s = complex(s0)
    for a, b in zip(t[:-1], t[1:]):
        dt = (b - a) / substeps
        nodes = a + dt * np.arange(substeps + 1)
        mids = nodes[:-1] + 0.5 * dt
        fa = _pairing(A_ev, curve, nodes)
        fm = _pairing(A_ev, curve, mids)
        for k in range(substeps):
            k1 = -1j * fa[k] * s
            k2 = -1j * fm[k] * (s + 0.5 * dt * k1)
            k3 = -1j * fm[k] * (s + 0.5 * dt * k2)
            k4 = -1j * fa[k + 1] * (s + dt * k3)
            s = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    I = line_integral(A, curve)
    closed = np.exp(-1j * I) * complex(s0)
    disc = abs(s - closed)
    if disc > tol * max(1.0, abs(s0)):
        raise IntegrationError(f"RK4 transport disagrees with the closed form by {disc:.2e}")
    return TransportResult(s, closed, I, float(disc))


# ---------------------------------------------------------------------------
# closedness and holonomy


def curl_callable(A: Callable, points, step: float = 1e-4) -> np.ndarray:
    """``d_1 A_2 - d_2 A_1`` of a callable form by central differences."""
    p = np.asarray(points, float)
    e1 = np.array([step, 0.0])
    e2 = np.array([0.0, step])
    d1A2 = (np.asarray(A(p + e1))[1] - np.asarray(A(p - e1))[1]) / (2 * step)
    d2A1 = (np.asarray(A(p + e2))[0] - np.asarray(A(p - e2))[0]) / (2 * step)
    return d1A2 - d2A1


def curl_sampled(A: SampledOneForm) -> np.ndarray:
    g = A.grid
    return partial(A.components[1], 0, g.spacing[0], 2) - partial(A.components[0], 1, g.spacing[1], 2)


def closedness_defect(A: FormLike, mask: Optional[np.ndarray] = None, points=None) -> float:
    """``max |dA|`` over the domain (eroded by two nodes) or at ``points``."""
    if isinstance(A, SampledOneForm):
        c = np.abs(curl_sampled(A))
        m = np.ones(c.shape, bool) if mask is None else np.asarray(mask, bool)
        m = binary_erosion(m, iterations=2, border_value=0)
        return float(np.max(c[m])) if np.any(m) else 0.0
    if points is None:
        raise ValueError("callable forms need sample points for the closedness check")
    return float(np.max(np.abs(curl_callable(A, points))))


@dataclass
class HolonomyReport:
    integrals: np.ndarray
    values: np.ndarray
    distances: np.ndarray
    trivial: bool
    tol: float
    closedness: float

    def rows(self) -> list:
        return [
            {"loop": i, "integral_over_2pi": float(I.real / TWO_PI), "distance_to_Z": float(d)}
            for i, (I, d) in enumerate(zip(self.integrals, self.distances))
        ]

    @property
    def offending(self) -> list:
        return [i for i, d in enumerate(self.distances) if d > self.tol]


def loop_holonomy(
    A: FormLike,
    loops: Sequence[Curve],
    tol: float = 1e-4,
    mask: Optional[np.ndarray] = None,
    points=None,
    closed_tol: float = 1e-6,
) -> HolonomyReport:
    """``P_gamma = exp(-i int_gamma A)`` per loop; trivial when every integral is in ``2 pi Z``."""
    for c in loops:
        if not c.closed:
            raise ValueError("holonomy needs closed loops")
    if points is None and not isinstance(A, SampledOneForm):
        points = np.concatenate([c.x for c in loops])
    defect = closedness_defect(A, mask, points)
    if defect > closed_tol:
        raise ClosednessError(f"|dA| = {defect:.2e} exceeds {closed_tol:g}; holonomy is not homotopy invariant")
    I = np.array([line_integral(A, c) for c in loops])
    k = I.real / TWO_PI
    dist = np.abs(k - np.round(k))
    return HolonomyReport(I, np.exp(-1j * I), dist, bool(np.all(dist <= tol)), tol, defect)


# ---------------------------------------------------------------------------
# gauge construction


def _edge_integrals(A: SampledOneForm):
    """Fourth order integrals of ``A`` over grid edges, along x (``ex``) and y (``ey``)."""
    g = A.grid
    hx, hy = g.spacing
    Ax, Ay = A.components
    dAx = partial(Ax, 0, hx, 2)
    dAy = partial(Ay, 1, hy, 2)
    # corrected trapezoid: h (f0 + f1) / 2 - h^2 (f1' - f0') / 12
    ex = 0.5 * hx * (Ax[:-1, :] + Ax[1:, :]) - hx * hx * (dAx[1:, :] - dAx[:-1, :]) / 12.0
    ey = 0.5 * hy * (Ay[:, :-1] + Ay[:, 1:]) - hy * hy * (dAy[:, 1:] - dAy[:, :-1]) / 12.0
    return ex, ey


def _tree_potential(ex, ey, mask, base, order):
    """Integral of ``A`` from ``base`` along a BFS spanning tree of the masked grid."""
    nx, ny = mask.shape
    phi = np.full(mask.shape, np.nan)
    phi[base] = 0.0
    dq = deque([base])
    while dq:
        i, j = dq.popleft()
        for di, dj in order:
            a, b = i + di, j + dj
            if 0 <= a < nx and 0 <= b < ny and mask[a, b] and np.isnan(phi[a, b]):
                if di == 1:
                    step = ex[i, j]
                elif di == -1:
                    step = -ex[a, b]
                elif dj == 1:
                    step = ey[i, j]
                else:
                    step = -ey[a, b]
                phi[a, b] = phi[i, j] + step
                dq.append((a, b))
    return phi


@dataclass
class GaugeResult:
    F: SampledField
    path_discrepancy: float
    boundary_error: Optional[float]
    conjugation_error: float
    min_modulus: float
    info: dict = field(default_factory=dict)


def build_gauge(
    A: SampledOneForm,
    mask: Optional[np.ndarray] = None,
    base_points: Optional[Sequence[tuple]] = None,
    loops: Optional[Sequence[Curve]] = None,
    tol: float = 1e-6,
    conj_tol: float = 1e-5,
    boundary_mask: Optional[np.ndarray] = None,
) -> GaugeResult:
    """``F = exp(i int A)`` from base points, certified by two spanning trees.

    ``mask`` marks the nodes of the domain.  ``boundary_mask`` selects the
    nodes where ``F = 1`` is required (default: the outer layer of the
    domain when ``A.tangential_zero`` is set, otherwise not checked).
    """
    g = A.grid
    if g.ndim != 2:
        raise ValueError("gauge construction works on planar grids")
    mask = np.ones(g.shape, bool) if mask is None else np.asarray(mask, bool)
    if loops:
        rep = loop_holonomy(A, loops, mask=mask)
        if not rep.trivial:
            raise GaugeError(f"non-trivial holonomy on loop {rep.offending[0]}")
    labels, n_comp = label(mask)
    if base_points is None:
        base_points = [tuple(np.argwhere(labels == k)[0]) for k in range(1, n_comp + 1)]
    if len(base_points) != n_comp:
        raise GaugeError("need one base point per connected component")
    ex, ey = _edge_integrals(A)
    orders = ([(1, 0), (-1, 0), (0, 1), (0, -1)], [(0, -1), (0, 1), (-1, 0), (1, 0)])
    phis = []
    for order in orders:
        phi = np.full(g.shape, np.nan)
        for bp in base_points:
            comp = labels == labels[bp]
            part = _tree_potential(ex, ey, comp, tuple(bp), order)
            phi = np.where(comp, part, phi)
        phis.append(phi)
    F1 = np.where(mask, np.exp(1j * np.nan_to_num(phis[0])), 1.0)
    F2 = np.where(mask, np.exp(1j * np.nan_to_num(phis[1])), 1.0)
    disc = float(np.max(np.abs(F1 - F2)[mask]))
    if disc > tol:
        raise GaugeError(f"spanning trees disagree by {disc:.2e}: holonomy is not trivial")
    F = SampledField(A.geom, F1)

    hx, hy = g.spacing
    dF = np.stack([partial(F1, 0, hx, 2), partial(F1, 1, hy, 2)])
    interior = binary_erosion(mask, iterations=3, border_value=0)
    resid = np.abs(A.components + 1j * dF / F1)
    conj_err = float(np.max(np.max(resid, axis=0)[interior])) if np.any(interior) else 0.0
    if conj_err > conj_tol:
        raise GaugeError(f"-i F^-1 dF misses A by {conj_err:.2e}")
    bnd = None
    if boundary_mask is None and A.tangential_zero:
        boundary_mask = mask & ~binary_erosion(mask, border_value=0)
    if boundary_mask is not None:
        bnd = float(np.max(np.abs(F1 - 1.0)[boundary_mask]))
    return GaugeResult(F, disc, bnd, conj_err, float(np.min(np.abs(F1)[mask])), {"components": n_comp})

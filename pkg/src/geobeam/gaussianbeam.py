"""Gaussian beam quasimodes along transversal geodesics.

The manifold is ``R x M0`` with the product metric ``e + g0`` (conformal
factors are removed beforehand with ``fields.conformal_reduce``), so the
total dimension is 3 and the transversal variable ``y`` of the Fermi frame
is a scalar.  Beams have the form

    v = e^{i s phi} mu^{1/4} a0(x1, t) chi(y / delta')
    phi = t + H(t) y^2 / 2,    H' + H^2 = F

with ``s = 1/h + i lam``.  The v-beam is a quasimode of ``e^{s x1} L e^{-s x1}``
and the w-beam of ``e^{-s x1} L_conj e^{s x1}``.  Nothing of the form
``e^{+-s x1}`` is ever evaluated: only ``|e^{i s phi}| = e^{-mu Im phi - lam Re phi}``
enters the quadratures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline, RectBivariateSpline
from scipy.optimize import brentq

from .dbar import PlaneField, cauchy_solve
from .errors import ConstructionError, ContractError, GluingError, ParameterError
from .fields import (
    Grid,
    GridMetric,
    PointSampler,
    ResidualDecomposition,
    SampledField,
    SampledOneForm,
    SemiclassicalParams,
    divergence_form,
    mollify,
    norm_scl,
)
from .geometry import FermiFrame, GeodesicPath, MetricChart, fermi_coordinates

N_TRANSVERSAL = 1  # n - 2 for n = 3


# ---------------------------------------------------------------------------
# cutoff


def _psi(x):
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)


def smooth_step(u):
    """C-infinity step: 0 for ``u <= 0``, 1 for ``u >= 1``."""
    a, b = _psi(u), _psi(1.0 - u)
    return a / (a + b)


def cutoff(u, order: int = 0, eps: float = 1e-5):
    """``chi(u)``: 1 for ``|u| <= 1/4``, 0 for ``|u| >= 1/2``; derivatives by differences."""
    u = np.asarray(u, dtype=float)

    def chi(v):
        return smooth_step(2.0 - 4.0 * np.abs(v))

    if order == 0:
        return chi(u)
    if order == 1:
        return (chi(u + eps) - chi(u - eps)) / (2 * eps)
    if order == 2:
        return (chi(u + eps) - 2 * chi(u) + chi(u - eps)) / (eps * eps)
    raise ValueError("order must be 0, 1 or 2")


# ---------------------------------------------------------------------------
# Riccati equation


@dataclass
class RiccatiSolution:
    t: np.ndarray
    H: np.ndarray
    F: np.ndarray
    H0: np.ndarray
    t0: float
    f: np.ndarray  # f(t) with f' = -tr(H) / 2, f(t0) = f0
    int_tr_re: np.ndarray  # int_{t0}^t tr Re H
    source: Optional[Callable] = None

    def __post_init__(self):
        Hdot = self.F - self.H @ self.H
        k = self.H.shape[-1]
        self._Hs = CubicHermiteSpline(self.t, self.H.reshape(len(self.t), -1), Hdot.reshape(len(self.t), -1), axis=0)
        self._fs = CubicHermiteSpline(self.t, self.f, -0.5 * np.trace(self.H, axis1=-2, axis2=-1))
        self._k = k

    @property
    def dim(self) -> int:
        return self._k

    def H_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self._Hs(t).reshape(t.shape + (self._k, self._k))

    def F_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.source is None:
            return np.zeros(t.shape + (self._k, self._k))
        return np.asarray(self.source(t), dtype=complex).reshape(t.shape + (self._k, self._k))

    def Hdot_at(self, t) -> np.ndarray:
        H = self.H_at(t)
        return self.F_at(t) - H @ H

    def Hddot_at(self, t, dt: float = 1e-4) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        H = self.H_at(t)
        Hd = self.F_at(t) - H @ H
        Fd = (self.F_at(t + dt) - self.F_at(t - dt)) / (2 * dt) if self.source is not None else 0.0
        return Fd - Hd @ H - H @ Hd

    def f_at(self, t) -> np.ndarray:
        return self._fs(np.asarray(t, dtype=float))

    def im_min_eigenvalue(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.H.imag)))

    def asymmetry(self) -> float:
        return float(np.max(np.abs(self.H - np.swapaxes(self.H, -1, -2))))

    def residual(self) -> float:
        """``max |H' + H^2 - F|`` at interior nodes with a fourth order difference of ``H``."""
        H, t = self.H, self.t
        if len(t) < 5:
            return 0.0
        dt = t[1] - t[0]
        Hd = (H[:-4] - 8 * H[1:-3] + 8 * H[3:-1] - H[4:]) / (12 * dt)
        Hm = H[2:-2]
        return float(np.max(np.abs(Hd + Hm @ Hm - self.F[2:-2])))

    def det_identity_error(self) -> float:
        """Relative error of ``det Im H(t) = det Im H(t0) exp(-2 int tr Re H)``."""
        lhs = np.linalg.det(self.H.imag)
        rhs = np.linalg.det(self.H0.imag) * np.exp(-2.0 * self.int_tr_re)
        return float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))


def _riccati_rhs(F, H):
    return F - H @ H


def solve_riccati(
    F: Optional[Callable],
    H0,
    t_range: tuple,
    t0: Optional[float] = None,
    step: float = 1e-3,
    f0: complex = 0.0,
    tol: float = 1e-6,
    max_refine: int = 3,
) -> RiccatiSolution:
    """RK4 solve of ``H' + H^2 = F`` on ``t_range`` from ``H(t0) = H0``.

    ``F`` maps an array of times to ``(..., k, k)`` symmetric matrices (or is
    None for ``F = 0``).  The transport factor ``f' = -tr H / 2`` and
    ``int tr Re H`` are integrated alongside.
    """
    H0 = np.atleast_2d(np.asarray(H0, dtype=complex))
    k = H0.shape[0]
    if np.max(np.abs(H0 - H0.T)) > 1e-12:
        raise ParameterError("H0 must be complex symmetric")
    if np.min(np.linalg.eigvalsh(H0.imag)) <= 0:
        raise ParameterError("Im H0 must be positive definite")
    a, b = float(t_range[0]), float(t_range[1])
    t0 = a if t0 is None else float(t0)
    if not a <= t0 <= b:
        raise ParameterError("t0 must lie in t_range")

    def table(ts):
        # F at the nodes and midpoints in one vectorised call
        if F is None:
            z = np.zeros((len(ts), k, k), dtype=complex)
            return z, z[:-1]
        mids = 0.5 * (ts[:-1] + ts[1:])
        vals = np.asarray(F(np.concatenate([ts, mids])), dtype=complex).reshape(-1, k, k)
        return vals[: len(ts)], vals[len(ts) :]

    for _ in range(max_refine + 1):
        n_lo = max(1, int(np.ceil((t0 - a) / step))) if t0 > a else 0
        n_hi = max(1, int(np.ceil((b - t0) / step))) if b > t0 else 0
        t_lo = np.linspace(t0, a, n_lo + 1)
        t_hi = np.linspace(t0, b, n_hi + 1)

        def march(ts):
            Fn, Fmid = table(ts)
            Hs, fs, gs = [H0], [complex(f0)], [0.0]
            H, f, g = H0, complex(f0), 0.0
            for i in range(len(ts) - 1):
                dt = ts[i + 1] - ts[i]
                Fa, Fm_, Fb = Fn[i], Fmid[i], Fn[i + 1]
                k1 = _riccati_rhs(Fa, H)
                H2 = H + 0.5 * dt * k1
                k2 = _riccati_rhs(Fm_, H2)
                H3 = H + 0.5 * dt * k2
                k3 = _riccati_rhs(Fm_, H3)
                H4 = H + dt * k3
                k4 = _riccati_rhs(Fb, H4)
                Hn = H + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                tr = [np.trace(M) for M in (H, H2, H3, H4)]
                f = f + dt / 6.0 * -0.5 * (tr[0] + 2 * tr[1] + 2 * tr[2] + tr[3])
                g = g + dt / 6.0 * (tr[0].real + 2 * tr[1].real + 2 * tr[2].real + tr[3].real)
                H = Hn
                Hs.append(H)
                fs.append(f)
                gs.append(g)
            return np.array(Hs), np.array(fs), np.array(gs), Fn

        Hl, fl, gl, Fl = march(t_lo)
        Hh, fh, gh, Fh = march(t_hi)
        t = np.concatenate([t_lo[::-1], t_hi[1:]])
        H = np.concatenate([Hl[::-1], Hh[1:]])
        fv = np.concatenate([fl[::-1], fh[1:]])
        gv = np.concatenate([gl[::-1], gh[1:]])
        Fv = np.concatenate([Fl[::-1], Fh[1:]])
        sol = RiccatiSolution(t, H, Fv, H0, t0, fv, gv, F)
        if sol.im_min_eigenvalue() <= 0:
            raise ConstructionError("Im H lost positive definiteness")
        if _uniform(t) and sol.residual() < tol:
            return sol
        if not _uniform(t):
            return sol
        step *= 0.5
    raise ConstructionError("Riccati residual check failed after refinement")


def _uniform(t):
    d = np.diff(t)
    return np.allclose(d, d[0], rtol=1e-9, atol=1e-14)


def riccati_source(frame: FermiFrame) -> Optional[Callable]:
    """Source ``F(t)`` of the Riccati equation from the frame metric (None when flat)."""
    if frame.chart.flat:
        return None

    def F(t):
        return frame.source_matrix(np.asarray(t, dtype=float))

    return F


def normalization_constant(H0) -> complex:
    """``f(t0)`` such that ``e^{2 f(t0)} pi^{(n-2)/2} / sqrt(det Im H0) = 1``."""
    H0 = np.atleast_2d(np.asarray(H0, dtype=complex))
    return 0.5 * np.log(np.sqrt(np.linalg.det(H0.imag)) / np.pi ** (N_TRANSVERSAL / 2.0))


# ---------------------------------------------------------------------------
# phase


@dataclass
class FrameData:
    """Frame metric quantities at ``(t, y)`` nodes.

    ``Ginv`` is the inverse frame metric, ``sqrtG`` its volume density and
    ``b`` the first order coefficients of the Laplacian,
    ``Delta f = G^{ab} f_ab + b^a f_a``.  ``J`` is the Jacobian of the
    frame map (columns ``d/dt``, ``d/dy``).
    """

    Ginv: np.ndarray
    sqrtG: np.ndarray
    b: np.ndarray
    J: np.ndarray
    x: np.ndarray


def frame_data(frame: FermiFrame, t, y, fd: float = 1e-3) -> FrameData:
    t, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float))
    x = frame.chart_map(t, y)
    J = frame.jacobian(t, y)
    if frame.chart.flat:
        shape = t.shape
        Ginv = np.broadcast_to(np.eye(2), shape + (2, 2)).copy()
        return FrameData(Ginv, np.ones(shape), np.zeros(shape + (2,)), J, x)
    G = np.einsum("...ia,...ij,...jb->...ab", J, frame.chart.metric(x), J)
    Ginv = np.linalg.inv(G)
    sqrtG = np.sqrt(np.linalg.det(G))

    def flux(tt, yy):
        Gm = frame.metric_in_frame(tt, yy)
        return np.sqrt(np.linalg.det(Gm))[..., None, None] * np.linalg.inv(Gm)

    dt_flux = (flux(t + fd, y) - flux(t - fd, y)) / (2 * fd)
    dy_flux = (flux(t, y + fd) - flux(t, y - fd)) / (2 * fd)
    b = (dt_flux[..., 0, :] + dy_flux[..., 1, :]) / sqrtG[..., None]
    return FrameData(Ginv, sqrtG, b, J, x)


@dataclass
class BeamPhase:
    frame: FermiFrame
    ric: RiccatiSolution

    def phi(self, t, y) -> np.ndarray:
        H = self.ric.H_at(t)[..., 0, 0]
        return np.asarray(t) + 0.5 * H * np.asarray(y) ** 2

    def derivatives(self, t, y) -> dict:
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        H = self.ric.H_at(t)[..., 0, 0]
        Hd = self.ric.Hdot_at(t)[..., 0, 0]
        Hdd = self.ric.Hddot_at(t)[..., 0, 0]
        return {
            "phi": t + 0.5 * H * y * y,
            "t": 1.0 + 0.5 * Hd * y * y,
            "y": H * y,
            "tt": 0.5 * Hdd * y * y,
            "ty": Hd * y,
            "yy": H + 0.0 * y,
        }

    def eikonal_defect(self, t, y, data: Optional[FrameData] = None) -> np.ndarray:
        """``<d phi, d phi>_{g0} - 1``."""
        d = self.derivatives(t, y)
        if data is None:
            data = frame_data(self.frame, t, y)
        G = data.Ginv
        return G[..., 0, 0] * d["t"] ** 2 + 2 * G[..., 0, 1] * d["t"] * d["y"] + G[..., 1, 1] * d["y"] ** 2 - 1.0

    def im_lower_constant(self) -> float:
        return 0.5 * self.ric.im_min_eigenvalue()


def fit_exponent(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    keep = y > 0
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def build_phase(frame: FermiFrame, ric: RiccatiSolution, check: bool = True, min_exponent: float = 2.5) -> BeamPhase:
    """Phase ``t + H y^2 / 2``; verifies the eikonal defect decays at least cubically."""
    phase = BeamPhase(frame, ric)
    if check:
        ts = np.linspace(ric.t[0], ric.t[-1], 9)[1:-1]
        ys = frame.half_width * np.geomspace(0.02, 0.2, 6)
        T, Y = np.meshgrid(ts, ys, indexing="ij")
        D = np.abs(phase.eikonal_defect(T, Y))
        worst = np.max(D, axis=0)
        if np.max(worst) < 1e-13:
            phase.defect_exponent = np.inf
            return phase
        p = fit_exponent(ys, worst)
        phase.defect_exponent = p
        if p < min_exponent:
            raise ConstructionError(f"eikonal defect decays like |y|^{p:.2f}; the Riccati source is inconsistent")
    return phase


# ---------------------------------------------------------------------------
# potentials on the three dimensional chart


class Potential:
    """Magnetic potential ``A`` on the chart ``(x1, x')`` with its mollification.

    ``A`` is a ``SampledOneForm`` on a 3-D grid (extended by zero).  An
    optional ``exact`` callable ``points (..., 3) -> (3, ...)`` gives the
    unmollified values without interpolation error.
    """

    def __init__(self, A: Optional[SampledOneForm], tau: Optional[float] = None, exact: Optional[Callable] = None, conjugate: bool = False):
        self.A = A
        self.tau = tau
        self.conjugate = conjugate
        if A is None:
            self.zero = True
            return
        self.zero = False
        comps = np.conj(A.components) if conjugate else A.components
        ex = None
        if exact is not None:
            ex = (lambda p: np.conj(exact(p))) if conjugate else exact
        self.raw = PointSampler(A.grid, comps, ex)
        if tau is None:
            self.smooth = PointSampler(A.grid, comps, ex)
            self.smooth_div = PointSampler(A.grid, divergence_form(comps, A.geom))
        else:
            At = mollify(SampledOneForm(A.geom, comps), tau).components
            self.smooth = PointSampler(A.grid, At)
            self.smooth_div = PointSampler(A.grid, divergence_form(At, A.geom))

    def values(self, pts, smooth: bool = False):
        if self.zero:
            return np.zeros((3,) + np.asarray(pts).shape[:-1])
        return (self.smooth if smooth else self.raw)(pts)

    def codifferential(self, pts):
        if self.zero:
            return np.zeros(np.asarray(pts).shape[:-1])
        return self.smooth_div(pts)


class Scalar:
    def __init__(self, q: Optional[SampledField], exact: Optional[Callable] = None, conjugate: bool = False):
        self.zero = q is None and exact is None
        if self.zero:
            return
        if q is None:
            self.fn = (lambda p: np.conj(exact(p))) if conjugate else exact
        else:
            vals = np.conj(q.values) if conjugate else q.values
            ex = None if exact is None else ((lambda p: np.conj(exact(p))) if conjugate else exact)
            self.fn = PointSampler(q.grid, vals, ex)

    def __call__(self, pts):
        if self.zero:
            return np.zeros(np.asarray(pts).shape[:-1])
        return self.fn(pts)


# ---------------------------------------------------------------------------
# amplitude


@dataclass
class BeamAmplitude:
    x1: np.ndarray
    t: np.ndarray
    a0: np.ndarray
    Phi: np.ndarray
    f: np.ndarray
    eta: np.ndarray
    tau: Optional[float]
    kind: str
    f0: complex
    transport_residual: float = np.nan

    def __post_init__(self):
        self._splines = {}
        for name, arr in (("a0", self.a0), ("Phi", self.Phi)):
            self._splines[name] = (
                RectBivariateSpline(self.x1, self.t, arr.real, kx=5, ky=5),
                RectBivariateSpline(self.x1, self.t, arr.imag, kx=5, ky=5),
            )

    def eval(self, x1, t, d1: int = 0, dt: int = 0, name: str = "a0") -> np.ndarray:
        re, im = self._splines[name]
        x1, t = np.broadcast_arrays(np.asarray(x1, float), np.asarray(t, float))
        return re.ev(x1, t, dx=d1, dy=dt) + 1j * im.ev(x1, t, dx=d1, dy=dt)


def axis_components(frame: FermiFrame, pot: Potential, x1, t, smooth: bool = True):
    """``(A_1, A_t)`` at ``(x1, gamma(t), y=0)``."""
    X1, T = np.meshgrid(x1, t, indexing="ij")
    xb = frame.chart_map(T, np.zeros_like(T))
    J = frame.jacobian(T[0], np.zeros_like(T[0]))
    pts = np.concatenate([X1[..., None], xb], axis=-1)
    A = pot.values(pts, smooth=smooth)
    A1 = A[0]
    At = A[1] * J[None, :, 0, 0] + A[2] * J[None, :, 1, 0]
    return A1, At


def build_amplitude(
    frame: FermiFrame,
    ric: RiccatiSolution,
    pot: Potential,
    kind: str = "v",
    x1_range: tuple = (-1.5, 1.5),
    t_range: Optional[tuple] = None,
    spacing: float = 0.02,
    eta: Optional[Callable] = None,
    f0: Optional[complex] = None,
) -> BeamAmplitude:
    """Solve the transport equations for ``a0 = e^{Phi + f} eta`` (v) or ``b0 = e^{Phi + f}`` (w).

    v:  d Phi = -(i A_1 + A_t) / 2        with d = (d_x1 - i d_t) / 2
    w:  dbar Phi = (-i conj A_1 + conj A_t) / 2   with dbar = (d_x1 + i d_t) / 2

    (for the w-beam the potential passed in is already conjugated).
    ``Phi`` is the Cauchy transform of the right side on an ``(x1, t)``
    grid covering ``x1_range`` and ``t_range``; the right side must vanish
    near the grid edge.
    """
    if kind not in ("v", "w"):
        raise ParameterError("kind must be 'v' or 'w'")
    if t_range is None:
        t_range = (ric.t[0], ric.t[-1])
    if pot.tau is not None:
        # resolve the mollified potential with at least a dozen nodes per tau
        spacing = min(spacing, pot.tau / 12.0)
    nx = int(np.ceil((x1_range[1] - x1_range[0]) / spacing)) + 1
    nt = int(np.ceil((t_range[1] - t_range[0]) / spacing)) + 1
    x1 = np.linspace(x1_range[0], x1_range[1], nx)
    t = np.linspace(t_range[0], t_range[1], nt)
    grid = Grid((x1, t))
    A1, At = axis_components(frame, pot, x1, t, smooth=True)
    if kind == "v":
        rhs = -0.5 * (1j * A1 + At)
        which = "d"
    else:
        rhs = 0.5 * (-1j * A1 + At)
        which = "dbar"
    if pot.zero or np.max(np.abs(rhs)) == 0:
        Phi = np.zeros(grid.shape, dtype=complex)
    else:
        Phi = cauchy_solve(PlaneField(grid, rhs), which).values
    f0 = normalization_constant(ric.H0) if f0 is None else f0
    if abs(ric.f[np.argmin(np.abs(ric.t - ric.t0))] - f0) > 1e-14:
        ric = _with_f0(ric, f0)
    fv = ric.f_at(t)
    X1, T = np.meshgrid(x1, t, indexing="ij")
    ev = np.ones_like(X1, dtype=complex) if (eta is None or kind == "w") else np.asarray(eta(X1, T), dtype=complex)
    a0 = np.exp(Phi + fv[None, :]) * ev
    amp = BeamAmplitude(x1, t, a0, Phi, fv, ev, pot.tau, kind, f0)
    amp.transport_residual = _transport_residual(amp, ric, A1, At)
    return amp


def _with_f0(ric: RiccatiSolution, f0) -> RiccatiSolution:
    k0 = np.argmin(np.abs(ric.t - ric.t0))
    shift = f0 - ric.f[k0]
    return RiccatiSolution(ric.t, ric.H, ric.F, ric.H0, ric.t0, ric.f + shift, ric.int_tr_re, ric.source)


def _transport_residual(amp: BeamAmplitude, ric: RiccatiSolution, A1, At) -> float:
    """Max-norm residual of the transport equation on the grid interior, relative to ``max |a0|``."""
    from .fields import partial

    hx, ht = amp.x1[1] - amp.x1[0], amp.t[1] - amp.t[0]
    a = amp.a0
    trH = np.trace(ric.H_at(amp.t), axis1=-2, axis2=-1)[None, :]
    if amp.kind == "v":
        lhs = partial(a, 0, hx) - 1j * partial(a, 1, ht)
        rhs = 0.5 * (-2j * A1 - 2 * At + 1j * trH) * a
    else:
        lhs = partial(a, 0, hx) + 1j * partial(a, 1, ht)
        rhs = 0.5 * (-2j * A1 + 2 * At - 1j * trH) * a
    r = np.abs(lhs - rhs)[4:-4, 4:-4]
    return float(np.max(r) / np.max(np.abs(a)))


# ---------------------------------------------------------------------------
# assembled beam


@dataclass
class BeamSegment:
    t_lo: float
    t_hi: float
    ric: RiccatiSolution
    phase: BeamPhase
    amplitude: BeamAmplitude


@dataclass
class GaussianBeam:
    frame: FermiFrame
    phase: BeamPhase
    amplitude: BeamAmplitude
    params: SemiclassicalParams
    kind: str
    delta_prime: float
    x1_range: tuple
    t_range: tuple
    pot: Potential
    segments: list = field(default_factory=list)
    intersections: list = field(default_factory=list)

    @property
    def tau(self) -> Optional[float]:
        return self.amplitude.tau

    @property
    def length(self) -> float:
        return self.frame.base_geodesic.length

    def modulus_factor(self, t, y) -> np.ndarray:
        """``e^{i s phi}`` evaluated stably (the phase is bounded here)."""
        ph = self.phase.phi(t, y)
        return np.exp(1j * self.params.s * ph)

    def evaluate(self, x1, t, y) -> np.ndarray:
        mu = self.params.mu
        a0 = self.amplitude.eval(x1, t)
        chi = cutoff(np.asarray(y) / self.delta_prime)
        return self.modulus_factor(t, y) * mu ** (N_TRANSVERSAL / 4.0) * a0 * chi

    def gradient(self, x1, t, y) -> np.ndarray:
        """Components ``(d_x1, d_t, d_y)`` of the beam."""
        mu = self.params.mu
        s = self.params.s
        dp = self.phase.derivatives(t, y)
        a0 = self.amplitude.eval(x1, t)
        a1 = self.amplitude.eval(x1, t, d1=1)
        at = self.amplitude.eval(x1, t, dt=1)
        u = np.asarray(y) / self.delta_prime
        chi, dchi = cutoff(u), cutoff(u, 1) / self.delta_prime
        e = self.modulus_factor(t, y) * mu ** (N_TRANSVERSAL / 4.0)
        return np.stack([
            e * a1 * chi,
            e * (at + 1j * s * dp["t"] * a0) * chi,
            e * a0 * (dchi + 1j * s * dp["y"] * chi),
        ])


def _polyline_self_intersections(x: np.ndarray, skip: int = 3):
    """Pairs ``(i, j, angle)`` of crossing polyline segments (sweep over all pairs)."""
    p, q = x[:-1], x[1:]
    d = q - p
    out = []
    n = len(p)
    for i in range(n):
        j = np.arange(i + skip, n)
        if len(j) == 0:
            continue
        r = d[i]
        s_ = d[j]
        denom = r[0] * s_[:, 1] - r[1] * s_[:, 0]
        w = p[j] - p[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (w[:, 0] * s_[:, 1] - w[:, 1] * s_[:, 0]) / denom
            tb = (w[:, 0] * r[1] - w[:, 1] * r[0]) / denom
        hit = (np.abs(denom) > 0) & (ta >= 0) & (ta < 1) & (tb >= 0) & (tb < 1)
        for k in np.flatnonzero(hit):
            jj = j[k]
            cosang = abs(np.dot(r, s_[k])) / (np.linalg.norm(r) * np.linalg.norm(s_[k]))
            out.append((i, int(jj), float(np.arccos(min(1.0, cosang)))))
    return out


def assemble_quasimode(
    chart: MetricChart,
    geo: GeodesicPath,
    A: Optional[SampledOneForm],
    q: Optional[SampledField],
    params: SemiclassicalParams,
    kind: str = "v",
    sigma: float = 0.4,
    delta_prime: float = 0.4,
    x1_range: tuple = (-1.0, 1.0),
    extension: float = 0.1,
    H0=None,
    t0: Optional[float] = None,
    eta: Optional[Callable] = None,
    A_exact: Optional[Callable] = None,
    transversality: float = 0.1,
    spacing: float = 0.02,
    pad: float = 0.5,
    n_segments: Optional[int] = None,
) -> GaussianBeam:
    """Gaussian beam along ``geo`` on ``R x chart`` with ``tau = h^sigma``.

    For the w-beam pass the potential of the second operator unconjugated;
    it is conjugated here.  Self-intersections of the geodesic are located
    on the sampled path; crossings at angles below ``transversality`` raise
    ``GluingError``.  The beam is assembled from segments whose Riccati and
    transport data are matched at the segment junctions.
    """
    if not 0.0 < sigma < 0.5:
        raise ParameterError("sigma must lie in (0, 1/2)")
    tau = params.h**sigma if A is not None else None
    frame = fermi_coordinates(chart, geo, delta_prime, extension=extension + pad)
    L = geo.length
    t0 = 0.5 * L if t0 is None else t0
    H0 = 1j * np.eye(N_TRANSVERSAL) if H0 is None else np.atleast_2d(H0)
    t_range = (-extension, L + extension)
    crossings = _polyline_self_intersections(geo.x)
    for i, j, ang in crossings:
        if ang < transversality:
            raise GluingError(f"self-intersection at samples {i}, {j} is not transversal (angle {ang:.3g})")
    F = riccati_source(frame)
    full_range = (t_range[0] - pad, t_range[1] + pad)
    ric = solve_riccati(F, H0, full_range, t0=t0, f0=normalization_constant(H0))
    phase = build_phase(frame, ric)
    pot = Potential(A, tau, A_exact, conjugate=(kind == "w"))
    amp = build_amplitude(frame, ric, pot, kind, (x1_range[0] - pad, x1_range[1] + pad), full_range, spacing, eta)
    beam = GaussianBeam(frame, phase, amp, params, kind, delta_prime, tuple(x1_range), t_range, pot)
    beam.intersections = [(geo.t[i], geo.t[j], ang) for i, j, ang in crossings]
    beam.segments = _glue_segments(beam, ric, n_segments)
    return beam


def _glue_segments(beam: GaussianBeam, ric: RiccatiSolution, n_segments: Optional[int]) -> list:
    """Re-solve the Riccati and ``f`` equations per segment from matched junction data."""
    cuts = sorted({0.5 * (a + b) for a, b, _ in beam.intersections})
    if n_segments is not None and not cuts:
        cuts = list(np.linspace(beam.t_range[0], beam.t_range[1], n_segments + 1)[1:-1])
    bounds = [ric.t[0]] + cuts + [ric.t[-1]]
    segs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        tj = min(max(ric.t0, lo), hi)
        Hj = ric.H_at(tj)
        fj = complex(ric.f_at(tj))
        r = solve_riccati(ric.source, Hj, (lo, hi), t0=tj, f0=fj, step=ric.t[1] - ric.t[0])
        overlap = np.linspace(lo, hi, 7)
        err = max(np.max(np.abs(r.H_at(overlap) - ric.H_at(overlap))), np.max(np.abs(r.f_at(overlap) - ric.f_at(overlap))))
        if err > 1e-8:
            raise GluingError(f"segment data disagree on overlap by {err:.2e}")
        segs.append(BeamSegment(lo, hi, r, BeamPhase(beam.frame, r), beam.amplitude))
    return segs


# ---------------------------------------------------------------------------
# residual


@dataclass
class ResidualReport:
    bound: float
    h: float
    tau: Optional[float]
    groups: dict
    smooth_l2: float
    divergence_l2: float
    cutoff: float

    def as_dict(self) -> dict:
        return {
            "h": self.h,
            "tau": self.tau,
            "bound": self.bound,
            "bound_over_h": self.bound / self.h,
            "smooth_l2": self.smooth_l2,
            "divergence_l2": self.divergence_l2,
            "cutoff": self.cutoff,
            "groups": dict(self.groups),
        }


def _gl_panels(a, b, n_panels, n_per):
    xg, wg = np.polynomial.legendre.leggauss(n_per)
    edges = np.linspace(a, b, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    w = (half[:, None] * wg[None, :]).ravel()
    return x, w


def _bracket_terms(beam: GaussianBeam, pot: Potential, qs: Scalar, X1, T, Y, data: FrameData, sgn: float):
    """All residual groups (before multiplication by ``h^2 e^{i s phi}``) at the nodes."""
    p = beam.params
    s, mu = p.s, p.mu
    amp = beam.amplitude
    dp = beam.phase.derivatives(T, Y)
    c = mu ** (N_TRANSVERSAL / 4.0)
    u = Y / beam.delta_prime
    chi = cutoff(u)
    dchi = cutoff(u, 1) / beam.delta_prime
    ddchi = cutoff(u, 2) / beam.delta_prime**2
    a0 = amp.eval(X1, T)
    a0_1 = amp.eval(X1, T, d1=1)
    a0_t = amp.eval(X1, T, dt=1)
    a0_11 = amp.eval(X1, T, d1=2)
    a0_tt = amp.eval(X1, T, dt=2)
    a = c * a0 * chi
    a_1 = c * a0_1 * chi
    a_t = c * a0_t * chi
    a_y = c * a0 * dchi
    a_11 = c * a0_11 * chi
    a_tt = c * a0_tt * chi
    a_ty = c * a0_t * dchi
    a_yy = c * a0 * ddchi
    Gi, b = data.Ginv, data.b

    def pair2(ut, uy, vt, vy):
        return Gi[..., 0, 0] * ut * vt + Gi[..., 0, 1] * (ut * vy + uy * vt) + Gi[..., 1, 1] * uy * vy

    lap_a = a_11 + Gi[..., 0, 0] * a_tt + 2 * Gi[..., 0, 1] * a_ty + Gi[..., 1, 1] * a_yy + b[..., 0] * a_t + b[..., 1] * a_y
    lap_phi = Gi[..., 0, 0] * dp["tt"] + 2 * Gi[..., 0, 1] * dp["ty"] + Gi[..., 1, 1] * dp["yy"] + b[..., 0] * dp["t"] + b[..., 1] * dp["y"]
    dphi_dphi = pair2(dp["t"], dp["y"], dp["t"], dp["y"])
    dphi_da = pair2(dp["t"], dp["y"], a_t, a_y)

    full = np.broadcast_shapes(X1.shape, T.shape)
    pts = np.concatenate([np.broadcast_to(X1, full)[..., None], np.broadcast_to(data.x, full + (2,))], axis=-1)
    J = data.J

    def to_frame(Ac):
        A1 = Ac[0]
        At = Ac[1] * J[..., 0, 0] + Ac[2] * J[..., 1, 0]
        Ay = Ac[1] * J[..., 0, 1] + Ac[2] * J[..., 1, 1]
        return A1, At, Ay

    A1, At, Ay = to_frame(pot.values(pts, smooth=False))
    S1, St, Sy = to_frame(pot.values(pts, smooth=True))
    dstar_S = pot.codifferential(pts)
    B1, Bt, By = A1 - S1, At - St, Ay - Sy
    q = qs(pts)

    def pairA(U, V):
        return U[0] * V[0] + pair2(U[1], U[2], V[1], V[2])

    da = (a_1, a_t, a_y)
    dphi = (0.0, dp["t"], dp["y"])
    A, S, B = (A1, At, Ay), (S1, St, Sy), (B1, Bt, By)
    groups = {
        "eikonal": s * s * (dphi_dphi - 1.0) * a,
        "transport": s * (2 * sgn * a_1 - 2j * dphi_da - 1j * lap_phi * a + 2 * a * pairA(dphi, S) + 2j * sgn * S1 * a),
        "rough_first_order": s * (pairA(dphi, B) * a + 2j * sgn * B1 * a),
        "laplacian": -lap_a,
        "magnetic_first_order": 1j * (a * dstar_S - pairA(S, da)) - 1j * pairA(A, da),
        "magnetic_zeroth_order": pairA(A, A) * a,
        "potential": q * a,
    }
    divergence = 1j * np.stack([B1 * a, Bt * a, By * a])
    return groups, divergence, dp


def residual_bound(
    beam: GaussianBeam,
    A: Optional[SampledOneForm] = None,
    q: Optional[SampledField] = None,
    tau: Optional[float] = None,
    q_exact: Optional[Callable] = None,
    n_x1: int = 48,
    n_t: int = 160,
    z_max: Optional[float] = None,
    n_z: int = 81,
    n_cut: int = 24,
) -> ResidualReport:
    """Certified ``H^{-1}_scl`` bound of ``e^{+-s x1} h^2 L e^{-+s x1} beam``.

    The residual is written as ``w0 + d^*(w1)`` with
    ``w1 = i h^2 e^{i s phi} (A - A_tau) a`` and the bound is
    ``|w0| + |w1| / h`` (L^2 norms over ``x1_range x`` tube).  ``A`` must be
    the potential the beam was built with; it is taken from the beam.
    """
    if tau is not None and beam.tau is not None and abs(tau - beam.tau) > 1e-14:
        raise ContractError("smoothing length differs from the one used to build the beam")
    if A is not None and A is not beam.pot.A:
        raise ContractError("residual must be evaluated with the potential used for the beam")
    p = beam.params
    h, mu, s = p.h, p.mu, p.s
    sgn = 1.0 if beam.kind == "v" else -1.0
    qs = Scalar(q, q_exact, conjugate=(beam.kind == "w"))
    pot = beam.pot

    x1, w1q = _gl_panels(beam.x1_range[0], beam.x1_range[1], max(1, n_x1 // 8), 8)
    t, wt = _gl_panels(beam.t_range[0], beam.t_range[1], max(1, n_t // 8), 8)
    im_min = beam.phase.ric.im_min_eigenvalue()
    if z_max is None:
        z_max = np.sqrt(80.0 / im_min)
    y_core = min(z_max / np.sqrt(mu), beam.delta_prime / 4.0)
    yc, wy = _gl_panels(-y_core, y_core, max(1, n_z // 9), 9)

    def integrate(yn, wyn):
        T, Y = np.meshgrid(t, yn, indexing="ij")
        data = frame_data(beam.frame, T, Y)
        X1 = x1[:, None, None]
        groups, div, dp = _bracket_terms(beam, pot, qs, X1, T[None], Y[None], data, sgn)
        # |e^{i s phi}| = exp(-Im(s phi)); the oscillating factor has modulus one
        e = np.exp(1j * s * dp["phi"])[None]
        W = w1q[:, None, None] * (wt[:, None] * wyn[None, :] * data.sqrtG)[None]
        return groups, div, e, W, data

    groups, div, e, W, data = integrate(yc, wy)
    h2e = h * h * e
    total = sum(groups.values())
    w0 = h2e * total
    w1 = h2e[None] * div
    gnorm = {k: float(np.sqrt(np.sum(np.abs(h2e * v) ** 2 * W))) for k, v in groups.items()}
    Ginv3 = None
    if not beam.frame.chart.flat:
        Ginv3 = np.zeros(data.Ginv.shape[:-2] + (3, 3))
        Ginv3[..., 0, 0] = 1.0
        Ginv3[..., 1:, 1:] = data.Ginv
        Ginv3 = np.broadcast_to(Ginv3[None], w0.shape + (3, 3))
    dec = ResidualDecomposition(w0, w1, W, Ginv3)
    bound_core = norm_scl(dec, p).h_minus1_scl_bound

    # cutoff shell delta'/4 <= |y| <= delta'/2, integrated separately
    ys, ws = _gl_panels(beam.delta_prime / 4.0, beam.delta_prime / 2.0, 3, max(8, n_cut // 3))
    yy = np.concatenate([-ys[::-1], ys])
    ww = np.concatenate([ws[::-1], ws])
    g2, d2, e2, W2, _ = integrate(yy, ww)
    w0c = h * h * e2 * sum(g2.values())
    w1c = h * h * e2[None] * d2
    cut_l2 = float(np.sqrt(np.sum(np.abs(w0c) ** 2 * W2)) + np.sqrt(np.sum(np.sum(np.abs(w1c) ** 2, axis=0) * W2)) / h)
    gnorm["cutoff"] = cut_l2
    gnorm["divergence_over_h"] = float(np.sqrt(np.sum(np.sum(np.abs(w1) ** 2, axis=0) * W)) / h)
    bound = bound_core + cut_l2
    return ResidualReport(
        bound=float(bound),
        h=h,
        tau=beam.tau,
        groups=gnorm,
        smooth_l2=float(np.sqrt(np.sum(np.abs(w0) ** 2 * W))),
        divergence_l2=float(np.sqrt(np.sum(np.sum(np.abs(w1) ** 2, axis=0) * W))),
        cutoff=cut_l2,
    )


# ---------------------------------------------------------------------------
# slices, traces and concentration


def _slice_nodes(beam: GaussianBeam, n_y: int = 121, n_t: int = 400, inside: bool = True):
    """Quadrature nodes on ``M0`` near the geodesic: ``(T, Y, weights)``.

    For each ``y`` node the ``t`` interval inside ``M0`` is found by root
    finding on the boundary function, so the disk edge is resolved exactly.
    """
    mu = beam.params.mu
    im_min = beam.phase.ric.im_min_eigenvalue()
    ymax = min(np.sqrt(80.0 / im_min / mu), beam.delta_prime / 2.0)
    y, wy = _gl_panels(-ymax, ymax, max(1, n_y // 11), 11)
    fr = beam.frame
    chart = fr.chart
    L = fr.base_geodesic.length
    Ts, Ws = [], []
    xg, wg = np.polynomial.legendre.leggauss(16)
    for yk in y:
        if inside:
            b = lambda tt: float(chart.boundary(fr.chart_map(np.array(tt), np.array(yk))))
            lo_a, hi_b = fr.t_range
            mid = 0.5 * L
            if b(mid) >= 0:
                Ts.append(np.full(len(xg) * (n_t // 16), mid))
                Ws.append(np.zeros(len(xg) * (n_t // 16)))
                continue
            ta = brentq(b, lo_a, mid, xtol=1e-13) if b(lo_a) > 0 else lo_a
            tb = brentq(b, mid, hi_b, xtol=1e-13) if b(hi_b) > 0 else hi_b
        else:
            ta, tb = fr.t_range
        tt, wt = _gl_panels(ta, tb, n_t // 16, 16)
        Ts.append(tt)
        Ws.append(wt)
    T = np.array(Ts)
    Wt = np.array(Ws)
    Y = np.broadcast_to(y[:, None], T.shape)
    return T, Y, Wt * wy[:, None]


def slice_norm(beam: GaussianBeam, x1: float, n_y: int = 121, n_t: int = 400) -> float:
    """``|| beam(x1, .) ||_{L^2(M0)}``."""
    T, Y, W = _slice_nodes(beam, n_y, n_t)
    data = frame_data(beam.frame, T, Y)
    v = beam.evaluate(np.full(T.shape, x1), T, Y)
    return float(np.sqrt(np.sum(np.abs(v) ** 2 * W * data.sqrtG)))


def slice_norm_oracle(beam: GaussianBeam, x1: float, n: int = 4001) -> float:
    """Gaussian-integral prediction ``int |a0|^2 e^{-2 lam t} sqrt(pi / Im H) dt`` over ``[0, L]``."""
    L = beam.length
    t = np.linspace(0.0, L, n)
    ImH = beam.phase.ric.H_at(t)[:, 0, 0].imag
    a0 = beam.amplitude.eval(np.full_like(t, x1), t)
    integrand = np.abs(a0) ** 2 * np.exp(-2 * beam.params.lam * t) * np.sqrt(np.pi / ImH)
    from scipy.integrate import simpson

    return float(np.sqrt(simpson(integrand, x=t)))


def boundary_trace_norm(beam: GaussianBeam, x1: float, n: int = 20000) -> float:
    """``|| beam(x1, .) ||_{L^2(dM0)}`` near the two endpoints of the geodesic."""
    fr = beam.frame
    chart = fr.chart
    pts = chart.boundary_points(n)
    g = chart.metric(pts)
    nxt = np.roll(pts, -1, axis=0)
    d = nxt - pts
    ds = np.sqrt(np.einsum("ni,nij,nj->n", d, g, d))
    geo = fr.base_geodesic
    near = np.zeros(len(pts), dtype=bool)
    for end in (geo.x[0], geo.x[-1]):
        near |= np.linalg.norm(pts - end, axis=-1) < beam.delta_prime
    ty = fr.inverse_map(pts[near])
    v = beam.evaluate(np.full(len(ty), x1), ty[:, 0], ty[:, 1])
    return float(np.sqrt(np.sum(np.abs(v) ** 2 * ds[near])))


def concentration_integral(
    v: GaussianBeam,
    w: GaussianBeam,
    psi: Optional[Callable],
    x1: float,
    pairing: str = "product",
    alpha: Optional[Callable] = None,
    n_y: int = 121,
    n_t: int = 400,
) -> complex:
    """Slice integral over ``{x1} x M0`` of ``v conj(w) psi`` or the alpha pairings.

    ``alpha`` maps chart points ``(..., 3)`` to covectors ``(3, ...)`` in the
    ``(x1, x')`` chart; ``psi`` maps points of ``M0`` to scalars.
    """
    if v.kind != "v" or w.kind != "w":
        raise ContractError("pass a v-beam and a w-beam")
    if not (v.x1_range[0] <= x1 <= v.x1_range[1]):
        import warnings

        warnings.warn("slice lies outside the beam's x1 range; returning 0")
        return 0.0j
    T, Y, W = _slice_nodes(v, n_y, n_t)
    data = frame_data(v.frame, T, Y)
    X1 = np.full(T.shape, x1)
    psi_v = np.ones(T.shape) if psi is None else psi(data.x)
    vv = v.evaluate(X1, T, Y)
    ww = w.evaluate(X1, T, Y)
    if pairing == "product":
        integrand = vv * np.conj(ww)
    else:
        if alpha is None:
            raise ParameterError("alpha pairings need a one-form")
        pts = np.concatenate([X1[..., None], data.x], axis=-1)
        al = np.asarray(alpha(pts))
        J = data.J
        a1 = al[0]
        at = al[1] * J[..., 0, 0] + al[2] * J[..., 1, 0]
        ay = al[1] * J[..., 0, 1] + al[2] * J[..., 1, 1]
        Gi = data.Ginv

        def pair(grad):
            return a1 * grad[0] + Gi[..., 0, 0] * at * grad[1] + Gi[..., 0, 1] * (at * grad[2] + ay * grad[1]) + Gi[..., 1, 1] * ay * grad[2]

        h = v.params.h
        if pairing == "alpha_dv":
            integrand = h * pair(v.gradient(X1, T, Y)) * np.conj(ww)
        elif pairing == "alpha_dw":
            integrand = h * pair(np.conj(w.gradient(X1, T, Y))) * vv
        else:
            raise ParameterError(f"unknown pairing {pairing!r}")
    return complex(np.sum(integrand * psi_v * W * data.sqrtG))


def geodesic_limit(
    v: GaussianBeam,
    w: GaussianBeam,
    psi: Optional[Callable],
    x1: float,
    pairing: str = "product",
    alpha: Optional[Callable] = None,
    n: int = 2001,
) -> complex:
    """``int_0^L e^{-2 lam t} eta e^{Phi1 + conj Phi2} psi(gamma(t)) dt`` (times ``+-i alpha(gamma')``)."""
    from scipy.integrate import simpson

    L = v.length
    t = np.linspace(0.0, L, n)
    x1v = np.full_like(t, x1)
    Phi1 = v.amplitude.eval(x1v, t, name="Phi")
    Phi2 = w.amplitude.eval(x1v, t, name="Phi")
    eta = _eta_on_axis(v, x1v, t)
    xb, vb = v.frame.base_geodesic.evaluate(t)
    psi_v = np.ones_like(t) if psi is None else psi(xb)
    integrand = np.exp(-2 * v.params.lam * t) * eta * np.exp(Phi1 + np.conj(Phi2)) * psi_v
    if pairing != "product":
        pts = np.concatenate([x1v[:, None], xb], axis=-1)
        al = np.asarray(alpha(pts))
        a_gamma = al[1] * vb[:, 0] + al[2] * vb[:, 1]
        sign = 1.0 if pairing == "alpha_dv" else -1.0
        integrand = integrand * sign * 1j * a_gamma
    return complex(simpson(integrand, x=t))


def _eta_on_axis(beam: GaussianBeam, x1, t):
    amp = beam.amplitude
    re = RectBivariateSpline(amp.x1, amp.t, amp.eta.real, kx=3, ky=3)
    im = RectBivariateSpline(amp.x1, amp.t, amp.eta.imag, kx=3, ky=3)
    return re.ev(x1, t) + 1j * im.ev(x1, t)


def cross_term(
    v: GaussianBeam,
    w: GaussianBeam,
    psi: Optional[Callable],
    x1: float,
    center,
    radius: float,
    n: int = 301,
) -> complex:
    """``int v conj(w) psi`` over a disk of the transversal chart, with each beam
    evaluated in its own frame (used for crossing segments)."""
    ax = np.linspace(-radius, radius, n)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    pts = np.stack([X, Y], axis=-1).reshape(-1, 2) + np.asarray(center)
    inside = np.sum((pts - center) ** 2, axis=-1) <= radius**2
    pts = pts[inside]
    dA = (ax[1] - ax[0]) ** 2
    vals = []
    for beam in (v, w):
        ty = beam.frame.inverse_map(pts)
        vals.append(beam.evaluate(np.full(len(pts), x1), ty[:, 0], ty[:, 1]))
    sqrtg = np.sqrt(np.linalg.det(v.frame.chart.metric(pts)))
    psi_v = np.ones(len(pts)) if psi is None else psi(pts)
    return complex(np.sum(vals[0] * np.conj(vals[1]) * psi_v * sqrtg) * dA)

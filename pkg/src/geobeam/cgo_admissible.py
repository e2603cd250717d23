"""WKB complex geometric optics on admissible cylinders.

Coordinates on ``R x D`` are ``(x1, r, theta)`` with ``(r, theta)`` polar
normal coordinates about a pole ``omega`` of ``D`` lying outside ``M0``.
The complex phase is ``rho = x1 + i r`` and the amplitude

    a = |g|^{-1/4} c^{1/2} e^{i Phi_tau} a0(rho) b(theta),
    dbar Phi_tau = -((A_tau)_1 + i (A_tau)_r) / 2,   dbar = (d_x1 + i d_r) / 2

solves the transport equation with the mollified potential.  Each
``theta`` slice is an independent Cauchy problem in the ``(x1, r)`` plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dbar import PlaneField, cauchy_kernel, cauchy_solve
from .errors import ContractError, GeometryError, ParameterError
from .fields import (
    Grid,
    GridMetric,
    ResidualDecomposition,
    SampledField,
    SampledOneForm,
    SemiclassicalParams,
    divergence_form,
    gradient,
    norm_scl,
    pair,
)
from .gaussianbeam import Potential, Scalar, fit_exponent, smooth_step
from .geometry import MetricChart, PolarNormalChart, SimplicityReport, euclidean_disk, polar_normal_coords

RATES = {
    "laplacian": "h^2 tau^-2",
    "magnetic_gradient": "h^2 tau^-1",
    "magnetic_smooth": "h^2 tau^-1",
    "rough_phase": "h ||A - A_tau||",
    "rough_commutator": "h ||A - A_tau||",
    "zeroth_order": "h^2",
    "transport": "discretisation",
}


def seed_one(rho):
    return np.ones_like(rho)


def seed_exp(lam: float):
    """``a0 = e^{i lam rho}``."""

    def a0(rho):
        return np.exp(1j * lam * rho)

    return a0


def holomorphy_defect(a0: Callable, rho, delta: float = 1e-4) -> float:
    """``max |dbar a0|`` by centred complex differences."""
    rho = np.asarray(rho, dtype=complex)
    dx = (a0(rho + delta) - a0(rho - delta)) / (2 * delta)
    dy = (a0(rho + 1j * delta) - a0(rho - 1j * delta)) / (2 * delta)
    return float(np.max(np.abs(0.5 * (dx + 1j * dy))))


@dataclass
class WkbSolution:
    polar: PolarNormalChart
    chart: MetricChart
    geom: GridMetric
    xprime: np.ndarray  # chart points of the (r, theta) nodes, (nr, nth, 2)
    jac: np.ndarray  # d x' / d(r, theta), (nr, nth, 2, 2)
    params: SemiclassicalParams
    tau: Optional[float]
    pot: Potential
    Phi: np.ndarray
    a: np.ndarray
    a0: Callable
    b: Callable
    mask: np.ndarray  # nodes inside M
    c: np.ndarray
    transport_residual: float = np.nan
    info: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.geom.grid

    def points(self) -> np.ndarray:
        """Chart points ``(x1, x')`` of all nodes."""
        x1 = self.grid.axes[0]
        shape = self.grid.shape
        out = np.empty(shape + (3,))
        out[..., 0] = x1[:, None, None]
        out[..., 1:] = self.xprime[None]
        return out

    def polar_components(self, comps: np.ndarray) -> np.ndarray:
        """Chart components ``(3, ...)`` to ``(x1, r, theta)`` components."""
        J = self.jac[None]
        return np.stack([
            comps[0],
            comps[1] * J[..., 0, 0] + comps[2] * J[..., 1, 0],
            comps[1] * J[..., 0, 1] + comps[2] * J[..., 1, 1],
        ])

    def eikonal_errors(self) -> dict:
        """``c |d psi|^2 - 1``, ``|d psi|^2 - |d phi|^2`` and ``<d phi, d psi>`` (phi = x1, psi = r)."""
        X1, R, _ = self.grid.mesh()
        dpsi = gradient(R, self.grid)
        dphi = gradient(X1, self.grid)
        ginv = self.geom.ginv
        psi2 = pair(dpsi, dpsi, ginv)
        phi2 = pair(dphi, dphi, ginv)
        m = self.mask
        return {
            "eikonal": float(np.max(np.abs(self.c * psi2 - 1.0)[m])),
            "equal_lengths": float(np.max(np.abs(psi2 - phi2)[m])),
            "orthogonality": float(np.max(np.abs(pair(dphi, dpsi, ginv))[m])),
        }

    def phase_estimates(self) -> dict:
        """``sup |Phi_tau|`` and ``sup |grad Phi_tau|`` over ``M``."""
        dPhi = gradient(self.Phi, self.grid)
        gn = np.sqrt(np.abs(pair(dPhi, np.conj(dPhi), self.geom.ginv)))
        return {"sup_phi": float(np.max(np.abs(self.Phi)[self.mask])), "sup_grad_phi": float(np.max(gn[self.mask]))}


def _polar_box(chart: MetricChart, polar: PolarNormalChart, n: int = 256, pad: float = 0.1):
    pts = chart.boundary_points(n)
    rt = polar.to_polar(pts)
    r_lo, r_hi = rt[:, 0].min(), rt[:, 0].max()
    th = rt[:, 1]
    return (r_lo - pad, r_hi + pad), (th.min() - pad / max(r_lo, 1e-3), th.max() + pad / max(r_lo, 1e-3))


def _plane_cutoff(x1, r, inner_x1, inner_r, width_x1, width_r):
    def ramp(v, lo, hi, w):
        return smooth_step((v - (lo - w)) / w) * smooth_step(((hi + w) - v) / w)

    return ramp(x1, *inner_x1, width_x1)[:, None] * ramp(r, *inner_r, width_r)[None, :]


def build_wkb(
    chart: MetricChart,
    omega,
    A: Optional[SampledOneForm],
    q: Optional[SampledField],
    params: SemiclassicalParams,
    a0: Optional[Callable] = None,
    b: Optional[Callable] = None,
    sigma: float = 0.4,
    outer: Optional[MetricChart] = None,
    simplicity: Optional[SimplicityReport] = None,
    x1_range: tuple = (-1.0, 1.0),
    A_exact: Optional[Callable] = None,
    conformal: Optional[Callable] = None,
    spacing: float = 0.025,
    n_theta: int = 81,
    margin: float = 0.4,
) -> WkbSolution:
    """Amplitude of the WKB solution ``e^{-s rho} a`` on ``x1_range x chart``.

    ``outer`` is the larger simple chart carrying the polar coordinates
    (a disk three times wider for flat disks when omitted).  ``conformal``
    maps chart points ``(..., 3)`` to ``c``; None means ``c = 1``.
    """
    if not 0.0 < sigma < 0.5:
        raise ParameterError("sigma must lie in (0, 1/2)")
    omega = np.asarray(omega, dtype=float)
    if bool(chart.contains(omega)):
        raise GeometryError("the pole must lie outside M0")
    if outer is None:
        if not chart.flat:
            raise ParameterError("pass the enclosing simple chart for curved M0")
        outer = euclidean_disk(3.0 * chart.diameter / 2.0 + np.linalg.norm(omega))
        simplicity = SimplicityReport(True, True, True, 1.0, 1.0, 0)
    polar = polar_normal_coords(outer, omega, simplicity)
    a0 = seed_one if a0 is None else a0
    b = (lambda th: np.ones_like(th)) if b is None else b
    tau = params.h**sigma if A is not None else None

    (r_lo, r_hi), (t_lo, t_hi) = _polar_box(chart, polar)
    r_lo_g = max(r_lo - margin, 0.2 * r_lo)
    r_hi_g = r_hi + margin
    x_lo, x_hi = x1_range[0] - margin, x1_range[1] + margin
    x1 = np.linspace(x_lo, x_hi, int(np.ceil((x_hi - x_lo) / spacing)) + 1)
    r = np.linspace(r_lo_g, r_hi_g, int(np.ceil((r_hi_g - r_lo_g) / spacing)) + 1)
    th = np.linspace(t_lo, t_hi, n_theta)
    grid = Grid((x1, r, th))

    Rm, Tm = np.meshgrid(r, th, indexing="ij")
    xprime = polar.from_polar(Rm, Tm)
    G2 = polar.metric(Rm, Tm)
    d = 1e-5 * chart.diameter
    jr = (polar.from_polar(Rm + d, Tm) - polar.from_polar(Rm - d, Tm)) / (2 * d)
    jt = (polar.from_polar(Rm, Tm + d) - polar.from_polar(Rm, Tm - d)) / (2 * d)
    jac = np.stack([jr, jt], axis=-1)

    pts = np.empty(grid.shape + (3,))
    pts[..., 0] = x1[:, None, None]
    pts[..., 1:] = xprime[None]
    c = np.ones(grid.shape) if conformal is None else np.asarray(conformal(pts), dtype=float)
    g = np.zeros(grid.shape + (3, 3))
    g[..., 0, 0] = 1.0
    g[..., 1:, 1:] = G2[None]
    g = g * c[..., None, None]
    geom = GridMetric(grid, metric=g)
    mask = ((x1 >= x1_range[0]) & (x1 <= x1_range[1]))[:, None, None] & chart.contains(xprime)[None]

    pot = Potential(A, tau, A_exact)
    sol = WkbSolution(polar, chart, geom, xprime, jac, params, tau, pot, np.zeros(grid.shape, complex), None, a0, b, mask, c)
    # the transport data only matter on M; cut them off before the plane edge
    # keep the ramp a quarter pad away from M so difference stencils on M see cut = 1
    pr = min(r_lo - r_lo_g, margin)
    cut = _plane_cutoff(
        x1, r,
        (x1_range[0] - 0.25 * margin, x1_range[1] + 0.25 * margin), (r_lo - 0.25 * pr, r_hi + 0.25 * pr),
        0.5 * margin, 0.5 * pr,
    )
    sol.info = {"theta_range": (t_lo, t_hi), "r_range": (r_lo, r_hi), "cutoff": cut}
    if not pot.zero:
        sol.Phi = _solve_slices(sol, pot.values(pts, smooth=True))
    rho = x1[:, None, None] + 1j * r[None, :, None]
    detg = np.linalg.det(g)
    sol.a = detg ** (-0.25) * np.sqrt(c) * np.exp(1j * sol.Phi) * a0(rho) * b(th)[None, None, :]
    T = transport_defect(sol)
    sol.transport_residual = float(np.max(np.abs(T)[mask]) / np.max(np.abs(sol.a)[mask]))
    sol.info["holomorphy"] = holomorphy_defect(a0, rho[:, :, 0])
    return sol


def _solve_slices(sol: WkbSolution, comps: np.ndarray) -> np.ndarray:
    """``Phi`` with ``dbar Phi = -(A_1 + i A_r) / 2`` on every theta slice."""
    x1, r, th = sol.grid.axes
    Ap = sol.polar_components(comps)
    rhs = -0.5 * (Ap[0] + 1j * Ap[1]) * sol.info["cutoff"][:, :, None]
    plane = Grid((x1, r))
    K = cauchy_kernel(plane)
    Phi = np.empty(sol.grid.shape, dtype=complex)
    for k in range(len(th)):
        Phi[:, :, k] = cauchy_solve(PlaneField(plane, rhs[:, :, k]), "dbar", kernel=K).values
    return Phi


def transport_defect(sol: WkbSolution) -> np.ndarray:
    """``2 <d rho, da> + (Delta rho) a + 2i <A_tau, d rho> a`` on the grid."""
    grid = sol.grid
    geom = sol.geom
    X1, R, _ = grid.mesh()
    drho = np.zeros((3,) + grid.shape, dtype=complex)
    drho[0] = 1.0
    drho[1] = 1j
    lap_rho = -divergence_form(drho, geom)
    da = gradient(sol.a, grid)
    out = 2 * pair(drho, da, geom.ginv) + lap_rho * sol.a
    if not sol.pot.zero:
        At = sol.polar_components(sol.pot.values(sol.points(), smooth=True))
        out = out + 2j * pair(At, drho, geom.ginv) * sol.a
    return out


@dataclass
class WkbReport:
    bound: float
    h: float
    tau: Optional[float]
    groups: dict
    rates: dict

    def as_dict(self) -> dict:
        return {"h": self.h, "tau": self.tau, "bound": self.bound, "bound_over_h": self.bound / self.h, "groups": dict(self.groups), "rates": dict(self.rates)}


def wkb_residual(
    sol: WkbSolution,
    A: Optional[SampledOneForm] = None,
    q: Optional[SampledField] = None,
    tau: Optional[float] = None,
    q_exact: Optional[Callable] = None,
) -> WkbReport:
    """Certified ``H^{-1}_scl`` bound of ``e^{s x1} h^2 L e^{-s x1} (e^{-i s r} a)`` on ``M``.

    The rough part ``i h^2 e^{-i s r} (A - A_tau) a`` is kept under ``d^*``;
    commuting ``e^{-i s r}`` through it leaves the ``rough_commutator`` group.
    """
    if tau is not None and sol.tau is not None and abs(tau - sol.tau) > 1e-14:
        raise ContractError("smoothing length differs from the one used to build the amplitude")
    if A is not None and A is not sol.pot.A:
        raise ContractError("residual must use the potential the amplitude was built with")
    p = sol.params
    h, s = p.h, p.s
    geom, grid = sol.geom, sol.grid
    ginv = geom.ginv
    a = sol.a
    da = gradient(a, grid)
    pts = sol.points()
    zero = np.zeros((3,) + grid.shape)
    Ar = sol.polar_components(sol.pot.values(pts)) if not sol.pot.zero else zero
    At = sol.polar_components(sol.pot.values(pts, smooth=True)) if not sol.pot.zero else zero
    B = Ar - At
    qv = Scalar(q, q_exact)(pts)
    drho = np.zeros((3,) + grid.shape, dtype=complex)
    drho[0] = 1.0
    drho[1] = 1j
    dr = np.zeros((3,) + grid.shape)
    dr[1] = 1.0
    f = np.exp(-1j * s * grid.mesh()[1])  # |f| = e^{lam r}
    h2f = h * h * f
    groups = {
        "laplacian": h2f * divergence_form(da, geom),
        "magnetic_gradient": h2f * (-1j) * pair(Ar, da, ginv),
        "magnetic_smooth": h2f * 1j * divergence_form(At * a, geom),
        "rough_phase": h2f * s * 2j * pair(B, drho, ginv) * a,
        "rough_commutator": h2f * s * pair(dr, B, ginv) * a,
        "zeroth_order": h2f * (pair(Ar, Ar, ginv) + qv) * a,
        "transport": h2f * s * transport_defect(sol),
    }
    w0 = sum(groups.values())
    w1 = 1j * h2f[None] * B * a
    W = geom.volume_weights * sol.mask
    norms = {k: float(np.sqrt(np.sum(np.abs(v) ** 2 * W))) for k, v in groups.items()}
    dec = ResidualDecomposition(w0, w1, W, ginv)
    bound = norm_scl(dec, p).h_minus1_scl_bound
    norms["divergence_over_h"] = float(np.sqrt(np.sum(np.real(np.einsum("j...,...jk,k...->...", w1, ginv, np.conj(w1))) * W)) / h)
    return WkbReport(float(bound), h, sol.tau, norms, dict(RATES))


def phase_gap(sol: WkbSolution) -> float:
    """``||Phi - Phi_tau||_{L^2(M)}`` with ``Phi`` from the unmollified potential."""
    if sol.pot.zero:
        return 0.0
    Phi0 = _solve_slices(sol, sol.pot.values(sol.points(), smooth=False))
    W = sol.geom.volume_weights * sol.mask
    return float(np.sqrt(np.sum(np.abs(Phi0 - sol.Phi) ** 2 * W)))


def group_exponents(reports: list) -> dict:
    """Fitted ``h``-exponents of each residual group over a sweep."""
    hs = np.array([r.h for r in reports])
    out = {}
    for k in reports[0].groups:
        v = np.array([r.groups[k] for r in reports])
        out[k] = fit_exponent(hs, v) if np.all(v > 0) else np.nan
    return out

"""Critical field curves, lobe classification, and second-order transition checks.

The solvability criterion theta -> g(beta, theta, 0) is strictly increasing on
(0, 2*pi/beta), diverges at the singular line 2*pi/beta, and is strictly
decreasing on (2*pi/beta, 4*pi/beta), so each half-interval carries exactly
one root when the coupling is below the smallness bound 2/(b * mean(1/e)).
Those roots, extended periodically, bound the superconducting lobes; free
energy derivatives across them show the second-order transition.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterator

import numpy as np
from scipy import optimize

from .gap_solver import PhysParams, default_grid, g_value, solve_gap
from .lattice_models import HoppingModel
from .quadrature import BZGrid, eigenvalues_on_grid, integrate_bz
from .thermodynamics import free_energy_density

_SMALLNESS_QUAD_N = {1: 512, 2: 256, 3: 96, 4: 32, 5: 12}

_smallness_cache: dict = {}
_boundary_grid_cache: dict = {}


def smallness_bound(model: HoppingModel) -> float:
    """Coupling bound 2/(b * mean(1/e)) below which the critical curves exist."""
    key = id(model)
    hit = _smallness_cache.get(key)
    if hit is not None and hit[0] is model:
        return hit[1]
    n = _SMALLNESS_QUAD_N[model.basis.dim]
    inv_e = integrate_bz(
        lambda k: 1.0 / model.envelope(k),
        BZGrid(model.basis, n),
        singular_envelope=model.envelope,
    ).value
    bound = 2.0 / (model.bands * inv_e)
    _smallness_cache[key] = (model, bound)
    return bound


def boundary_grid(model: HoppingModel) -> BZGrid:
    """Default-size grid adjusted so the dispersion zero set hits grid nodes.

    The criterion's divergence at the singular field line is representable
    on a fixed grid only when nodes with E = 0 exist (the honeycomb touching
    points need 3 | n); probe a few sizes upward from the default.
    """
    key = id(model)
    hit = _boundary_grid_cache.get(key)
    if hit is not None and hit[0] is model:
        return hit[1]
    n0 = default_grid(model).n_per_axis
    chosen = None
    for n in range(n0, n0 + 7):
        grid = BZGrid(model.basis, n, 0.0)
        eigs = eigenvalues_on_grid(model, grid)
        if (np.abs(eigs).min(axis=1) < 1e-12).any():
            chosen = grid
            break
    if chosen is None:
        chosen = default_grid(model)
    _boundary_grid_cache[key] = (model, chosen)
    return chosen


def critical_theta(
    model: HoppingModel,
    beta: float,
    U: float,
    j: int = 1,
    grid: BZGrid | None = None,
    tol: float = 1e-12,
) -> float:
    """Unique root of g(beta, ., 0) in (0, 2*pi/beta) (j=1) or its mirror (j=2)."""
    if j not in (1, 2):
        raise ValueError("j must be 1 or 2")
    bound = smallness_bound(model)
    if not (U < 0.0 and abs(U) < bound):
        raise ValueError(
            f"critical curves require 0 < |U| < {bound:.6g} (smallness bound); got U={U}"
        )
    if grid is None:
        grid = boundary_grid(model)
    period = 2.0 * math.pi / beta
    eps = 1e-6 * period
    lo, hi = (eps, period - eps) if j == 1 else (period + eps, 2.0 * period - eps)

    def crit(theta: float) -> float:
        return g_value(model, PhysParams(beta, theta, U), 0.0, grid)

    g_lo, g_hi = crit(lo), crit(hi)
    inner, outer = (g_hi, g_lo) if j == 1 else (g_lo, g_hi)
    if not (outer < 0.0 < inner):
        raise RuntimeError(
            "criterion does not bracket a root; grid cannot represent the "
            "singular-line divergence at this coupling"
        )
    root = float(optimize.brentq(crit, lo, hi, xtol=max(tol, 1e-15), rtol=8.9e-16))
    # brentq stops a few ulp short; near-singular lobes have |dg/dtheta| large
    # enough that those ulps cost ~1e-9 in residual, so polish to one ulp.
    b_lo, b_hi = root - 8e-15, root + 8e-15
    if crit(b_lo) * crit(b_hi) < 0.0:
        asc = j == 1
        while True:
            mid = 0.5 * (b_lo + b_hi)
            if mid == b_lo or mid == b_hi:
                break
            if (crit(mid) < 0.0) == asc:
                b_lo = mid
            else:
                b_hi = mid
        root = min((b_lo, b_hi), key=lambda t: abs(crit(t)))
    return root


class CriticalCurves:
    """Cached maps beta -> theta_c1/theta_c2 with the periodic lobe extensions."""

    def __init__(self, model: HoppingModel, U: float, grid: BZGrid | None = None, tol: float = 1e-12):
        self.model = model
        self.U = U
        self.grid = grid if grid is not None else boundary_grid(model)
        self.tol = tol
        self._roots: dict[tuple[float, int], float] = {}

    def theta_c(self, beta: float, j: int) -> float:
        key = (beta, j)
        if key not in self._roots:
            self._roots[key] = critical_theta(self.model, beta, self.U, j, self.grid, self.tol)
        return self._roots[key]

    def theta_c1(self, beta: float) -> float:
        return self.theta_c(beta, 1)

    def theta_c2(self, beta: float) -> float:
        return self.theta_c(beta, 2)

    def theta_cjm(self, beta: float, j: int, m: int) -> float:
        if m < 0:
            raise ValueError("lobe index m must be >= 0")
        return self.theta_c(beta, j) + 4.0 * math.pi * m / beta

    def beta_cjm(self, theta: float, j: int, m: int) -> float:
        """Inverse of the strictly decreasing beta -> theta_cjm(beta, j, m)."""
        if theta <= 0.0:
            raise ValueError("beta_cjm needs theta > 0")
        if m < 0:
            raise ValueError("lobe index m must be >= 0")
        # bracket from the hyperbola bounds; theta_c1m >= pi/beta covers m=0
        if j == 1:
            lo = max(4.0 * math.pi * m, math.pi / 2.0) / theta
            hi = (2.0 * math.pi + 4.0 * math.pi * m) / theta
        else:
            lo = (2.0 * math.pi + 4.0 * math.pi * m) / theta
            hi = 4.0 * math.pi * (m + 1) / theta

        def h(beta: float) -> float:
            return self.theta_cjm(beta, j, m) - theta

        return float(optimize.brentq(h, lo, hi, xtol=1e-12, rtol=8.9e-16))


@dataclasses.dataclass(frozen=True)
class PhaseVerdict:
    in_sc_phase: bool
    m_index: int | None
    distance_to_boundary: float


def classify(model: HoppingModel, params: PhysParams, curves: CriticalCurves | None = None) -> PhaseVerdict:
    """Lobe-decomposition verdict for (beta, theta), cross-checked with sign of g."""
    if curves is None:
        curves = CriticalCurves(model, params.U)
    elif curves.model is not model or curves.U != params.U:
        raise ValueError("curves were built for a different model or coupling")
    beta = params.beta
    period4 = 4.0 * math.pi / beta
    t_abs = abs(params.theta)
    m = int(t_abs // period4)
    t_fold = t_abs - m * period4
    tc1 = curves.theta_c(beta, 1)
    tc2 = curves.theta_c(beta, 2)
    inside = tc1 < t_fold < tc2
    distance = min(
        abs(t_fold - tc1),
        abs(t_fold - tc2),
        abs(t_fold - (tc1 + period4)),
        abs(t_fold - (tc2 - period4)),
    )
    g0 = g_value(model, params, 0.0, curves.grid)
    if (g0 > 0.0) != inside and distance > 1e-7 * period4:
        raise RuntimeError("lobe verdict disagrees with the criterion sign away from the boundary")
    return PhaseVerdict(inside, m if inside else None, distance)


@dataclasses.dataclass(frozen=True)
class BoundaryDerivatives:
    first_left: float
    first_right: float
    second_left: float
    second_right: float


def boundary_derivatives(
    model: HoppingModel,
    U: float,
    crossing: str,
    point: tuple[float, float],
    h_step: float | None = None,
    grid: BZGrid | None = None,
) -> BoundaryDerivatives:
    """One-sided first/second derivatives of the free energy at a boundary point.

    crossing: "beta" (fix theta, vary beta) or "theta" (fix beta, vary theta).
    The five stencil nodes per side start 3*h away from the point; a degree-4
    fit in the scaled offset evaluates the derivatives at the boundary. The
    gap is re-solved to 1e-12 at every node (second derivatives inherit first
    order sensitivity to gap error through the composite dependence).

    The default h is 1e-3 times the distance to the singular field line along
    the crossing axis: that distance is the lobe half-width on the singular
    side, and a stencil scaled to the full axis would walk out of narrow lobes.
    """
    if crossing not in ("beta", "theta"):
        raise ValueError("crossing must be 'beta' or 'theta'")
    beta0, theta0 = point
    if grid is None:
        grid = boundary_grid(model)
    g0 = g_value(model, PhysParams(beta0, theta0, U), 0.0, grid)
    if not (math.isfinite(g0) and abs(g0) < 1e-8):
        raise ValueError("point is not on a critical curve (|g| >= 1e-8)")
    if crossing == "beta":
        axis_scale = beta0
        # nearest beta with beta*|theta| = 2*pi*(2m+1)
        if theta0 != 0.0:
            ratio = beta0 * abs(theta0) / (2.0 * math.pi)
            m_lo = max(0, int((ratio - 1.0) // 2))
            d_sing = min(
                abs(beta0 - 2.0 * math.pi * (2 * m + 1) / abs(theta0))
                for m in (m_lo, m_lo + 1)
            )
        else:
            d_sing = axis_scale
    else:
        axis_scale = 2.0 * math.pi / beta0
        t_fold = abs(theta0) % (2.0 * axis_scale)
        d_sing = abs(t_fold - axis_scale)
    h = h_step if h_step is not None else 1e-3 * min(axis_scale, d_sing)
    offsets = np.arange(3, 8) * h

    def f_and_phase(t: float) -> tuple[float, bool]:
        b, th = (t, theta0) if crossing == "beta" else (beta0, t)
        p = PhysParams(b, th, U)
        sol = solve_gap(model, p, grid, tol=1e-12)
        return free_energy_density(model, p, sol.delta, grid), sol.solvable

    out = {}
    for side, sign in (("left", -1.0), ("right", 1.0)):
        vals, phases = [], []
        for off in offsets:
            v, solvable = f_and_phase((beta0 if crossing == "beta" else theta0) + sign * off)
            vals.append(v)
            phases.append(solvable)
        if len(set(phases)) != 1:
            raise ValueError("stencil crosses a phase boundary; reduce h_step")
        u = sign * offsets / h
        coef = np.polynomial.polynomial.polyfit(u, vals, 4)
        out[side] = (float(coef[1]) / h, 2.0 * float(coef[2]) / h**2)
    return BoundaryDerivatives(
        first_left=out["left"][0],
        first_right=out["right"][0],
        second_left=out["left"][1],
        second_right=out["right"][1],
    )


def second_derivative_jump(
    model: HoppingModel,
    U: float,
    crossing: str,
    point: tuple[float, float],
    h_step: float | None = None,
    grid: BZGrid | None = None,
) -> tuple[float, float]:
    d = boundary_derivatives(model, U, crossing, point, h_step, grid)
    return d.second_left, d.second_right


@dataclasses.dataclass
class PhaseScan:
    betas: np.ndarray
    thetas: np.ndarray
    delta: np.ndarray  # (n_beta, n_theta)
    in_phase: np.ndarray  # bool
    m_index: np.ndarray  # int, -1 outside
    curves: list[tuple[float, float, int, int]]  # (beta, theta_c, j, m)

    def point_rows(self) -> Iterator[list[str]]:
        for i, beta in enumerate(self.betas):
            for k, theta in enumerate(self.thetas):
                m = int(self.m_index[i, k])
                yield [
                    "%.17g" % beta,
                    "%.17g" % theta,
                    "%.17g" % self.delta[i, k],
                    "1" if self.in_phase[i, k] else "0",
                    "" if m < 0 else str(m),
                ]

    def curve_rows(self) -> Iterator[list[str]]:
        for beta, theta_c, j, m in self.curves:
            yield ["%.17g" % beta, "%.17g" % theta_c, str(j), str(m)]


POINT_HEADER = ["beta", "theta", "delta", "in_phase", "m_index"]
CURVE_HEADER = ["beta", "theta_c", "j", "m"]


def phase_diagram_scan(
    model: HoppingModel,
    U: float,
    beta_range: tuple[float, float],
    theta_range: tuple[float, float],
    resolution: int | tuple[int, int],
    m_max: int = 3,
    grid: BZGrid | None = None,
) -> PhaseScan:
    """Tabulate the gap and lobe verdicts plus boundary polylines for m <= m_max."""
    n_beta, n_theta = (resolution, resolution) if isinstance(resolution, int) else resolution
    betas = np.linspace(beta_range[0], beta_range[1], n_beta)
    thetas = np.linspace(theta_range[0], theta_range[1], n_theta)
    curves = CriticalCurves(model, U, grid)
    delta = np.zeros((n_beta, n_theta))
    in_phase = np.zeros((n_beta, n_theta), dtype=bool)
    m_index = np.full((n_beta, n_theta), -1, dtype=int)
    polylines = []
    for i, beta in enumerate(betas):
        b = float(beta)
        tc1, tc2 = curves.theta_c(b, 1), curves.theta_c(b, 2)
        for m in range(m_max + 1):
            polylines.append((b, tc1 + 4.0 * math.pi * m / b, 1, m))
            polylines.append((b, tc2 + 4.0 * math.pi * m / b, 2, m))
        period4 = 4.0 * math.pi / b
        for k, theta in enumerate(thetas):
            p = PhysParams(b, float(theta), U)
            sol = solve_gap(model, p, curves.grid)
            delta[i, k] = sol.delta
            t_fold = abs(float(theta)) % period4
            if tc1 < t_fold < tc2:
                in_phase[i, k] = True
                m_index[i, k] = int(abs(float(theta)) // period4)
    return PhaseScan(betas, thetas, delta, in_phase, m_index, polylines)

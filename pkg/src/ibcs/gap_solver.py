"""Gap equation for the attractive pairing model in an imaginary magnetic field.

The self-consistency function is

    g(beta, theta, z) = -2/|U| + mean_k Tr[ sinh(beta*S) / ((cos(beta*theta/2)
                        + cosh(beta*S)) * S) ],   S = sqrt(E(k)^2 + z^2),

with the mean taken over the momentum cell (continuum) or the finite momentum
lattice. g is strictly decreasing in z and tends to -2/|U|, so the gap is the
unique nonnegative root whenever g(beta, theta, 0) >= 0, and the model is in
the symmetric phase otherwise. The field enters only through cos(beta*theta/2);
values with beta*theta/2 an odd multiple of pi are the singular field lines,
where g at z=0 is +infinity by convention.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .lattice_models import HoppingModel
from .quadrature import BZGrid, eigenvalues_on_grid

_DEFAULT_GRID_N = {1: 512, 2: 64, 3: 32, 4: 12, 5: 8}
_SINGULAR_RTOL = 1e-12


@dataclasses.dataclass(frozen=True)
class PhysParams:
    """Inverse temperature, imaginary field, coupling, and symmetry-breaking field."""

    beta: float
    theta: float
    U: float
    gamma: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.U < 0:
            raise ValueError("U must be negative (attractive coupling)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    @property
    def theta_reduced(self) -> float:
        """Representative |theta'| with theta' in (-2pi/beta, 2pi/beta]."""
        period = 4.0 * math.pi / self.beta
        r = math.remainder(self.theta, period)
        if r <= -period / 2.0:
            r += period
        return abs(r)

    @property
    def admissible(self) -> bool:
        """False exactly on the singular field lines beta*theta/2 in pi(2Z+1)."""
        half = math.pi / (self.beta / 2.0)  # 2pi/beta
        return not math.isclose(self.theta_reduced, half, rel_tol=_SINGULAR_RTOL)

    @property
    def cos_half_field(self) -> float:
        # the reduced representative keeps the cos argument in [0, pi]
        return math.cos(self.beta * self.theta_reduced / 2.0)

    @property
    def cos_quarter_field(self) -> float:
        """cos(beta*theta_reduced/4), in [0, 1].

        The kernel denominator cos_half + cosh(beta*s) loses all precision
        near the singular lines (cos_half -> -1); the half-angle form
        2*(cos_quarter^2 + sinh^2(beta*s/2)) is exact in the same regime.
        """
        return math.cos(self.beta * self.theta_reduced / 4.0)


@dataclasses.dataclass(frozen=True)
class GapSolution:
    delta: float
    residual: float
    solvable: bool
    criterion_value: float


def default_grid(model: HoppingModel) -> BZGrid:
    return BZGrid(model.basis, _DEFAULT_GRID_N[model.basis.dim])


def pair_kernel(beta: float, cos_quarter: float, s):
    """sinh(beta*s) / ((cos_half + cosh(beta*s)) * s) elementwise for s >= 0,
    parametrized by cos_quarter with cos_half = 2*cos_quarter^2 - 1.

    The denominator is evaluated as 2*(cos_quarter^2 + sinh^2(beta*s/2)),
    which is exact even where cos_half + cosh would cancel catastrophically
    (narrow lobes hug the singular lines, and root residuals there are
    dominated by this cancellation in the naive form). The singularity at
    s=0 is removable when cos_quarter > 0; the three branches keep precision
    for tiny arguments and avoid overflow for large ones.
    """
    s = np.asarray(s, dtype=float)
    t = beta * s
    cq2 = cos_quarter * cos_quarter
    out = np.empty_like(s)
    small = t < 1e-4
    large = t > 20.0
    mid = ~small & ~large
    if small.any():
        u = 0.5 * t[small]
        u2 = u * u
        sinhc = 1.0 + u2 / 6.0 + u2 * u2 / 120.0
        # when cos_quarter is exactly 0, a node with s=0 legitimately
        # produces +inf (the singular-line limit)
        with np.errstate(divide="ignore"):
            out[small] = 0.5 * beta * sinhc * np.cosh(u) / (cq2 + np.sinh(u) ** 2)
    if mid.any():
        u = 0.5 * t[mid]
        sh = np.sinh(u)
        out[mid] = sh * np.cosh(u) / ((cq2 + sh * sh) * s[mid])
    if large.any():
        em = np.exp(-t[large])
        out[large] = (1.0 - em * em) / (((1.0 - em) ** 2 + 4.0 * cq2 * em) * s[large])
    return out


def g_value(
    model: HoppingModel,
    params: PhysParams,
    z: float,
    grid: BZGrid | None = None,
) -> float:
    """Self-consistency function at gap amplitude z >= 0.

    Returns +inf on the singular field lines at z=0 (the equation is
    understood as always solvable there).
    """
    if z < 0:
        raise ValueError("z must be nonnegative")
    if not params.admissible and z == 0.0:
        return math.inf
    if grid is None:
        grid = default_grid(model)
    eigs = eigenvalues_on_grid(model, grid)
    s = np.sqrt(eigs * eigs + z * z)
    kernel = pair_kernel(params.beta, params.cos_quarter_field, s)
    return -2.0 / abs(params.U) + float(kernel.sum(axis=1).mean())


def _find_root(gfun, U: float, criterion: float, tol: float) -> GapSolution:
    if criterion < 0.0:
        return GapSolution(0.0, 0.0, False, criterion)
    if criterion == 0.0:
        return GapSolution(0.0, 0.0, True, 0.0)
    target = -1.0 / abs(U)
    hi = 1.0
    for _ in range(200):
        if gfun(hi) < target:
            break
        hi *= 2.0
    else:
        raise RuntimeError("failed to bracket the gap: g stays above -1/|U|")
    lo = 0.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        v = gfun(mid)
        if v > 0.0:
            lo = mid
        elif v < 0.0:
            hi = mid
        else:
            lo = hi = mid
    delta = 0.5 * (lo + hi)
    # Newton polish with a finite-difference slope restores float-level residual
    for _ in range(4):
        val = gfun(delta)
        if abs(val) <= min(tol, 1e-12 * max(1.0, 2.0 / abs(U))):
            break
        h = max(1e-6 * delta, 1e-9)
        slope = (gfun(delta + h) - gfun(max(delta - h, 0.0))) / (h + min(h, delta))
        if slope == 0.0:
            break
        delta = max(delta - val / slope, 0.0)
    return GapSolution(delta, gfun(delta), True, criterion)


def solve_gap(
    model: HoppingModel,
    params: PhysParams,
    grid: BZGrid | None = None,
    tol: float = 1e-10,
) -> GapSolution:
    """Unique nonnegative gap, or delta=0 with solvable=False.

    Works on the singular field lines too: there the criterion is +inf and
    the root is strictly positive.
    """
    if grid is None:
        grid = default_grid(model)
    crit = g_value(model, params, 0.0, grid)
    return _find_root(lambda z: g_value(model, params, z, grid), params.U, crit, tol)


def solve_gap_finite(
    model: HoppingModel,
    params: PhysParams,
    L: int,
    tol: float = 1e-10,
) -> GapSolution:
    """Gap of the L-periodic system: the momentum mean runs over the finite lattice."""
    return solve_gap(model, params, BZGrid(model.basis, L, 0.0), tol)


def solve_perturbed(
    model: HoppingModel,
    params: PhysParams,
    grid: BZGrid | None = None,
    tol: float = 1e-10,
) -> float:
    """Positive root a of  a * g(beta, theta, a) = -2*gamma/|U|  (gamma > 0).

    The root exists for every admissible parameter point and tends to the
    unperturbed gap as gamma decreases to zero.
    """
    if not params.gamma > 0:
        raise ValueError("solve_perturbed requires gamma > 0")
    if grid is None:
        grid = default_grid(model)
    rhs = -2.0 * params.gamma / abs(params.U)

    def h(a: float) -> float:
        return a * g_value(model, params, a, grid) - rhs

    hi = 1.0
    for _ in range(200):
        if h(hi) < 0.0:
            break
        hi *= 2.0
    else:
        raise RuntimeError("failed to bracket the perturbed gap")
    lo = 0.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if h(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    a = 0.5 * (lo + hi)
    for _ in range(4):
        val = h(a)
        if abs(val) <= min(tol, 1e-12 * max(1.0, abs(rhs))):
            break
        step = max(1e-6 * a, 1e-9)
        slope = (h(a + step) - h(max(a - step, 0.0))) / (step + min(step, a))
        if slope == 0.0:
            break
        a = max(a - val / slope, 0.0)
    return a

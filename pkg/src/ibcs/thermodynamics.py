"""Thermodynamic observables, effective potentials, and finite-volume integrals.

Infinite-volume quantities come from closed formulas evaluated by momentum
quadrature: the free energy density, the pairing (symmetry-breaking)
expectation per band, the off-diagonal long-range order matrix, and the
Cooper pair density. Finite-volume expectations are one- or two-dimensional
Laplace-type integrals over the auxiliary pairing field, with the fermions
integrated out exactly in the mean-field (quadratic) approximation.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .gap_solver import PhysParams, default_grid, g_value, pair_kernel, solve_gap
from .lattice_models import HoppingModel
from .quadrature import BZGrid, eigensystem_on_grid, eigenvalues_on_grid

Array = np.ndarray

QUANTITIES = ("ssb", "odlro", "cpd", "logZ")


# --- infinite-volume closed forms --------------------------------------------


def _log1p_terms(beta: float, cos_quarter: float, s: Array) -> Array:
    """log(cos + cosh(beta*s)) - beta*s + log 2  =  log((1-em)^2 + 4 cq^2 em)
    with em = e^{-beta*s}; both addends are nonnegative, so no cancellation.

    Raises if the log argument is not positive (possible only on the singular
    field lines with a vanishing spectral gap).
    """
    em = np.exp(-beta * s)
    w = (1.0 - em) ** 2 + 4.0 * cos_quarter * cos_quarter * em
    if np.min(w) <= 0.0:
        raise ValueError(
            "free-energy log argument is not positive; the parameters sit on "
            "a singular field line with a gapless mode"
        )
    return np.log(w)


def free_energy_density(
    model: HoppingModel,
    params: PhysParams,
    delta: float | None = None,
    grid: BZGrid | None = None,
) -> float:
    """Infinite-volume free energy density at gap amplitude delta.

    delta defaults to the solved gap. The per-eigenvalue assembly
    e - S - log(...)/beta keeps every term bounded for large beta, and at
    delta=0, theta=0 it reduces to the familiar free-fermion expression.
    """
    if grid is None:
        grid = default_grid(model)
    if delta is None:
        delta = solve_gap(model, params, grid).delta
    if delta == 0.0 and not params.admissible:
        # the grid sum is dominated by gapless nodes there and does not
        # approximate the (improper but finite) momentum integral
        raise ValueError(
            "free energy with zero gap is undefined on the singular field lines"
        )
    eigs = eigenvalues_on_grid(model, grid)
    s = np.sqrt(eigs * eigs + delta * delta)
    logs = _log1p_terms(params.beta, params.cos_quarter_field, s)
    per_eig = eigs - s - logs / params.beta
    return delta * delta / abs(params.U) + float(per_eig.sum(axis=1).mean())


def band_pair_factors(
    model: HoppingModel,
    params: PhysParams,
    delta: float,
    grid: BZGrid | None = None,
) -> Array:
    """Per-band factor s(rho) = (1/2) * mean_k [kernel matrix](rho, rho).

    The kernel matrix is the even matrix function sinh(beta*S)/((cos +
    cosh(beta*S))*S) of the hopping matrix, S = sqrt(E^2 + delta^2).
    """
    if grid is None:
        grid = default_grid(model)
    eigs, vecs = eigensystem_on_grid(model, grid)
    s = np.sqrt(eigs * eigs + delta * delta)
    kern = pair_kernel(params.beta, params.cos_quarter_field, s)
    weights = (vecs * np.conj(vecs)).real  # |U_{rho j}|^2, shape (N, b, b)
    return 0.5 * np.einsum("krj,kj->r", weights, kern) / eigs.shape[0]


def ssb_expectation(
    model: HoppingModel,
    params: PhysParams,
    grid: BZGrid | None = None,
) -> Array:
    """Per-band pairing expectation -delta * s(rho); zero in the symmetric phase."""
    if grid is None:
        grid = default_grid(model)
    sol = solve_gap(model, params, grid)
    if sol.delta == 0.0:
        return np.zeros(model.bands)
    return -sol.delta * band_pair_factors(model, params, sol.delta, grid)


def odlro_limit(
    model: HoppingModel,
    params: PhysParams,
    grid: BZGrid | None = None,
) -> dict[tuple[int, int], float]:
    """Long-range order map (rho, eta) -> delta^2 * s(rho) * s(eta).

    Bands are 0-indexed. The zero map is returned whenever the gap vanishes
    (including the criterion boundary, where only a vanishing limit is
    claimed).
    """
    if grid is None:
        grid = default_grid(model)
    sol = solve_gap(model, params, grid)
    b = model.bands
    if sol.delta == 0.0:
        return {(r, e): 0.0 for r in range(b) for e in range(b)}
    s = band_pair_factors(model, params, sol.delta, grid)
    d2 = sol.delta**2
    return {(r, e): d2 * float(s[r] * s[e]) for r in range(b) for e in range(b)}


@dataclasses.dataclass(frozen=True)
class Observables:
    free_energy: float
    ssb_per_band: Array
    odlro: dict[tuple[int, int], float]
    cooper_pair_density: float
    delta: float


def compute_observables(
    model: HoppingModel,
    params: PhysParams,
    grid: BZGrid | None = None,
) -> Observables:
    if grid is None:
        grid = default_grid(model)
    sol = solve_gap(model, params, grid)
    delta = sol.delta
    free = free_energy_density(model, params, delta, grid)
    if delta == 0.0:
        ssb = np.zeros(model.bands)
        odl = {(r, e): 0.0 for r in range(model.bands) for e in range(model.bands)}
    else:
        s = band_pair_factors(model, params, delta, grid)
        ssb = -delta * s
        odl = {
            (r, e): delta**2 * float(s[r] * s[e])
            for r in range(model.bands)
            for e in range(model.bands)
        }
    return Observables(free, ssb, odl, delta**2 / params.U**2, delta)


def observables_csv_rows(
    model: HoppingModel,
    params_list: Sequence[PhysParams],
    grid: BZGrid | None = None,
):
    """Header and formatted rows (beta, theta, U, delta, free_energy, ssb_1..b, cpd)."""
    header = ["beta", "theta", "U", "delta", "free_energy"]
    header += [f"ssb_{i + 1}" for i in range(model.bands)]
    header += ["cpd"]
    rows = []
    for p in params_list:
        obs = compute_observables(model, p, grid)
        vals = [p.beta, p.theta, p.U, obs.delta, obs.free_energy]
        vals += [float(x) for x in obs.ssb_per_band]
        vals += [obs.cooper_pair_density]
        rows.append(["%.17g" % v for v in vals])
    return header, rows


# --- effective potentials -----------------------------------------------------


class EffectivePotential1D:
    """Effective potential of the radial pairing amplitude.

    value(x) = -x^2/|U| + (1/beta) * mean_k Tr[log(cos + cosh(beta*S(x)))
               - log(cos + cosh(beta*E))], normalized so value(0) = 0.
    Built on the finite momentum lattice when L is given, on the continuum
    quadrature grid otherwise. Its derivative is x * g(x), so the gap is the
    unique maximizer.
    """

    def __init__(
        self,
        model: HoppingModel,
        params: PhysParams,
        L: int | None = None,
        grid: BZGrid | None = None,
    ):
        if L is not None and grid is not None:
            raise ValueError("pass either L or grid, not both")
        if L is not None:
            grid = BZGrid(model.basis, L, 0.0)
        elif grid is None:
            grid = default_grid(model)
        self.model = model
        self.params = params
        self.grid = grid
        self._eigs = eigenvalues_on_grid(model, grid)
        self._abs_e = np.abs(self._eigs)
        self._base_logs = _log1p_terms(params.beta, params.cos_quarter_field, self._abs_e)

    def value(self, x: float) -> float:
        beta = self.params.beta
        s = np.sqrt(self._eigs * self._eigs + x * x)
        logs = _log1p_terms(beta, self.params.cos_quarter_field, s)
        per_eig = (s - self._abs_e) + (logs - self._base_logs) / beta
        return -x * x / abs(self.params.U) + float(per_eig.sum(axis=1).mean())

    def derivative(self, x: float, step: float | None = None) -> float:
        h = step if step is not None else 1e-6 * max(1.0, abs(x))
        lo = max(x - h, 0.0)
        return (self.value(x + h) - self.value(lo)) / (x + h - lo)

    def second_derivative(self, x: float, step: float | None = None) -> float:
        h = step if step is not None else 1e-4 * max(1.0, abs(x))
        if x - h < 0.0:
            # one-sided stencil at the domain edge
            f0, f1, f2 = self.value(x), self.value(x + h), self.value(x + 2 * h)
            return (f2 - 2.0 * f1 + f0) / (h * h)
        return (self.value(x + h) - 2.0 * self.value(x) + self.value(x - h)) / (h * h)


# --- Laplace-type finite-volume integrals -------------------------------------


def _locate_maximum(fn: Callable[[float], float], x_hi: float) -> tuple[float, float]:
    """Golden-section refinement of the coarse-scan argmax of fn on [0, x_hi]."""
    xs = np.linspace(0.0, x_hi, 241)
    vals = np.array([fn(x) for x in xs])
    i = int(np.argmax(vals))
    if i == 0:
        return 0.0, vals[0]
    if i == len(xs) - 1:
        return xs[-1], vals[-1]
    try:
        xmax = optimize.golden(lambda x: -fn(x), brack=(xs[i - 1], xs[i], xs[i + 1]))
    except ValueError:  # coarse scan hit a flat stretch, keep the scan point
        return float(xs[i]), float(vals[i])
    xmax = min(max(float(xmax), 0.0), x_hi)
    return xmax, fn(xmax)


def _auto_upper_limit(fn, f_max: float, scale: float, start: float) -> float:
    x_hi = max(start, 1.0)
    for _ in range(60):
        if scale * (fn(x_hi) - f_max) < -80.0:
            # probe a few octaves beyond for resurgent growth
            if any(scale * (fn(m * x_hi) - f_max) > -80.0 for m in (2.0, 4.0, 8.0)):
                raise ValueError("integrand tail does not decay; non-integrable family")
            return x_hi
        x_hi *= 2.0
    raise ValueError("integrand tail does not decay; non-integrable family")


def finite_volume_expectation(
    model: HoppingModel,
    params: PhysParams,
    L: int,
    quantity: str,
    mean_field: bool = True,
):
    """Finite-volume expectation from the auxiliary-field integral.

    quantity: "ssb" (per-band vector), "odlro" (band-pair map), "cpd",
    or "logZ" (log of the pairing-field integral, relative to free fermions).
    Only the mean-field integrand (fermion determinant ratio, no quartic
    correction) is supported; the correction is O(L^-d) and out of scope.

    The complex-field integral is reduced to a radial one: the angular
    factor of the breaking term integrates to 2*pi*I_n(kappa(r)) with
    kappa = 2*beta*L^d*gamma*r/|U| (n=0 for even insertions, n=1 for the
    conjugate-field insertion), so gamma=0 and gamma>0 share one stable
    1D adaptive quadrature with the exponential shift factored out.
    """
    if not mean_field:
        raise ValueError(
            "finite_volume_expectation: only mean_field=True is implemented; "
            "the interacting correction factor is out of scope"
        )
    if quantity not in QUANTITIES:
        raise ValueError(f"finite_volume_expectation: unknown quantity {quantity!r}")

    grid = BZGrid(model.basis, L, 0.0)
    beta, gamma, absU = params.beta, params.gamma, abs(params.U)
    d = model.basis.dim
    scale = beta * L**d
    pot = EffectivePotential1D(model, params, L=L)
    b = model.bands

    if quantity == "ssb" and gamma == 0.0:
        # the phase integral of conj(phi) vanishes identically
        return np.zeros(b)

    def tilted(r: float) -> float:
        return pot.value(r) + 2.0 * gamma * r / absU

    x_probe = _auto_upper_limit(tilted, tilted(0.0), scale, 1.0)
    a_loc, f_max = _locate_maximum(tilted, x_probe)
    step = 1e-4 * max(1.0, a_loc)
    x0 = max(a_loc, step)
    f2 = (tilted(x0 + step) - 2.0 * tilted(x0) + tilted(x0 - step)) / step**2
    sigma = 1.0 / math.sqrt(scale * max(abs(f2), 1e-12))
    x_hi = a_loc + 12.0 * sigma
    if scale * (tilted(x_hi) - f_max) > -20.0:
        x_hi = _auto_upper_limit(tilted, f_max, scale, x_hi)

    kappa_coef = 2.0 * scale * gamma / absU

    def weight(r: float, order: int) -> float:
        w = r * math.exp(scale * (tilted(r) - f_max))
        if not math.isfinite(w):
            raise RuntimeError("overflow in the shifted finite-volume integrand")
        if kappa_coef != 0.0:
            w *= float(special.ive(order, kappa_coef * r))
        elif order > 0:
            w = 0.0
        return w

    den, _ = integrate.quad(
        lambda r: weight(r, 0), 0.0, x_hi, points=[a_loc], limit=200, epsabs=0.0, epsrel=1e-11
    )

    if quantity == "logZ":
        return (
            math.log(beta * L**d / (math.pi * absU))
            + math.log(2.0 * math.pi)
            + scale * (f_max - gamma * gamma / absU)
            + math.log(den)
        )

    s_cache: dict[float, Array] = {}

    def s_vec(r: float) -> Array:
        hit = s_cache.get(r)
        if hit is None:
            hit = s_cache[r] = band_pair_factors(model, params, r, grid)
        return hit

    def ratio(u_fn: Callable[[float], float], order: int) -> float:
        num, _ = integrate.quad(
            lambda r: weight(r, order) * u_fn(r),
            0.0,
            x_hi,
            points=[a_loc],
            limit=200,
            epsabs=0.0,
            epsrel=1e-11,
        )
        return num / den

    if quantity == "cpd":
        return ratio(lambda r: r * r * float(s_vec(r).sum()) ** 2, 0)
    if quantity == "ssb":
        return np.array(
            [-ratio(lambda r, i=i: r * float(s_vec(r)[i]), 1) for i in range(b)]
        )
    return {
        (r, e): ratio(lambda x, r=r, e=e: x * x * float(s_vec(x)[r] * s_vec(x)[e]), 0)
        for r in range(b)
        for e in range(b)
    }


@dataclasses.dataclass(frozen=True)
class LaplaceCheck:
    L_values: tuple
    maximizers: tuple
    ratios: tuple
    ratio_limit: float
    ratio_errors: tuple
    log_values: tuple
    log_limit: float
    log_errors: tuple


def laplace_check_1d(
    f_family: Callable[[float, int | None], float],
    g_family: Callable[[float, int | None], float],
    u_family: Callable[[float, int | None], float],
    a: float,
    L_values: Sequence[int],
    d: int = 2,
    x_max: float | None = None,
) -> LaplaceCheck:
    """Convergence report for x-weighted Laplace ratios and log-asymptotics.

    Families are callables (x, L); L=None selects the limit member. For each
    L the report contains  (int x e^{L^d f_L} u_L) / (int x e^{L^d f_L} g_L)
    against u(a)/g(a), and  L^{-d} log(int x e^{L^d f_L} g_L)  against f(a).
    Hypotheses (unique interior/boundary maximizer, decaying tails) are the
    caller's responsibility; a non-decaying tail raises.
    """
    ratio_limit = u_family(a, None) / g_family(a, None)
    log_limit = f_family(a, None)
    maxima, ratios, ratio_errs, logs, log_errs = [], [], [], [], []
    for L in L_values:
        scale = float(L) ** d
        fn = lambda x: f_family(x, L)
        if x_max is None:
            x_hi = _auto_upper_limit(fn, fn(a), scale, max(2.0 * a, 1.0))
        else:
            x_hi = x_max
        a_L, f_max = _locate_maximum(fn, x_hi)

        def weight(x):
            w = x * math.exp(scale * (fn(x) - f_max))
            if not math.isfinite(w):
                raise RuntimeError("overflow in the shifted Laplace integrand")
            return w

        num, _ = integrate.quad(
            lambda x: weight(x) * u_family(x, L),
            0.0,
            x_hi,
            points=[a_L],
            limit=200,
            epsabs=0.0,
            epsrel=1e-11,
        )
        den, _ = integrate.quad(
            lambda x: weight(x) * g_family(x, L),
            0.0,
            x_hi,
            points=[a_L],
            limit=200,
            epsabs=0.0,
            epsrel=1e-11,
        )
        ratio = num / den
        log_val = f_max + math.log(den) / scale
        maxima.append(a_L)
        ratios.append(ratio)
        ratio_errs.append(abs(ratio - ratio_limit))
        logs.append(log_val)
        log_errs.append(abs(log_val - log_limit))
    return LaplaceCheck(
        tuple(L_values),
        tuple(maxima),
        tuple(ratios),
        ratio_limit,
        tuple(ratio_errs),
        tuple(logs),
        log_limit,
        tuple(log_errs),
    )

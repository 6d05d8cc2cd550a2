"""Free covariance of the paired model and its multi-scale decomposition.

The covariance is the two-point function of the quadratic particle-hole
Hamiltonian. It is computed three ways, all exactly equal at discrete
times: the continuum-time Fermi-factor form, the Matsubara-frequency sum
at time step 1/h, and the equal-time momentum closed forms. On top of
the plain covariance the module builds the smooth frequency-momentum
cutoff family, the per-scale covariances with their resummation rule,
Gram-type determinant bound checks, and the kernel norms that measure
decay of the scale pieces.

Index conventions: covariance arguments are (sector, band, site, time)
with sector in {1,2}, band 1-based, site a flat index or coordinate
tuple, and time in [0, beta) (a multiple of 1/h for the discrete forms).
The flattened (sector, band) pair is (sector-1)*b + band, the row/column
convention of all 2b x 2b blocks here.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .gap_solver import PhysParams
from .lattice_models import HoppingModel
from .quadrature import BZGrid

Array = np.ndarray

_NORM_KINDS = ("one_inf", "one", "prime", "coupled", "bracket_inf", "bracket_one")

# dense kernel tables keep b * L^d * (beta h) at or below this per spin-sign axis
_MAX_PLAIN_STATES = 512


def _site_offset(dim: int, L: int, site) -> Array:
    """Integer coordinates of a site given as a flat index or a tuple."""
    if isinstance(site, (int, np.integer)):
        idx = int(site)
        if not 0 <= idx < L**dim:
            raise ValueError(f"site index {idx} outside range({L ** dim})")
        coords = []
        for _ in range(dim):
            coords.append(idx % L)
            idx //= L
        return np.array(coords[::-1], dtype=float)
    coords = [int(c) % L for c in site]
    if len(coords) != dim:
        raise ValueError(f"site tuple needs {dim} coordinates")
    return np.array(coords, dtype=float)


def field_block(model: HoppingModel, phi: complex, k: Array) -> Array:
    """Hermitian 2b x 2b pairing blocks over momenta of shape (N, d)."""
    ek = np.asarray(model.hopping(k), dtype=complex)
    if ek.ndim == 2:
        ek = ek[:, None, None]
    b = model.bands
    out = np.zeros(ek.shape[:-2] + (2 * b, 2 * b), dtype=complex)
    out[..., :b, :b] = ek
    out[..., b:, b:] = -ek
    out[..., :b, b:] = np.conj(complex(phi)) * np.eye(b)
    out[..., b:, :b] = complex(phi) * np.eye(b)
    return out


def field_eigensystem(model: HoppingModel, phi: complex, k: Array):
    """Eigenvalues and eigenvectors of the pairing blocks (values ascending)."""
    return np.linalg.eigh(field_block(model, phi, k))


def _check_denominators(dens: Array) -> None:
    if np.min(np.abs(dens)) < 1e-12:
        raise ArithmeticError(
            "covariance is singular: the field sits on a singular line and the "
            "pairing source does not gap the zero modes"
        )


def _time_ordered_weights(a: Array, tau: float, beta: float, forward: bool) -> Array:
    """exp((s-t) a) times the Fermi factor, branch-stable in Re(a).

    `a` collects i*theta/2 + eigenvalue; forward means s >= t with
    tau = s - t in [0, beta), otherwise tau in (-beta, 0).
    """
    pos = a.real > 0.0
    out = np.empty_like(a)
    if forward:
        den_pos = 1.0 + np.exp(-beta * a[pos])
        den_neg = 1.0 + np.exp(beta * a[~pos])
        _check_denominators(np.concatenate([den_pos, den_neg]))
        out[pos] = np.exp((tau - beta) * a[pos]) / den_pos
        out[~pos] = np.exp(tau * a[~pos]) / den_neg
    else:
        den_pos = 1.0 + np.exp(-beta * a[pos])
        den_neg = 1.0 + np.exp(beta * a[~pos])
        _check_denominators(np.concatenate([den_pos, den_neg]))
        out[pos] = -np.exp(tau * a[pos]) / den_pos
        out[~pos] = -np.exp((tau + beta) * a[~pos]) / den_neg
    return out


def _block_entry(rho_bar: int, rho: int, bands: int) -> int:
    if rho_bar not in (1, 2):
        raise ValueError("sector must be 1 or 2")
    if not 1 <= rho <= bands:
        raise ValueError(f"band {rho} outside 1..{bands}")
    return (rho_bar - 1) * bands + rho - 1


def covariance_continuum(
    model: HoppingModel, params: PhysParams, phi: complex, L: int, X, Y
) -> complex:
    """Free two-point function at continuous times via per-momentum spectra."""
    (rho_bar, rho, x, s), (eta_bar, eta, y, t) = X, Y
    beta = params.beta
    if not (0.0 <= s < beta and 0.0 <= t < beta):
        raise ValueError("times must lie in [0, beta)")
    grid = BZGrid(model.basis, L)
    lam, vec = field_eigensystem(model, phi, grid.nodes())
    a = 0.5j * params.theta_reduced + lam
    weights = _time_ordered_weights(a, s - t, beta, forward=s >= t)
    row = _block_entry(rho_bar, rho, model.bands)
    col = _block_entry(eta_bar, eta, model.bands)
    frac = grid.fractional()
    delta = _site_offset(model.dim, L, x) - _site_offset(model.dim, L, y)
    phases = np.exp(1j * frac @ delta)
    per_k = np.einsum("kj,kj,kj->k", vec[:, row, :], weights, vec[:, col, :].conj())
    return complex(phases @ per_k) / grid.node_count


def _sinhc_over(beta: float, s: Array) -> Array:
    """sinh(beta s)/s with the finite limit beta at s = 0."""
    small = s < 1e-8
    safe = np.where(small, 1.0, s)
    out = np.sinh(beta * safe) / safe
    return np.where(small, beta * (1.0 + (beta * s) ** 2 / 6.0), out)


def covariance_equal_time(
    model: HoppingModel, params: PhysParams, phi: complex, L: int, X, Y
) -> complex:
    """Equal-time covariance from the momentum closed forms.

    X and Y are (sector, band, site) triples; the common time drops out.
    The two sector-diagonal terms and the sector-off-diagonal pairing
    term are assembled per momentum from the band eigensystem.
    """
    (rho_bar, rho, x), (eta_bar, eta, y) = X, Y
    beta = params.beta
    grid = BZGrid(model.basis, L)
    ek = np.asarray(model.hopping(grid.nodes()), dtype=complex)
    if ek.ndim == 2:
        ek = ek[:, None, None]
    evs, vecs = np.linalg.eigh(ek)
    mixed = np.sqrt(evs**2 + abs(complex(phi)) ** 2)
    cos_half = math.cos(beta * params.theta_reduced / 2.0)
    den = cos_half + np.cosh(beta * mixed)
    frac = grid.fractional()
    delta = _site_offset(model.dim, L, x) - _site_offset(model.dim, L, y)
    phases = np.exp(1j * frac @ delta)
    r, c = rho - 1, eta - 1
    if not (0 <= r < model.bands and 0 <= c < model.bands):
        raise ValueError("band label out of range")

    if rho_bar == eta_bar:
        sign = -1.0 if rho_bar == 1 else 1.0
        f_even = (np.exp(-0.5j * beta * params.theta_reduced) + np.cosh(beta * mixed)) / den
        f_odd = sign * _sinhc_over(beta, mixed) * evs / den
        diag = f_even + f_odd
    else:
        coef = -(np.conj(complex(phi)) if (rho_bar, eta_bar) == (1, 2) else complex(phi))
        diag = coef * _sinhc_over(beta, mixed) / den
    per_k = np.einsum("kj,kj,kj->k", vecs[:, r, :], diag, vecs[:, c, :].conj())
    return complex(phases @ per_k) / (2.0 * grid.node_count)


def matsubara_frequencies(beta: float, h: float) -> Array:
    """Odd multiples of pi/beta in the window |omega| < pi h (beta h of them)."""
    half = int(round(beta * h / 2.0))
    n = np.arange(-half, half)
    return math.pi * (2 * n + 1) / beta


def _check_time_step(beta: float, h: float) -> int:
    steps = beta * h
    if abs(steps / 2.0 - round(steps / 2.0)) > 1e-9 or round(steps) < 2:
        raise ValueError("h must be a positive multiple of 2/beta")
    return int(round(steps))


def _time_index(t: float, beta: float, h: float, n_times: int) -> int:
    j = t * h
    if abs(j - round(j)) > 1e-9 * max(1.0, abs(j)):
        raise ValueError("times must be multiples of 1/h")
    j = int(round(j))
    if not 0 <= j < n_times:
        raise ValueError("times must lie in [0, beta)")
    return j


def _matsubara_resolvents(
    model: HoppingModel, params: PhysParams, phi: complex, L: int, h: float
):
    """Per (omega, k) resolvent spectra for the time-discrete covariance.

    Returns (grid, omegas, scalars, vec) where scalars[w, k, j] is
    1 / (h (1 - exp((-i (omega - theta/2) + lambda_j) / h))).
    """
    grid = BZGrid(model.basis, L)
    lam, vec = field_eigensystem(model, phi, grid.nodes())
    omegas = matsubara_frequencies(params.beta, h)
    shift = omegas - 0.5 * params.theta_reduced
    expo = (-1j * shift[:, None, None] + lam[None, :, :]) / h
    dens = h * (1.0 - np.exp(expo))
    _check_denominators(dens)
    return grid, omegas, 1.0 / dens, vec


def covariance_matsubara(
    model: HoppingModel, params: PhysParams, phi: complex, L: int, h: float, X, Y
) -> complex:
    """Time-discrete covariance as a frequency-momentum double sum."""
    (rho_bar, rho, x, s), (eta_bar, eta, y, t) = X, Y
    n_times = _check_time_step(params.beta, h)
    _time_index(s, params.beta, h, n_times)
    _time_index(t, params.beta, h, n_times)
    grid, omegas, scalars, vec = _matsubara_resolvents(model, params, phi, L, h)
    row = _block_entry(rho_bar, rho, model.bands)
    col = _block_entry(eta_bar, eta, model.bands)
    per = np.einsum("kj,wkj,kj->wk", vec[:, row, :], scalars, vec[:, col, :].conj())
    frac = grid.fractional()
    delta = _site_offset(model.dim, L, x) - _site_offset(model.dim, L, y)
    phases = np.exp(1j * frac @ delta)
    time_phase = np.exp(1j * omegas * (s - t))
    total = time_phase @ per @ phases
    return complex(total) / (params.beta * grid.node_count)


@dataclasses.dataclass(frozen=True)
class FieldIndexSet:
    """Enumeration of (sector, band, site, time[, sign]) index tuples.

    Flat order is lexicographic with the listed field order; the sign
    axis (+1 before -1) is the innermost. Plain indices (without sign)
    address covariance tables; signed indices address antisymmetrized
    kernels.
    """

    bands: int
    length: int
    dim: int
    beta: float
    h: float

    def __post_init__(self):
        n_times = _check_time_step(self.beta, self.h)
        if self.bands * self.length**self.dim * n_times > _MAX_PLAIN_STATES:
            raise ValueError("index set too large for dense kernel tables")

    @property
    def n_sites(self) -> int:
        return self.length**self.dim

    @property
    def n_times(self) -> int:
        return int(round(self.beta * self.h))

    @property
    def plain_size(self) -> int:
        return 2 * self.bands * self.n_sites * self.n_times

    @property
    def signed_size(self) -> int:
        return 2 * self.plain_size

    def flat_plain(self, sector: int, band: int, site, tidx: int) -> int:
        blk = _block_entry(sector, band, self.bands)
        if not 0 <= tidx < self.n_times:
            raise ValueError("time index out of range")
        site_idx = int(np.ravel_multi_index(
            tuple(int(c) for c in np.atleast_1d(
                _site_offset(self.dim, self.length, site).astype(int))),
            (self.length,) * self.dim,
        ))
        return (blk * self.n_sites + site_idx) * self.n_times + tidx

    def flat_signed(self, sector: int, band: int, site, tidx: int, sign: int) -> int:
        if sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        return 2 * self.flat_plain(sector, band, site, tidx) + (0 if sign == 1 else 1)

    def signed_shape(self) -> tuple[int, ...]:
        return (2, self.bands, self.n_sites, self.n_times, 2)


class CovarianceTable:
    """Dense access to the time-discrete covariance on a finite cluster.

    Entries are materialized lazily per difference class (site offset,
    time offset): translation invariance in space is exact, and shifting
    both times wraps antiperiodically, so one 2b x 2b block per class
    determines every entry.
    """

    def __init__(
        self, model: HoppingModel, params: PhysParams, phi: complex, L: int, h: float
    ):
        self.model = model
        self.params = params
        self.phi = complex(phi)
        self.L = L
        self.h = h
        self.n_times = _check_time_step(params.beta, h)
        self.index = FieldIndexSet(model.bands, L, model.dim, params.beta, h)
        grid, omegas, scalars, vec = _matsubara_resolvents(model, params, phi, L, h)
        self._frac = grid.fractional()
        self._omegas = omegas
        # resolvent blocks R(omega, k) in the 2b x 2b convention
        self._blocks = np.einsum("krj,wkj,kcj->wkrc", vec, scalars, vec.conj())
        self._norm = params.beta * grid.node_count
        self._classes: dict[tuple, Array] = {}

    def _difference_block(self, delta_site: tuple, tau_idx: int) -> Array:
        key = (delta_site, tau_idx)
        if key not in self._classes:
            phases = np.exp(1j * self._frac @ np.array(delta_site, dtype=float))
            time_phase = np.exp(1j * self._omegas * (tau_idx / self.h))
            block = np.einsum(
                "w,k,wkrc->rc", time_phase, phases, self._blocks
            ) / self._norm
            self._classes[key] = block
        return self._classes[key]

    def value(self, X, Y) -> complex:
        (rho_bar, rho, x, s), (eta_bar, eta, y, t) = X, Y
        si = _time_index(s, self.params.beta, self.h, self.n_times)
        ti = _time_index(t, self.params.beta, self.h, self.n_times)
        delta = _site_offset(self.model.dim, self.L, x) - _site_offset(
            self.model.dim, self.L, y
        )
        delta_site = tuple(int(c) % self.L for c in delta)
        tau = si - ti
        sign = 1.0
        if tau < 0:
            # antiperiodic wrap: each frequency phase flips sign across beta
            tau += self.n_times
            sign = -1.0
        block = self._difference_block(delta_site, tau)
        row = _block_entry(rho_bar, rho, self.model.bands)
        col = _block_entry(eta_bar, eta, self.model.bands)
        return sign * complex(block[row, col])

    def dense(self) -> Array:
        """Full (plain_size, plain_size) table in flat_plain order."""
        time_phase = np.exp(
            1j * np.outer(self._omegas, np.arange(self.n_times) / self.h)
        )
        site_phase = _site_phases(self._frac, self.L, self.model.dim)
        classes = np.einsum(
            "wT,kD,wkrc->rDTc", time_phase, site_phase, self._blocks
        ) / self._norm
        return _gather_differences(
            classes, self.L, self.model.dim, self.n_times, antiperiodic=True
        )

    def difference_rows(self):
        """Rows (sector_r, band_r, sector_c, band_c, delta_site, delta_t, value)."""
        rows = []
        b = self.model.bands
        for delta_site in np.ndindex(*(self.L,) * self.model.dim):
            for tau in range(self.n_times):
                block = self._difference_block(tuple(delta_site), tau)
                for row in range(2 * b):
                    for col in range(2 * b):
                        rows.append(
                            (
                                row // b + 1,
                                row % b + 1,
                                col // b + 1,
                                col % b + 1,
                                tuple(delta_site),
                                tau / self.h,
                                complex(block[row, col]),
                            )
                        )
        return rows


def _site_phases(frac: Array, L: int, dim: int) -> Array:
    """e^{i k . delta} for momenta (axis 0) against all site offsets (axis 1)."""
    offsets = np.array(list(np.ndindex(*(L,) * dim)), dtype=float)
    return np.exp(1j * frac @ offsets.T)


def _gather_differences(
    classes: Array, L: int, dim: int, n_times: int, antiperiodic: bool
) -> Array:
    """Expand difference-class blocks (2b, D, T, 2b) to a flat dense table.

    Row/column order is flat_plain; the antiperiodic flag flips the sign
    of entries whose time difference wrapped across beta.
    """
    b2 = classes.shape[0]
    n_sites = L**dim
    coords = np.array(list(np.ndindex(*(L,) * dim)))
    diff = (coords[:, None, :] - coords[None, :, :]) % L
    d_site = np.ravel_multi_index(
        tuple(diff[..., i] for i in range(dim)), (L,) * dim
    )
    t = np.arange(n_times)
    d_time = (t[:, None] - t[None, :]) % n_times
    gathered = classes[:, d_site[:, None, :, None], d_time[None, :, None, :], :]
    if antiperiodic:
        sign = np.where(t[:, None] >= t[None, :], 1.0, -1.0)
        gathered = gathered * sign[None, None, :, None, :, None]
    flat = b2 * n_sites * n_times
    return gathered.transpose(0, 1, 2, 5, 3, 4).reshape(flat, flat)


def antisymmetric_extension(table: Array) -> Array:
    """Signed-index antisymmetric kernel from a plain covariance table.

    Rows and columns double: sign +1 maps to even positions, -1 to odd,
    and the only nonzero sign pattern is (+1, -1) carrying C(X, Y)/2
    against (-1, +1) carrying -C(Y, X)/2.
    """
    c0 = np.asarray(table, dtype=complex)
    n0 = c0.shape[0]
    out = np.zeros((2 * n0, 2 * n0), dtype=complex)
    out[0::2, 1::2] = 0.5 * c0
    out[1::2, 0::2] = -0.5 * c0.T
    return out


@dataclasses.dataclass(frozen=True)
class DeterminantBoundReport:
    bound: float
    max_ratio: float
    violations: int
    trials: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def gram_determinant_bound(params: PhysParams, bands: int) -> float:
    """Field-independent bound on Gram determinants of covariance entries."""
    beta = params.beta
    theta = params.theta_reduced
    gap = abs(0.5 * theta - math.pi / beta)
    if gap == 0.0:
        raise ArithmeticError("bound degenerates on the singular field lines")
    return 16.0 * bands**2 * (1.0 + math.pi / (beta * gap))


def determinant_bound_check(
    table: CovarianceTable,
    n_trials: int = 1000,
    n_max: int = 6,
    m: int = 4,
    seed: int = 0,
) -> DeterminantBoundReport:
    """Randomized Gram determinant test |det(<u_i, v_j> C(X_i, Y_j))| <= D^n."""
    rng = np.random.default_rng(seed)
    bound = gram_determinant_bound(table.params, table.model.bands)
    idx = table.index
    sites = list(np.ndindex(*(table.L,) * table.model.dim))

    def random_point():
        return (
            int(rng.integers(1, 3)),
            int(rng.integers(1, table.model.bands + 1)),
            sites[int(rng.integers(len(sites)))],
            int(rng.integers(idx.n_times)) / table.h,
        )

    def random_unit(k):
        v = rng.normal(size=k) + 1j * rng.normal(size=k)
        return v / np.linalg.norm(v)

    worst = 0.0
    violations = 0
    for _ in range(n_trials):
        n = int(rng.integers(1, n_max + 1))
        xs = [random_point() for _ in range(n)]
        ys = [random_point() for _ in range(n)]
        us = [random_unit(m) for _ in range(n)]
        vs = [random_unit(m) for _ in range(n)]
        mat = np.array(
            [
                [np.vdot(us[i], vs[j]) * table.value(xs[i], ys[j]) for j in range(n)]
                for i in range(n)
            ]
        )
        ratio = abs(np.linalg.det(mat)) / bound**n
        worst = max(worst, ratio)
        if ratio > 1.0 + 1e-9:
            violations += 1
    return DeterminantBoundReport(bound, worst, violations, n_trials)


def _mollifier(t: Array) -> Array:
    t = np.asarray(t, dtype=float)
    pos = t > 0.0
    return np.where(pos, np.exp(-1.0 / np.where(pos, t, 1.0)), 0.0)


def cutoff_profile(x) -> Array:
    """Smooth nonincreasing step: 1 below 8/5, 0 above 2."""
    x = np.asarray(x, dtype=float)
    hi = _mollifier(2.0 - x)
    lo = _mollifier(x - 1.6)
    return np.where(x <= 1.6, 1.0, np.where(x >= 2.0, 0.0, hi / np.maximum(hi + lo, 1e-300)))


@dataclasses.dataclass(frozen=True)
class CutoffFamily:
    """Scale bookkeeping for the frequency-momentum decomposition.

    M controls the geometric spacing of the annuli; the scale index runs
    from n_beta (the innermost shell around the shifted zero frequency)
    up to n_h (past which the profile saturates at 1).
    """

    M: float
    h: float
    beta: float

    def __post_init__(self):
        if self.M < 2.0:
            raise ValueError("the scale ratio M must be at least 2")
        _check_time_step(self.beta, self.h)
        if not self.n_beta < self.nhat_beta < self.n_h:
            raise ValueError("scale window is empty; increase h")

    @property
    def n_beta(self) -> int:
        return math.floor(math.log(1.0 / self.beta) / math.log(self.M))

    @property
    def nhat_beta(self) -> int:
        return self.n_beta + 1 if self.beta <= 1.0 else 0

    @property
    def n_h(self) -> int:
        return math.floor(math.log(self.h) / math.log(self.M)) + 2

    @property
    def base_scale(self) -> float:
        """beta^{-1} M^{-n_beta}, always in [1, M]."""
        return self.M ** (-self.n_beta) / self.beta

    def scales(self) -> range:
        return range(self.n_beta, self.n_h + 1)


def cutoff_values(
    fam: CutoffFamily, model: HoppingModel, l: int, omega, k
) -> Array:
    """Scale-l cutoff at frequencies omega (shape N) and momenta k (N, d)."""
    if not fam.n_beta <= l <= fam.n_h:
        raise ValueError(f"scale {l} outside [{fam.n_beta}, {fam.n_h}]")
    omega = np.asarray(omega, dtype=float)
    k = np.atleast_2d(np.asarray(k, dtype=float))
    env = np.asarray(model.envelope(k), dtype=float)
    arg = np.sqrt(
        fam.h**2 * np.sin((omega - math.pi / fam.beta) / (2.0 * fam.h)) ** 2 + env**2
    )
    scaled = arg / fam.base_scale
    top = cutoff_profile(fam.M ** (-float(l)) * scaled)
    if l == fam.n_beta:
        return top
    return top - cutoff_profile(fam.M ** (-float(l - 1)) * scaled)


def _scale_blocks(
    fam: CutoffFamily,
    model: HoppingModel,
    params: PhysParams,
    phi: complex,
    L: int,
    l: int,
):
    grid, omegas, scalars, vec = _matsubara_resolvents(model, params, phi, L, fam.h)
    nodes = grid.nodes()
    chi = np.array([cutoff_values(fam, model, l, np.full(len(nodes), w), nodes) for w in omegas])
    blocks = np.einsum("krj,wkj,wk,kcj->wkrc", vec, scalars, chi, vec.conj())
    return grid, omegas, blocks


def scale_covariance(
    fam: CutoffFamily,
    model: HoppingModel,
    params: PhysParams,
    phi: complex,
    L: int,
    l: int,
    X,
    Y,
) -> complex:
    """Scale-l piece of the covariance (twisted phase, cutoff weight)."""
    (rho_bar, rho, x, s), (eta_bar, eta, y, t) = X, Y
    n_times = _check_time_step(params.beta, fam.h)
    _time_index(s, params.beta, fam.h, n_times)
    _time_index(t, params.beta, fam.h, n_times)
    grid, omegas, blocks = _scale_blocks(fam, model, params, phi, L, l)
    row = _block_entry(rho_bar, rho, model.bands)
    col = _block_entry(eta_bar, eta, model.bands)
    frac = grid.fractional()
    delta = _site_offset(model.dim, L, x) - _site_offset(model.dim, L, y)
    phases = np.exp(1j * frac @ delta)
    time_phase = np.exp(1j * (omegas - math.pi / params.beta) * (s - t))
    total = np.einsum("w,k,wk->", time_phase, phases, blocks[:, :, row, col])
    return complex(total) / (params.beta * grid.node_count)


def scale_covariance_table(
    fam: CutoffFamily,
    model: HoppingModel,
    params: PhysParams,
    phi: complex,
    L: int,
    l: int,
) -> Array:
    """Dense scale-l covariance over the plain index set (flat_plain order)."""
    index = FieldIndexSet(model.bands, L, model.dim, params.beta, fam.h)
    grid, omegas, blocks = _scale_blocks(fam, model, params, phi, L, l)
    time_phase = np.exp(
        1j
        * np.outer(omegas - math.pi / params.beta, np.arange(index.n_times) / fam.h)
    )
    site_phase = _site_phases(grid.fractional(), L, model.dim)
    classes = np.einsum("wT,kD,wkrc->rDTc", time_phase, site_phase, blocks) / (
        params.beta * grid.node_count
    )
    # the twisted frequencies are even multiples of pi/beta, so the time
    # dependence is periodic mod beta (no wrap sign)
    return _gather_differences(
        classes, L, model.dim, index.n_times, antiperiodic=False
    )


def scale_sum_identity_check(
    fam: CutoffFamily,
    model: HoppingModel,
    params: PhysParams,
    phi: complex,
    L: int,
    n_samples: int = 24,
    seed: int = 5,
) -> float:
    """Max residual of: sum of scale pieces = twisted full covariance."""
    rng = np.random.default_rng(seed)
    n_times = _check_time_step(params.beta, fam.h)
    sites = list(np.ndindex(*(L,) * model.dim))
    worst = 0.0
    for _ in range(n_samples):
        X = (
            int(rng.integers(1, 3)),
            int(rng.integers(1, model.bands + 1)),
            sites[int(rng.integers(len(sites)))],
            int(rng.integers(n_times)) / fam.h,
        )
        Y = (
            int(rng.integers(1, 3)),
            int(rng.integers(1, model.bands + 1)),
            sites[int(rng.integers(len(sites)))],
            int(rng.integers(n_times)) / fam.h,
        )
        total = sum(
            scale_covariance(fam, model, params, phi, L, l, X, Y)
            for l in fam.scales()
        )
        twist = np.exp(-1j * math.pi * (X[3] - Y[3]) / params.beta)
        reference = twist * covariance_continuum(model, params, phi, L, X, Y)
        worst = max(worst, abs(total - reference))
    return worst


def kernel_norms(
    index: FieldIndexSet,
    kernel: Array,
    which: str,
    other: Array | None = None,
    split: int | None = None,
) -> float:
    """Summed-decay norms of dense kernels over the signed index set.

    one_inf and one apply to any arity; prime and coupled to
    antisymmetric two-argument kernels (they weigh the time axis
    specially); bracket_inf and bracket_one to a kernel on a split
    index block paired with a two-argument kernel `other`.
    """
    if which not in _NORM_KINDS:
        raise ValueError(f"unknown norm {which!r}; choose from {_NORM_KINDS}")
    f = np.abs(np.asarray(kernel))
    n_axes = f.ndim
    size = index.signed_size
    if n_axes == 0:
        return float(f)
    if any(s != size for s in f.shape):
        raise ValueError("kernel axes must all have the signed index size")
    q = 1.0 / index.h

    if which == "one":
        return float(f.sum() * q**n_axes)

    if which == "one_inf":
        best = 0.0
        for j in range(n_axes):
            pinned = f.sum(axis=tuple(a for a in range(n_axes) if a != j))
            best = max(best, float(pinned.max()))
        return best * q ** (n_axes - 1)

    if which in ("prime", "coupled"):
        if n_axes != 2:
            raise ValueError("prime/coupled norms need a two-argument kernel")
        shaped = f.reshape(size, *index.signed_shape())
        per_time = shaped.sum(axis=(1, 2, 3, 5))  # (X0, time)
        prime = float(per_time.max())
        if which == "prime":
            return prime
        return prime + (1.0 + 1.0 / index.beta) * kernel_norms(
            index, kernel, "one_inf"
        )

    if other is None or split is None:
        raise ValueError("bracket norms need `other` and `split`")
    g = np.abs(np.asarray(other))
    if g.shape != (size, size):
        raise ValueError("`other` must be a two-argument kernel")
    m, n = split, n_axes - split
    if m < 1 or n < 1:
        raise ValueError("split must leave arguments on both sides")

    if which == "bracket_one":
        best = 0.0
        for j in range(m):
            for k_axis in range(n):
                keep = (j, m + k_axis)
                reduced = f.sum(axis=tuple(a for a in range(n_axes) if a not in keep))
                best = max(best, float((reduced * g).sum()))
        return best * q ** (m + n)

    # bracket_inf
    first = 0.0
    inner = None
    for k_axis in range(n):
        reduced = f.sum(
            axis=tuple(a for a in range(m, n_axes) if a != m + k_axis)
        )  # (*m axes, size)
        paired = reduced @ g.T  # (..., Y0)
        cand = paired.max(axis=-1)
        inner = cand if inner is None else np.maximum(inner, cand)
    inner = inner * q**n
    for j in range(m):
        pinned = inner.sum(axis=tuple(a for a in range(m) if a != j))
        first = max(first, float(pinned.max()) * q ** (m - 1))
    second = 0.0
    inner2 = None
    for j in range(m):
        reduced = f.sum(axis=tuple(a for a in range(m) if a != j))  # (size, *n axes)
        paired = np.tensordot(g, reduced, axes=(1, 0))  # (X0, *n axes)
        cand = paired.max(axis=0)
        inner2 = cand if inner2 is None else np.maximum(inner2, cand)
    inner2 = inner2 * q**m
    for k_axis in range(n):
        pinned = inner2.sum(axis=tuple(a for a in range(n) if a != k_axis))
        second = max(second, float(pinned.max()) * q ** (n - 1))
    return max(first, second)

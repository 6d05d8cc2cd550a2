"""Exact Grassmann algebra and Gaussian integration at desk scale.

Polynomials live over at most 28 anticommuting generators, stored as
bitmask-to-coefficient maps, so every manipulation is exact: products
carry the crossing sign, exponentials of even elements terminate by
nilpotency, and Gaussian integrals reduce monomials to Pfaffians of the
antisymmetric pair-contraction matrix restricted to the monomial's
generators. Pfaffians expand recursively along the lowest index with
memoization over index subsets, trading speed for exactness.

On top of the algebra sit three identity checks on tiny clusters: the
discrete-time Gaussian integral of the interacting Boltzmann weight
against the operator-trace ratio, the auxiliary-field decoupling of the
quartic attraction at fixed time step, and the vanishing of the
time-average-deficit quartic under any covariance that is constant in
its time labels.

Generator layout: each plain label owns two generators, the conjugate
one first, so the signed index is 2 * plain + (0 conjugate, 1 plain).
The spinful label set orders plain indices by (band, site, spin, time
slice) with spin 0 meaning up.
"""

from __future__ import annotations

import cmath
import dataclasses
import math

import numpy as np

from .covariance_engine import _time_ordered_weights
from .ed_oracle import build_operator, trace_exp, trace_exp_product
from .gap_solver import PhysParams
from .lattice_models import HoppingModel
from .quadrature import BZGrid

Array = np.ndarray

# bitmask in a 32-bit word; checks beyond this size are not desk scale
_MAX_GENERATORS = 28


def _mask_indices(mask: int) -> tuple[int, ...]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return tuple(out)


def _merge_sign(left: int, right: int) -> int:
    """Sign of reordering the concatenation of two disjoint ascending masks."""
    sign = 1
    rest = right
    while rest:
        low = rest & -rest
        j = low.bit_length() - 1
        if (left >> (j + 1)).bit_count() & 1:
            sign = -sign
        rest ^= low
    return sign


class GrassmannPoly:
    """Polynomial in anticommuting generators with exact coefficient maps.

    Terms map a generator-subset bitmask to a complex coefficient; the
    monomial for a mask is the product of its generators in ascending
    index order. Zero coefficients are pruned eagerly so term counts
    track the support, never the full 2^n lattice.
    """

    __slots__ = ("n_gen", "terms")

    def __init__(self, n_gen: int, terms: dict[int, complex] | None = None):
        if not 1 <= n_gen <= _MAX_GENERATORS:
            raise ValueError(f"generator count must lie in 1..{_MAX_GENERATORS}")
        self.n_gen = int(n_gen)
        clean: dict[int, complex] = {}
        if terms:
            top = 1 << self.n_gen
            for mask, coeff in terms.items():
                if not 0 <= mask < top:
                    raise ValueError(f"mask {mask} outside the generator set")
                c = complex(coeff)
                if c != 0.0:
                    clean[mask] = c
        self.terms = clean

    @classmethod
    def zero(cls, n_gen: int) -> "GrassmannPoly":
        return cls(n_gen)

    @classmethod
    def one(cls, n_gen: int) -> "GrassmannPoly":
        return cls(n_gen, {0: 1.0 + 0.0j})

    @classmethod
    def monomial(cls, n_gen: int, indices, coeff: complex = 1.0) -> "GrassmannPoly":
        """Product of generators in the order given; repeats make it zero."""
        mask = 0
        sign = 1
        for idx in indices:
            i = int(idx)
            if not 0 <= i < n_gen:
                raise ValueError(f"generator index {i} outside range({n_gen})")
            bit = 1 << i
            if mask & bit:
                return cls(n_gen)
            if (mask >> (i + 1)).bit_count() & 1:
                sign = -sign
            mask |= bit
        return cls(n_gen, {mask: sign * complex(coeff)})

    @property
    def constant(self) -> complex:
        return self.terms.get(0, 0.0 + 0.0j)

    @property
    def is_even(self) -> bool:
        return all(mask.bit_count() % 2 == 0 for mask in self.terms)

    @property
    def degree(self) -> int:
        return max((mask.bit_count() for mask in self.terms), default=0)

    def coeff(self, indices) -> complex:
        idx = tuple(int(i) for i in indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("coefficient lookup needs strictly ascending indices")
        mask = 0
        for i in idx:
            if not 0 <= i < self.n_gen:
                raise ValueError(f"generator index {i} outside range({self.n_gen})")
            mask |= 1 << i
        return self.terms.get(mask, 0.0 + 0.0j)

    def max_abs(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def _check_partner(self, other: "GrassmannPoly") -> None:
        if self.n_gen != other.n_gen:
            raise ValueError("polynomials live on different generator sets")

    def __add__(self, other: "GrassmannPoly") -> "GrassmannPoly":
        self._check_partner(other)
        terms = dict(self.terms)
        for mask, coeff in other.terms.items():
            terms[mask] = terms.get(mask, 0.0) + coeff
        return GrassmannPoly(self.n_gen, terms)

    def __sub__(self, other: "GrassmannPoly") -> "GrassmannPoly":
        return self + (-other)

    def __neg__(self) -> "GrassmannPoly":
        return GrassmannPoly(self.n_gen, {m: -c for m, c in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, GrassmannPoly):
            self._check_partner(other)
            terms: dict[int, complex] = {}
            for ma, ca in self.terms.items():
                for mb, cb in other.terms.items():
                    if ma & mb:
                        continue
                    m = ma | mb
                    terms[m] = terms.get(m, 0.0) + _merge_sign(ma, mb) * ca * cb
            return GrassmannPoly(self.n_gen, terms)
        c = complex(other)
        return GrassmannPoly(self.n_gen, {m: c * v for m, v in self.terms.items()})

    def __rmul__(self, other) -> "GrassmannPoly":
        return self * other


def exp_even(poly: GrassmannPoly) -> GrassmannPoly:
    """Exponential of an even polynomial, exact by nilpotency.

    The constant part exponentiates scalarly; the rest has degree at
    least two, so the series stops after n_gen / 2 products.
    """
    if not poly.is_even:
        raise ValueError("exp_even needs an even polynomial")
    scale = cmath.exp(poly.constant)
    body = GrassmannPoly(
        poly.n_gen, {m: c for m, c in poly.terms.items() if m != 0}
    )
    acc = GrassmannPoly.one(poly.n_gen)
    term = GrassmannPoly.one(poly.n_gen)
    k = 0
    while term.terms:
        k += 1
        term = (term * body) * (1.0 / k)
        acc = acc + term
    return scale * acc


class WickCovariance:
    """Antisymmetric pair-contraction matrix with memoized Pfaffian minors.

    Entry (p, q) is the Gaussian pairing of generators p and q, so for a
    plain covariance C the interleaved layout carries C(X, Y) between
    the conjugate generator of X and the plain generator of Y; that is
    twice the antisymmetric extension of C.
    """

    def __init__(self, matrix: Array):
        m = np.array(matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("covariance matrix must be square")
        if m.shape[0] > _MAX_GENERATORS:
            raise ValueError(
                f"generator budget exceeded: {m.shape[0]} > {_MAX_GENERATORS}"
            )
        if not np.array_equal(m, -m.T):
            raise ValueError("covariance matrix must be antisymmetric, exactly")
        self.matrix = m
        self.n_gen = m.shape[0]
        self._minors: dict[int, complex] = {0: 1.0 + 0.0j}

    @classmethod
    def from_plain(cls, plain: Array) -> "WickCovariance":
        """Signed extension of a plain covariance, conjugate generators first."""
        c = np.asarray(plain, dtype=complex)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("plain covariance must be square")
        n = c.shape[0]
        g = np.zeros((2 * n, 2 * n), dtype=complex)
        g[0::2, 1::2] = c
        g[1::2, 0::2] = -c.T
        return cls(g)

    def pfaffian(self, indices) -> complex:
        """Pfaffian of the minor on strictly ascending generator indices."""
        idx = tuple(int(i) for i in indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("pfaffian needs strictly ascending indices")
        mask = 0
        for i in idx:
            if not 0 <= i < self.n_gen:
                raise ValueError(f"generator index {i} outside range({self.n_gen})")
            mask |= 1 << i
        if len(idx) % 2:
            return 0.0 + 0.0j
        return self._pf(mask)

    def _pf(self, mask: int) -> complex:
        cached = self._minors.get(mask)
        if cached is not None:
            return cached
        low = mask & -mask
        i0 = low.bit_length() - 1
        rest = mask ^ low
        acc = 0.0 + 0.0j
        sign = 1.0
        probe = rest
        while probe:
            bit = probe & -probe
            j = bit.bit_length() - 1
            probe ^= bit
            entry = self.matrix[i0, j]
            if entry != 0.0:
                acc += sign * entry * self._pf(rest ^ bit)
            sign = -sign
        self._minors[mask] = acc
        return acc


def gaussian_integral(poly: GrassmannPoly, cov: WickCovariance) -> complex:
    """Gaussian integral as the Pfaffian-weighted sum over monomials.

    Odd monomials integrate to zero; the empty monomial contributes its
    coefficient (the measure is normalized).
    """
    if poly.n_gen != cov.n_gen:
        raise ValueError("polynomial and covariance generator counts differ")
    total = 0.0 + 0.0j
    for mask, coeff in poly.terms.items():
        if mask.bit_count() % 2:
            continue
        total += coeff * cov._pf(mask)
    return complex(total)


# ---------------------------------------------------------------------------
# Spinful label set and its free covariance


@dataclasses.dataclass(frozen=True)
class SpinIndexSet:
    """Generator bookkeeping for the spinful cluster at time step 1/h.

    Plain labels are (band, site, spin, slice) with band 1-based, spin 0
    up and 1 down, and beta*h slices covering [0, beta). Each label owns
    a conjugate and a plain generator, interleaved conjugate-first. The
    signed count 4 * bands * sites * beta * h must fit the 28-generator
    budget, which pins these checks to one or two sites.
    """

    bands: int
    length: int
    dim: int
    beta: float
    h: float

    def __post_init__(self):
        if self.bands < 1 or self.length < 1 or self.dim < 1:
            raise ValueError("bands, length, and dim must be positive")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        steps = self.beta * self.h
        rounded = round(steps)
        if rounded < 2 or rounded % 2 or abs(steps - rounded) > 1e-9 * max(rounded, 1):
            raise ValueError("h must be a positive multiple of 2/beta")
        if self.signed_size > _MAX_GENERATORS:
            raise ValueError(
                f"generator budget exceeded: {self.signed_size} signed generators "
                f"> {_MAX_GENERATORS}"
            )

    @property
    def n_sites(self) -> int:
        return self.length**self.dim

    @property
    def n_slices(self) -> int:
        return round(self.beta * self.h)

    @property
    def plain_size(self) -> int:
        return 2 * self.bands * self.n_sites * self.n_slices

    @property
    def signed_size(self) -> int:
        return 2 * self.plain_size

    def _flat_site(self, site) -> int:
        if isinstance(site, (int, np.integer)):
            idx = int(site)
            if not 0 <= idx < self.n_sites:
                raise ValueError(f"site index {idx} outside range({self.n_sites})")
            return idx
        coords = [int(c) % self.length for c in site]
        if len(coords) != self.dim:
            raise ValueError(f"site tuple needs {self.dim} coordinates")
        idx = 0
        for c in coords:
            idx = idx * self.length + c
        return idx

    def plain_index(self, band: int, site, spin: int, t_idx: int) -> int:
        if not 1 <= band <= self.bands:
            raise ValueError(f"band {band} outside 1..{self.bands}")
        if spin not in (0, 1):
            raise ValueError("spin must be 0 (up) or 1 (down)")
        if not 0 <= t_idx < self.n_slices:
            raise ValueError(f"time slice {t_idx} outside range({self.n_slices})")
        mode = ((band - 1) * self.n_sites + self._flat_site(site)) * 2 + spin
        return mode * self.n_slices + t_idx

    def generator(self, band: int, site, spin: int, t_idx: int, sign: int) -> int:
        if sign not in (1, -1):
            raise ValueError("sign must be 1 (conjugate) or -1 (plain)")
        return 2 * self.plain_index(band, site, spin, t_idx) + (0 if sign == 1 else 1)


def spin_covariance(
    model: HoppingModel, params: PhysParams, index: SpinIndexSet
) -> Array:
    """Free two-point table of the unpaired cluster in the imaginary field.

    Entry (X, Y) is the time-ordered thermal pairing of the conjugate
    generator at X with the plain generator at Y for the hopping
    Hamiltonian plus i theta/2 per spin sign, evaluated on the discrete
    slices. Spin is conserved, so cross-spin entries vanish. The row
    band index enters through the conjugated eigenvector, which is what
    the trace formula gives once momentum conservation has been used.
    """
    if model.bands != index.bands or model.dim != index.dim:
        raise ValueError("model and index set disagree on bands or dimension")
    if abs(index.beta - params.beta) > 1e-12 * max(params.beta, 1.0):
        raise ValueError("index set beta differs from params.beta")
    beta = params.beta
    theta = params.theta_reduced
    grid = BZGrid(model.basis, index.length)
    ek = np.asarray(model.hopping(grid.nodes()), dtype=complex)
    if ek.ndim == 1:
        ek = ek[:, None, None]
    evals, evecs = np.linalg.eigh(ek)  # (N, b), (N, b, b)
    frac = grid.fractional()
    coords = frac * (index.length / (2.0 * math.pi))
    phases = np.exp(1j * coords @ frac.T)  # (site, k)
    b, S, T = index.bands, index.n_sites, index.n_slices
    table = np.zeros((b, S, 2, T, b, S, 2, T), dtype=complex)
    for spin, sgn in ((0, 1.0), (1, -1.0)):
        shifted = evals + sgn * 0.5j * theta
        for si in range(T):
            for ti in range(T):
                tau = (si - ti) / index.h
                w = _time_ordered_weights(shifted, tau, beta, forward=si >= ti)
                blocks = np.einsum("knj,kj,kmj->knm", evecs, w, evecs.conj())
                blk = np.einsum(
                    "xk,yk,knm->mxny", phases.conj(), phases, blocks
                ) / grid.node_count
                table[:, :, spin, si, :, :, spin, ti] = blk
    n = index.plain_size
    return table.reshape(n, n)


# ---------------------------------------------------------------------------
# Cluster polynomials


def _slice_pair(index: SpinIndexSet, band: int, site, t_idx: int) -> tuple[int, int]:
    """Conjugate-up, conjugate-down generator pair at one label."""
    return (
        index.generator(band, site, 0, t_idx, 1),
        index.generator(band, site, 1, t_idx, 1),
    )


def _slice_pair_plain(index: SpinIndexSet, band: int, site, t_idx: int):
    """Plain-down, plain-up generator pair at one label."""
    return (
        index.generator(band, site, 1, t_idx, -1),
        index.generator(band, site, 0, t_idx, -1),
    )


def _band_sites(index: SpinIndexSet):
    for band in range(1, index.bands + 1):
        for site in range(index.n_sites):
            yield band, site


def onsite_attraction(index: SpinIndexSet, U: float) -> GrassmannPoly:
    """Quartic pair-hopping interaction, weight U / (sites * h) per slice."""
    n = index.signed_size
    acc = GrassmannPoly.zero(n)
    coeff = U / (index.n_sites * index.h)
    for band_a, site_a in _band_sites(index):
        for band_b, site_b in _band_sites(index):
            for s in range(index.n_slices):
                cu, cd = _slice_pair(index, band_a, site_a, s)
                pd, pu = _slice_pair_plain(index, band_b, site_b, s)
                acc = acc + GrassmannPoly.monomial(n, (cu, cd, pd, pu), coeff)
    return acc


def pair_source(index: SpinIndexSet, gamma: float) -> GrassmannPoly:
    """Pair creation plus annihilation source, weight gamma / h."""
    n = index.signed_size
    acc = GrassmannPoly.zero(n)
    coeff = gamma / index.h
    for band, site in _band_sites(index):
        for s in range(index.n_slices):
            cu, cd = _slice_pair(index, band, site, s)
            pd, pu = _slice_pair_plain(index, band, site, s)
            acc = acc + GrassmannPoly.monomial(n, (cu, cd), coeff)
            acc = acc + GrassmannPoly.monomial(n, (pd, pu), coeff)
    return acc


def pair_insertion(index: SpinIndexSet, band: int = 1, site=0) -> GrassmannPoly:
    """Pair creation pinned to one label, weight 1 / h (first source term)."""
    n = index.signed_size
    acc = GrassmannPoly.zero(n)
    for s in range(index.n_slices):
        cu, cd = _slice_pair(index, band, site, s)
        acc = acc + GrassmannPoly.monomial(n, (cu, cd), 1.0 / index.h)
    return acc


def pair_transfer(index: SpinIndexSet, source=(1, 0), drain=(1, 0)) -> GrassmannPoly:
    """Pair created at `source` and absorbed at `drain`, weight 1 / h."""
    n = index.signed_size
    acc = GrassmannPoly.zero(n)
    band_a, site_a = source
    band_b, site_b = drain
    for s in range(index.n_slices):
        cu, cd = _slice_pair(index, band_a, site_a, s)
        pd, pu = _slice_pair_plain(index, band_b, site_b, s)
        acc = acc + GrassmannPoly.monomial(n, (cu, cd, pd, pu), 1.0 / index.h)
    return acc


def _hs_weight(index: SpinIndexSet, U: float) -> float:
    return math.sqrt(abs(U)) / (
        math.sqrt(index.beta) * math.sqrt(index.n_sites) * index.h
    )


def hs_pair_creation(index: SpinIndexSet, U: float) -> GrassmannPoly:
    """Linear-coupling creation half of the auxiliary-field decoupling."""
    n = index.signed_size
    acc = GrassmannPoly.zero(n)
    coeff = _hs_weight(index, U)
    for band, site in _band_sites(index):
        for s in range(index.n_slices):
            cu, cd = _slice_pair(index, band, site, s)
            acc = acc + GrassmannPoly.monomial(n, (cu, cd), coeff)
    return acc


def hs_pair_annihilation(index: SpinIndexSet, U: float) -> GrassmannPoly:
    """Linear-coupling annihilation half of the auxiliary-field decoupling."""
    n = index.signed_size
    acc = GrassmannPoly.zero(n)
    coeff = _hs_weight(index, U)
    for band, site in _band_sites(index):
        for s in range(index.n_slices):
            pd, pu = _slice_pair_plain(index, band, site, s)
            acc = acc + GrassmannPoly.monomial(n, (pd, pu), coeff)
    return acc


def hs_exchange(index: SpinIndexSet, U: float) -> GrassmannPoly:
    """Time-nonlocal quartic added by the decoupling, weight U/(beta sites h^2)."""
    n = index.signed_size
    acc = GrassmannPoly.zero(n)
    coeff = U / (index.beta * index.n_sites * index.h**2)
    for band_a, site_a in _band_sites(index):
        for band_b, site_b in _band_sites(index):
            for s in range(index.n_slices):
                cu, cd = _slice_pair(index, band_a, site_a, s)
                for t in range(index.n_slices):
                    pd, pu = _slice_pair_plain(index, band_b, site_b, t)
                    acc = acc + GrassmannPoly.monomial(n, (cu, cd, pd, pu), coeff)
    return acc


# ---------------------------------------------------------------------------
# Identity checks


@dataclasses.dataclass(frozen=True)
class ConvergenceReport:
    """Discrete-time Gaussian integrals against an operator-trace reference."""

    h_values: tuple[float, ...]
    values: tuple[complex, ...]
    reference: complex

    @property
    def gaps(self) -> tuple[float, ...]:
        return tuple(abs(v - self.reference) for v in self.values)

    @property
    def decreasing(self) -> bool:
        gaps = self.gaps
        return all(b < a for a, b in zip(gaps, gaps[1:]))

    @property
    def final_gap(self) -> float:
        return self.gaps[-1]


def _default_sites(model: HoppingModel, L: int):
    return ((1, 0), (1, L**model.dim - 1))


def _interaction_poly(
    index: SpinIndexSet, params: PhysParams, lambdas, sites
) -> GrassmannPoly:
    """U-quartic plus pair source plus the two weighted insertions."""
    (band_a, site_a), (band_b, site_b) = sites
    poly = onsite_attraction(index, params.U) + pair_source(index, params.gamma)
    l1, l2 = lambdas
    if l1 != 0.0:
        poly = poly + l1 * pair_insertion(index, band_a, site_a)
    if l2 != 0.0:
        poly = poly + l2 * pair_transfer(index, (band_a, site_a), (band_b, site_b))
    return poly


def _trace_reference(
    model: HoppingModel, params: PhysParams, L: int, lambdas, sites
) -> complex:
    free = build_operator("H0", model, params, L) + (
        1j * params.theta_reduced
    ) * build_operator("Sz", model, params, L)
    full = (
        free
        + build_operator("V", model, params, L)
        + build_operator("F", model, params, L)
    )
    l1, l2 = lambdas
    if l1 != 0.0:
        full = full + l1 * build_operator("A1", model, params, L, sites=sites)
    if l2 != 0.0:
        full = full + l2 * build_operator("A2", model, params, L, sites=sites)
    return trace_exp(full, params.beta) / trace_exp(free, params.beta)


def first_formulation_check(
    model: HoppingModel,
    params: PhysParams,
    L: int,
    h_values,
    lambdas=(0.0, 0.0),
    sites=None,
) -> ConvergenceReport:
    """Gaussian integral of the interacting weight against the trace ratio.

    The two sides agree in the fine-time limit; at fixed h the report
    carries the gap per time step so the caller can watch it shrink.
    """
    if sites is None:
        sites = _default_sites(model, L)
    reference = _trace_reference(model, params, L, lambdas, sites)
    values = []
    for h in h_values:
        index = SpinIndexSet(model.bands, L, model.dim, params.beta, float(h))
        wick = WickCovariance.from_plain(spin_covariance(model, params, index))
        weight = exp_even(-_interaction_poly(index, params, lambdas, sites))
        values.append(gaussian_integral(weight, wick))
    return ConvergenceReport(tuple(float(h) for h in h_values), tuple(values), reference)


def source_response_check(
    model: HoppingModel, params: PhysParams, L: int, h_values, sites=None
) -> ConvergenceReport:
    """Derivative in the pair-transfer weight at zero, both sides.

    Grassmann side: minus the integral of the transfer quartic against
    the interacting weight. Trace side: the first-order trace insertion.
    """
    if sites is None:
        sites = _default_sites(model, L)
    beta = params.beta
    free = build_operator("H0", model, params, L) + (
        1j * params.theta_reduced
    ) * build_operator("Sz", model, params, L)
    full = (
        free
        + build_operator("V", model, params, L)
        + build_operator("F", model, params, L)
    )
    insertion = build_operator("A2", model, params, L, sites=sites)
    reference = -beta * trace_exp_product(full, beta, insertion) / trace_exp(free, beta)
    values = []
    for h in h_values:
        index = SpinIndexSet(model.bands, L, model.dim, params.beta, float(h))
        wick = WickCovariance.from_plain(spin_covariance(model, params, index))
        weight = exp_even(-_interaction_poly(index, params, (0.0, 0.0), sites))
        transfer = pair_transfer(index, sites[0], sites[1])
        values.append(-gaussian_integral(transfer * weight, wick))
    return ConvergenceReport(tuple(float(h) for h in h_values), tuple(values), reference)


def hubbard_stratonovich_check(
    model: HoppingModel,
    params: PhysParams,
    L: int,
    h: float,
    quad_n: int = 24,
    lambdas=(0.0, 0.0),
    sites=None,
) -> float:
    """Residual of the auxiliary-field decoupling at fixed time step.

    Left side: the plain quartic weight. Right side: the Gaussian
    average over the complex auxiliary field of the decoupled weight,
    evaluated by tensor Gauss-Hermite quadrature. The inner Grassmann
    integral is a polynomial in the field and its conjugate (even
    factors commute, so the linear couplings exponentiate separately),
    which makes the quadrature exact once quad_n passes the degree.
    """
    if sites is None:
        sites = _default_sites(model, L)
    index = SpinIndexSet(model.bands, L, model.dim, params.beta, float(h))
    wick = WickCovariance.from_plain(spin_covariance(model, params, index))
    base = _interaction_poly(index, params, lambdas, sites)
    lhs = gaussian_integral(exp_even(-base), wick)

    shifted = exp_even(-base + hs_exchange(index, params.U))
    creation = hs_pair_creation(index, params.U)
    annihilation = hs_pair_annihilation(index, params.U)
    # moments[a][b] = integral of shifted * creation^a/a! * annihilation^b/b!
    moments: list[list[complex]] = []
    left = shifted
    a = 0
    while left.terms:
        row = []
        inner = left
        b = 0
        while inner.terms:
            row.append(gaussian_integral(inner, wick))
            b += 1
            inner = (inner * annihilation) * (1.0 / b)
        moments.append(row)
        a += 1
        left = (left * creation) * (1.0 / a)

    nodes, weights = np.polynomial.hermite.hermgauss(quad_n)
    phi = nodes[:, None] + 1j * nodes[None, :]
    w2 = weights[:, None] * weights[None, :]
    vals = np.zeros_like(phi, dtype=complex)
    for a, row in enumerate(moments):
        for b, moment in enumerate(row):
            if moment != 0.0:
                vals += moment * phi**a * np.conj(phi) ** b
    rhs = complex((w2 * vals).sum()) / math.pi
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# Time-average-deficit quartic


def time_deficit_quartic(L: int, n: int, gamma: float = 1.0) -> GrassmannPoly:
    """Density-density quartic whose time kernel is delta(t, u) - 1/n.

    Labels are (site, time) on L sites and n slices, plain index
    site * n + time, generators interleaved conjugate-first. The kernel
    sums to zero over either time argument, which is the whole point.
    """
    n_gen = 2 * L * n
    acc = GrassmannPoly.zero(n_gen)
    for x in range(L):
        for y in range(L):
            for t in range(n):
                for u in range(n):
                    w = (gamma / L) * ((1.0 if t == u else 0.0) - 1.0 / n)
                    px = x * n + t
                    py = y * n + u
                    acc = acc + GrassmannPoly.monomial(
                        n_gen, (2 * px, 2 * px + 1, 2 * py, 2 * py + 1), w
                    )
    return acc


def time_constant_covariance(L: int, n: int, base: Array) -> WickCovariance:
    """Spread an L x L site covariance uniformly over n time slices."""
    b = np.asarray(base, dtype=complex)
    if b.shape != (L, L):
        raise ValueError(f"base must be {L} x {L}")
    return WickCovariance.from_plain(np.kron(b, np.ones((n, n))))


def vanishing_property_check(
    n: int, L: int, cov: WickCovariance, f: GrassmannPoly | None = None, gamma: float = 1.0
) -> complex:
    """Integral of the time-deficit quartic times f under the given covariance.

    Whenever the covariance is constant in the time labels the result is
    zero for every f: each contraction sees only the label's site, so
    the time sum hits the kernel's zero average. Time-dependent
    covariances generically give a nonzero value.
    """
    quartic = time_deficit_quartic(L, n, gamma)
    if cov.n_gen != quartic.n_gen:
        raise ValueError("covariance size does not match 2 * L * n generators")
    poly = quartic if f is None else quartic * f
    return gaussian_integral(poly, cov)

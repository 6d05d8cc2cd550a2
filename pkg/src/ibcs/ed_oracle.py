"""Exact diagonalization on small fermionic clusters.

Dense Jordan-Wigner realizations of the cluster operators provide an
independent ground truth for the trace identities and for the free
two-point function of the paired quadratic Hamiltonian. Everything is
an ordinary ndarray on the 2^n-dimensional Fock space; the mode budget
is capped at 12 so no call can silently explode.

Two mode spaces appear. The "spin" space carries the physical model
(hopping, pairing interaction, spin operators) with modes ordered
lexicographically by (band, site, spin), spin up before down. The
"particle_hole" space carries the paired quadratic Hamiltonian whose
two-point function is the covariance of the Gaussian integral, with
modes ordered by (sector, band, site); the flattened (sector, band)
pair matches the 2b x 2b block convention (sector-1)*b + band used by
the covariance module.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np
import scipy.linalg
import scipy.sparse

from .gap_solver import PhysParams
from .lattice_models import HoppingModel
from .quadrature import BZGrid

Array = np.ndarray

_MAX_MODES = 12

SPIN_UP, SPIN_DOWN = 0, 1

_WHICH = ("H0", "V", "Sz", "F", "A1", "A2", "H0_phi")


@dataclasses.dataclass(frozen=True)
class ModeSpace:
    """Fermion mode bookkeeping for a cluster of length**dim unit cells.

    Band and sector labels are 1-based; sites are either flat indices in
    range(length**dim) or integer coordinate tuples, reduced mod length
    per axis (periodic boundary). Coordinate tuples flatten with the
    first axis slowest, matching the momentum grid enumeration.
    """

    kind: str
    bands: int
    length: int
    dim: int

    def __post_init__(self):
        if self.kind not in ("spin", "particle_hole"):
            raise ValueError("kind must be 'spin' or 'particle_hole'")
        if self.bands < 1 or self.length < 1 or self.dim < 1:
            raise ValueError("bands, length, and dim must be positive")
        if self.n_modes > _MAX_MODES:
            raise ValueError(
                f"mode budget exceeded: {self.n_modes} modes > {_MAX_MODES}"
            )

    @property
    def n_sites(self) -> int:
        return self.length**self.dim

    @property
    def n_modes(self) -> int:
        return 2 * self.bands * self.n_sites

    @property
    def fock_dim(self) -> int:
        return 2**self.n_modes

    def site_index(self, site) -> int:
        if isinstance(site, (int, np.integer)):
            idx = int(site)
            if not 0 <= idx < self.n_sites:
                raise ValueError(f"site index {idx} outside range({self.n_sites})")
            return idx
        coords = tuple(int(c) % self.length for c in site)
        if len(coords) != self.dim:
            raise ValueError(f"site tuple needs {self.dim} coordinates")
        idx = 0
        for c in coords:
            idx = idx * self.length + c
        return idx

    def _check_band(self, band: int) -> int:
        if not 1 <= band <= self.bands:
            raise ValueError(f"band {band} outside 1..{self.bands}")
        return band - 1

    def spin_mode(self, band: int, site, spin: int) -> int:
        if self.kind != "spin":
            raise ValueError("spin_mode is only defined on the spin space")
        if spin not in (SPIN_UP, SPIN_DOWN):
            raise ValueError("spin must be SPIN_UP (0) or SPIN_DOWN (1)")
        b0 = self._check_band(band)
        return (b0 * self.n_sites + self.site_index(site)) * 2 + spin

    def ph_mode(self, sector: int, band: int, site) -> int:
        if self.kind != "particle_hole":
            raise ValueError("ph_mode is only defined on the particle-hole space")
        if sector not in (1, 2):
            raise ValueError("sector must be 1 or 2")
        b0 = self._check_band(band)
        return ((sector - 1) * self.bands + b0) * self.n_sites + self.site_index(site)


@functools.lru_cache(maxsize=None)
def _annihilators(n_modes: int):
    """Jordan-Wigner annihilation matrices, sparse, entries in {0, 1, -1}."""
    lower = scipy.sparse.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
    string = scipy.sparse.csr_matrix(np.diag([1.0, -1.0]))
    eye = scipy.sparse.identity(2, format="csr")
    ops = []
    for j in range(n_modes):
        factors = [string] * j + [lower] + [eye] * (n_modes - 1 - j)
        acc = factors[0]
        for f in factors[1:]:
            acc = scipy.sparse.kron(acc, f, format="csr")
        ops.append(acc)
    return tuple(ops)


def car_defect(space: ModeSpace) -> float:
    """Largest deviation from the canonical anticommutation relations.

    Zero exactly: the Jordan-Wigner matrices are signed permutation
    blocks, so the anticommutators close without roundoff.
    """
    ops = _annihilators(space.n_modes)
    eye = scipy.sparse.identity(space.fock_dim, format="csr")
    worst = 0.0
    for i, a in enumerate(ops):
        for j, b in enumerate(ops):
            pp = a @ b + b @ a
            worst = max(worst, abs(pp).max() if pp.nnz else 0.0)
            pm = a @ b.T + b.T @ a - (eye if i == j else 0.0)
            worst = max(worst, abs(pm).max() if pm.nnz else 0.0)
    return worst


@dataclasses.dataclass(frozen=True)
class FockOperator:
    """Dense operator on the cluster Fock space, tagged with its mode space."""

    space: ModeSpace
    matrix: Array
    label: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (self.space.fock_dim, self.space.fock_dim):
            raise ValueError("matrix shape does not match the Fock dimension")
        object.__setattr__(self, "matrix", m)

    def _same_space(self, other: "FockOperator") -> None:
        if self.space != other.space:
            raise ValueError("operators live on different mode spaces")

    def __add__(self, other: "FockOperator") -> "FockOperator":
        self._same_space(other)
        return FockOperator(self.space, self.matrix + other.matrix)

    def __sub__(self, other: "FockOperator") -> "FockOperator":
        self._same_space(other)
        return FockOperator(self.space, self.matrix - other.matrix)

    def __mul__(self, weight) -> "FockOperator":
        return FockOperator(self.space, complex(weight) * self.matrix)

    __rmul__ = __mul__

    def dagger(self) -> "FockOperator":
        return FockOperator(self.space, self.matrix.conj().T)


def _one_body(space: ModeSpace, h: Array, label: str) -> FockOperator:
    """Quadratic operator sum_ij h[i,j] a_i^dagger a_j."""
    n = space.n_modes
    h = np.asarray(h, dtype=complex)
    if h.shape != (n, n):
        raise ValueError("one-body matrix shape mismatch")
    ops = _annihilators(n)
    acc = scipy.sparse.csr_matrix((space.fock_dim, space.fock_dim), dtype=complex)
    for i in range(n):
        for j in range(n):
            if h[i, j] != 0.0:
                acc = acc + h[i, j] * (ops[i].T @ ops[j])
    return FockOperator(space, acc.toarray(), label)


def _momentum_blocks(model: HoppingModel, L: int, block: Array) -> Array:
    """Real-space one-body matrix (m*S+x, n*S+y) from momentum blocks.

    `block` has shape (L^d, w, w); the output is the inverse transform
    (1/L^d) sum_k exp(i<k, x-y>) block(k), flattened with the block row
    index major and the site index minor.
    """
    grid = BZGrid(model.basis, L)
    frac = grid.fractional()  # (N, d), rows (2 pi / L) * integer vectors
    coords = frac * (L / (2.0 * math.pi))  # integer site coordinates
    phase = np.exp(1j * coords @ frac.T)  # (x, k) -> e^{i <k, x>}
    n_sites = grid.node_count
    w = block.shape[1]
    out = np.einsum("xk,yk,kab->axby", phase, phase.conj(), block) / n_sites
    return out.reshape(w * n_sites, w * n_sites)


def _pair_annihilation(space: ModeSpace) -> scipy.sparse.csr_matrix:
    """Total on-site pair annihilation sum over bands and sites of a_dn a_up."""
    ops = _annihilators(space.n_modes)
    acc = scipy.sparse.csr_matrix((space.fock_dim, space.fock_dim))
    for band in range(1, space.bands + 1):
        for site in range(space.n_sites):
            up = ops[space.spin_mode(band, site, SPIN_UP)]
            dn = ops[space.spin_mode(band, site, SPIN_DOWN)]
            acc = acc + dn @ up
    return acc


def pair_field(space: ModeSpace) -> FockOperator:
    """psi*_up psi*_dn + psi_dn psi_up summed over bands and sites (unit weight)."""
    pair = _pair_annihilation(space)
    return FockOperator(space, (pair.T + pair).toarray(), "pair_field")


def build_operator(
    which: str,
    model: HoppingModel,
    params: PhysParams,
    L: int,
    phi: complex = 0.0,
    sites=None,
) -> FockOperator:
    """Cluster operator by name.

    H0, V, Sz, F, A1, A2 act on the spin space; H0_phi acts on the
    particle-hole space with the reduced field and pairing source phi.
    A1 and A2 take `sites` as a pair ((band, site), (band, site)); the
    default pins them to band 1 at the first and last sites.
    """
    if which not in _WHICH:
        raise ValueError(f"unknown operator {which!r}; choose from {_WHICH}")
    n_sites = L**model.dim

    if which == "H0_phi":
        space = ModeSpace("particle_hole", model.bands, L, model.dim)
        grid = BZGrid(model.basis, L)
        ek = np.asarray(model.hopping(grid.nodes()), dtype=complex)
        if ek.ndim == 2:
            ek = ek[:, None, None]
        b = model.bands
        blocks = np.zeros((grid.node_count, 2 * b, 2 * b), dtype=complex)
        blocks[:, :b, :b] = ek
        blocks[:, b:, b:] = -ek
        blocks[:, :b, b:] = complex(phi) * np.eye(b)
        blocks[:, b:, :b] = np.conj(complex(phi)) * np.eye(b)
        blocks += 0.5j * params.theta_reduced * np.eye(2 * b)
        return _one_body(space, _momentum_blocks(model, L, blocks), which)

    space = ModeSpace("spin", model.bands, L, model.dim)

    if which == "H0":
        grid = BZGrid(model.basis, L)
        ek = np.asarray(model.hopping(grid.nodes()), dtype=complex)
        if ek.ndim == 2:
            ek = ek[:, None, None]
        h_orb = _momentum_blocks(model, L, ek)
        return _one_body(space, np.kron(h_orb, np.eye(2)), which)

    if which == "Sz":
        diag = np.zeros(space.n_modes)
        for band in range(1, space.bands + 1):
            for site in range(n_sites):
                diag[space.spin_mode(band, site, SPIN_UP)] = 0.5
                diag[space.spin_mode(band, site, SPIN_DOWN)] = -0.5
        return _one_body(space, np.diag(diag), which)

    if which == "V":
        pair = _pair_annihilation(space)
        mat = (params.U / n_sites) * (pair.T @ pair)
        return FockOperator(space, mat.toarray(), which)

    if which == "F":
        pair = _pair_annihilation(space)
        return FockOperator(space, params.gamma * (pair.T + pair).toarray(), which)

    # A1 / A2 at fixed sites
    if sites is None:
        sites = ((1, 0), (1, n_sites - 1))
    (band_a, site_a), (band_b, site_b) = sites
    ops = _annihilators(space.n_modes)
    up_a = ops[space.spin_mode(band_a, site_a, SPIN_UP)]
    dn_a = ops[space.spin_mode(band_a, site_a, SPIN_DOWN)]
    a1 = up_a.T @ dn_a.T
    if which == "A1":
        return FockOperator(space, a1.toarray(), which)
    up_b = ops[space.spin_mode(band_b, site_b, SPIN_UP)]
    dn_b = ops[space.spin_mode(band_b, site_b, SPIN_DOWN)]
    return FockOperator(space, (a1 @ dn_b @ up_b).toarray(), which)


def trace_exp(op: FockOperator, beta: float) -> complex:
    """Tr exp(-beta * M) summed over the full spectrum.

    M is generally non-Hermitian (imaginary field); eigenvalues with
    multiplicity are all that is needed, so QR iteration with a Schur
    fallback suffices.
    """
    try:
        lam = np.linalg.eigvals(op.matrix)
    except np.linalg.LinAlgError:
        t, _ = scipy.linalg.schur(op.matrix, output="complex")
        lam = np.diagonal(t)
    return complex(np.exp(-beta * lam).sum())


def trace_exp_product(op: FockOperator, beta: float, insertion: FockOperator) -> complex:
    """Tr(exp(-beta * M) O) via the dense matrix exponential."""
    op._same_space(insertion)
    weight = scipy.linalg.expm(-beta * op.matrix)
    return complex(np.trace(weight @ insertion.matrix))


class FreeTwoPoint:
    """Two-point function of the paired quadratic cluster Hamiltonian.

    Evaluated straight from the operator definition: imaginary-time
    Heisenberg creation at X against annihilation at Y, time-ordered
    with a sign, weighted by exp(-beta H)/Z. Index tuples are
    (sector, band, site, time) with 1-based sector and band.
    """

    def __init__(self, model: HoppingModel, params: PhysParams, phi: complex, L: int):
        self.space = ModeSpace("particle_hole", model.bands, L, model.dim)
        self.params = params
        self._h = build_operator("H0_phi", model, params, L, phi=phi).matrix
        self._weight = scipy.linalg.expm(-params.beta * self._h)
        self._z = complex(np.trace(self._weight))
        if abs(self._z) < 1e-300:
            raise ArithmeticError("free partition trace vanishes; field is singular")
        self._ann = [a.toarray() for a in _annihilators(self.space.n_modes)]
        self._prop: dict[float, tuple[Array, Array]] = {}

    def _propagators(self, s: float) -> tuple[Array, Array]:
        if s not in self._prop:
            self._prop[s] = (
                scipy.linalg.expm(s * self._h),
                scipy.linalg.expm(-s * self._h),
            )
        return self._prop[s]

    def value(self, X, Y) -> complex:
        (rho_bar, rho, x, s), (eta_bar, eta, y, t) = X, Y
        beta = self.params.beta
        if not (0.0 <= s < beta and 0.0 <= t < beta):
            raise ValueError("times must lie in [0, beta)")
        i = self.space.ph_mode(rho_bar, rho, x)
        j = self.space.ph_mode(eta_bar, eta, y)
        fwd_s, bwd_s = self._propagators(s)
        fwd_t, bwd_t = self._propagators(t)
        creator = fwd_s @ self._ann[i].T @ bwd_s
        annihil = fwd_t @ self._ann[j] @ bwd_t
        if s >= t:
            val = np.trace(self._weight @ creator @ annihil)
        else:
            val = -np.trace(self._weight @ annihil @ creator)
        return complex(val) / self._z


def two_point_free(
    model: HoppingModel, params: PhysParams, phi: complex, L: int, X, Y
) -> complex:
    return FreeTwoPoint(model, params, phi, L).value(X, Y)


def _grid_band_energies(model: HoppingModel, L: int) -> Array:
    grid = BZGrid(model.basis, L)
    ek = np.asarray(model.hopping(grid.nodes()), dtype=complex)
    if ek.ndim == 2:
        ek = ek[:, None, None]
    return np.linalg.eigvalsh(ek)  # (L^d, b)


def free_partition_product(model: HoppingModel, params: PhysParams, L: int) -> float:
    """Momentum product for the pairing-free partition trace.

    Equals Tr exp(-beta (H0 + i theta Sz)); the reduced field enters the
    cosine, which is why the raw field may be fed in unchanged. Of the
    two algebraically equal determinant forms, the cosh form is the one
    evaluated here (each factor is positive for admissible fields).
    """
    energies = _grid_band_energies(model, L)
    c = math.cos(params.beta * params.theta_reduced / 2.0)
    scale = math.exp(-params.beta * float(energies.sum()))
    factors = c + np.cosh(params.beta * energies)
    return scale * 2.0 ** energies.size * float(np.prod(factors))


def field_partition_product(
    model: HoppingModel, params: PhysParams, phi: complex, L: int
) -> complex:
    """Momentum product for Tr exp(-beta H0_phi) on the particle-hole space."""
    energies = _grid_band_energies(model, L)
    beta = params.beta
    theta = params.theta_reduced
    mixed = np.sqrt(energies**2 + abs(complex(phi)) ** 2)
    factors = math.cos(beta * theta / 2.0) + np.cosh(beta * mixed)
    phase = np.exp(-0.5j * beta * theta * energies.size)
    return complex(phase * 2.0 ** energies.size * np.prod(factors))

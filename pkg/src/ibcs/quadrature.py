"""Momentum-space quadrature: continuum cell averages and finite-lattice sums.

The normalized continuum integral (integral_norm times the integral over the
momentum cell) of any integrand equals the plain average over a uniform grid
in fractional coordinates, so the periodic trapezoid rule is the default;
it is spectrally accurate for smooth periodic integrands. Integrands that
blow up on the zero set of an envelope (1/e and friends) get midpoint grids
plus one level of local subdivision near the zeros.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, NamedTuple

import numpy as np

from .lattice_models import HoppingModel, ReciprocalBasis

Array = np.ndarray

_SUBNODE_BUDGET = 4_000_000


@dataclasses.dataclass(frozen=True)
class BZGrid:
    """Uniform grid k = sum_j ((m_j + offset) 2pi/n) vhat_j, m_j in 0..n-1.

    offset=0 with n_per_axis=L reproduces the finite momentum lattice of an
    L-periodic system exactly.
    """

    basis: ReciprocalBasis
    n_per_axis: int
    offset: float = 0.0

    def __post_init__(self):
        if self.n_per_axis < 1:
            raise ValueError("n_per_axis must be positive")
        if not 0.0 <= self.offset < 1.0:
            raise ValueError("offset must lie in [0, 1)")

    @property
    def node_count(self) -> int:
        return self.n_per_axis**self.basis.dim

    def fractional(self) -> Array:
        d = self.basis.dim
        step = 2.0 * np.pi / self.n_per_axis
        axis = (np.arange(self.n_per_axis) + self.offset) * step
        mesh = np.meshgrid(*([axis] * d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def nodes(self) -> Array:
        return self.fractional() @ self.basis.dual


class QuadratureResult(NamedTuple):
    value: complex
    error: float | None


def _evaluate(f: Callable, nodes: Array) -> Array:
    values = np.asarray(f(nodes))
    if values.shape[:1] != (nodes.shape[0],):
        # fall back to one node at a time for non-vectorized integrands
        values = np.asarray([f(nodes[i]) for i in range(nodes.shape[0])])
    bad = ~np.isfinite(values)
    if bad.any():
        index = int(np.argwhere(bad.reshape(values.shape[0], -1).any(axis=1))[0, 0])
        raise ValueError(
            f"integrand not finite at node {nodes[index]} (index {index})"
        )
    return values


def _grid_mean(f: Callable, grid: BZGrid, singular_envelope=None):
    if singular_envelope is None:
        return _evaluate(f, grid.nodes()).mean(axis=0)

    # Midpoint grid so that no node sits on the zero set, then subdivide the
    # cells whose envelope is small compared to the cell diameter.
    work = grid if grid.offset != 0.0 else BZGrid(grid.basis, grid.n_per_axis, 0.5)
    d = work.basis.dim
    nodes = work.nodes()
    env = np.asarray(singular_envelope(nodes), dtype=float)
    step = 2.0 * np.pi / work.n_per_axis
    diam = step * np.linalg.norm(work.basis.dual, axis=1).sum()
    factor = 4
    flagged = np.where(env < 2.0 * diam)[0]
    max_cells = max(1, _SUBNODE_BUDGET // factor**d)
    if flagged.size > max_cells:
        keep = np.argsort(env[flagged], kind="stable")[:max_cells]
        flagged = flagged[np.sort(keep)]

    values = _evaluate(f, nodes)
    total = values.sum(axis=0)
    if flagged.size:
        sub_axis = ((np.arange(factor) + 0.5) / factor - 0.5) * step
        mesh = np.meshgrid(*([sub_axis] * d), indexing="ij")
        offsets = np.stack([m.ravel() for m in mesh], axis=-1) @ work.basis.dual
        sub_nodes = (nodes[flagged][:, None, :] + offsets[None, :, :]).reshape(-1, d)
        sub_values = _evaluate(f, sub_nodes)
        sub_values = sub_values.reshape((flagged.size, factor**d) + values.shape[1:])
        total = total - values[flagged].sum(axis=0) + sub_values.mean(axis=1).sum(axis=0)
    return total / work.node_count


def integrate_bz(
    f: Callable,
    grid: BZGrid,
    richardson: bool = False,
    singular_envelope: Callable | None = None,
) -> QuadratureResult:
    """Normalized continuum average of f over the momentum cell.

    f maps a batch of momenta (N, d) to values (N, ...); scalar-only
    integrands are detected and looped over. With `richardson`, the grid is
    doubled and |value(n) - value(2n)| is reported as the error estimate
    (the returned value is the one from the doubled grid). With
    `singular_envelope`, cells near the envelope's zero set are subdivided
    once, 4x per axis.
    """
    coarse = _grid_mean(f, grid, singular_envelope)
    if not richardson:
        return QuadratureResult(coarse, None)
    fine_grid = BZGrid(grid.basis, 2 * grid.n_per_axis, grid.offset)
    fine = _grid_mean(f, fine_grid, singular_envelope)
    return QuadratureResult(fine, float(np.abs(np.asarray(fine - coarse)).max()))


def sum_lattice(f: Callable, L: int, basis: ReciprocalBasis) -> complex:
    """Average of f over the finite momentum lattice (normalization 1/L^d)."""
    return _grid_mean(f, BZGrid(basis, L, 0.0))


@dataclasses.dataclass(frozen=True)
class GapCheck:
    integral: complex
    lattice_sum: complex
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + 1e-9) + 1e-12


def discrete_continuum_gap(
    f: Callable,
    L: int,
    basis: ReciprocalBasis,
    n_integral: int | None = None,
    gradient: Callable | None = None,
    n_gradient_samples: int = 2048,
    seed: int = 0,
) -> GapCheck:
    """Check |continuum average - lattice average| <= (2 pi d^2 / L) sup|vhat| sup|df/dk_j|.

    The gradient sup is taken over Cartesian partial derivatives, estimated
    on random momenta by 4th-order central differences unless an analytic
    `gradient` (returning shape (N, d)) is supplied.
    """
    d = basis.dim
    if n_integral is None:
        n_integral = max(64, 4 * L) if d <= 2 else max(32, 2 * L)
    integral = integrate_bz(f, BZGrid(basis, n_integral)).value
    lattice = sum_lattice(f, L, basis)
    lhs = float(np.abs(integral - lattice))

    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 2.0 * np.pi, size=(n_gradient_samples, d)) @ basis.dual
    if gradient is not None:
        grads = np.abs(np.asarray(gradient(pts)))
    else:
        h = 1e-3
        grads = np.empty((pts.shape[0], d))
        coeffs = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
        shifts = np.array([-2.0, -1.0, 1.0, 2.0])
        for j in range(d):
            stencil = pts[:, None, :].copy()
            stencil = np.repeat(stencil, 4, axis=1)
            stencil[:, :, j] += shifts * h
            vals = _evaluate(f, stencil.reshape(-1, d)).reshape(pts.shape[0], 4)
            grads[:, j] = np.abs(vals @ coeffs / h)
    sup_grad = float(grads.max())
    sup_dual = float(np.linalg.norm(basis.dual, axis=1).max())
    rhs = (1.0 / L) * 2.0 * np.pi * d**2 * sup_dual * sup_grad
    return GapCheck(integral, lattice, lhs, rhs)


# --- cached spectra -----------------------------------------------------------

_spectrum_cache: dict = {}
_SPECTRUM_CACHE_MAX = 64


def eigenvalues_on_grid(model: HoppingModel, grid: BZGrid) -> Array:
    """Eigenvalues of the hopping matrix on every grid node, shape (N, b).

    Results are memoized per (model identity, grid shape); the eigenvalues
    do not depend on inverse temperature, field, or gap, so every solver
    sharing a grid reuses one decomposition.
    """
    key = (id(model), grid.n_per_axis, round(grid.offset, 12))
    hit = _spectrum_cache.get(key)
    if hit is not None and hit[0] is model:
        return hit[1]
    mats = model.hopping(grid.nodes())
    if model.bands == 1:
        eigs = mats[..., 0, 0].real.reshape(-1, 1)
    else:
        eigs = np.linalg.eigvalsh(mats)
    if len(_spectrum_cache) >= _SPECTRUM_CACHE_MAX:
        _spectrum_cache.pop(next(iter(_spectrum_cache)))
    _spectrum_cache[key] = (model, eigs)
    return eigs


_eigensystem_cache: dict = {}


def eigensystem_on_grid(model: HoppingModel, grid: BZGrid) -> tuple[Array, Array]:
    """Eigenvalues (N, b) and eigenvector columns (N, b, b) on every node."""
    key = (id(model), grid.n_per_axis, round(grid.offset, 12))
    hit = _eigensystem_cache.get(key)
    if hit is not None and hit[0] is model:
        return hit[1], hit[2]
    mats = model.hopping(grid.nodes())
    if model.bands == 1:
        eigs = mats[..., 0, 0].real.reshape(-1, 1)
        vecs = np.ones((eigs.shape[0], 1, 1), dtype=complex)
    else:
        eigs, vecs = np.linalg.eigh(mats)
    if len(_eigensystem_cache) >= _SPECTRUM_CACHE_MAX:
        _eigensystem_cache.pop(next(iter(_eigensystem_cache)))
    _eigensystem_cache[key] = (model, eigs, vecs)
    return eigs, vecs

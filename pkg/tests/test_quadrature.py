"""Quadrature checks: cell averages, lattice sums, and the discrete-continuum gap."""

import numpy as np
import pytest

from ibcs.lattice_models import ReciprocalBasis, builtin_model
from ibcs.quadrature import (
    BZGrid,
    discrete_continuum_gap,
    eigenvalues_on_grid,
    integrate_bz,
    sum_lattice,
)


def trace_kernel(model, beta, theta, z):
    """Tr of the gap-equation kernel at momentum k, vectorized over nodes."""

    def f(k):
        mats = model.hopping(k)
        eigs = np.linalg.eigvalsh(mats) if model.bands > 1 else mats[..., 0, 0].real[:, None]
        s = np.sqrt(eigs**2 + z**2)
        t = beta * s
        # sinh(t)/(c + cosh(t)) without overflow, c = cos(beta*theta/2)
        c = np.cos(beta * theta / 2.0)
        em = np.exp(-t)
        ratio = (1.0 - em**2) / (1.0 + em**2 + 2.0 * c * em)
        return (ratio / s).sum(axis=-1)

    return f


def test_grid_shape_and_gamma_star():
    model = builtin_model("honeycomb")
    grid = BZGrid(model.basis, 6)
    assert grid.node_count == 36
    nodes = grid.nodes()
    assert nodes.shape == (36, 2)
    # offset-0 nodes are exactly the integer combinations (2 pi m / L) vhat
    m = np.stack(np.meshgrid(np.arange(6), np.arange(6), indexing="ij"), -1).reshape(-1, 2)
    expected = (2.0 * np.pi * m / 6.0) @ model.basis.dual
    assert np.allclose(sorted(map(tuple, nodes)), sorted(map(tuple, expected)), atol=1e-12)


def test_grid_rejects_bad_offset():
    basis = ReciprocalBasis.cartesian(2)
    with pytest.raises(ValueError):
        BZGrid(basis, 4, offset=1.0)
    with pytest.raises(ValueError):
        BZGrid(basis, 0)


def test_constant_integrates_to_one():
    for name in ("cubic3", "honeycomb", "square6band"):
        model = builtin_model(name)
        res = integrate_bz(lambda k: np.ones(k.shape[0]), BZGrid(model.basis, 8))
        assert res.value == pytest.approx(1.0, abs=1e-15)
        assert res.error is None


def test_cubic3_trace_mean():
    model = builtin_model("cubic3")

    def trace_e(k):
        return model.hopping(k)[..., 0, 0].real

    res = integrate_bz(trace_e, BZGrid(model.basis, 8), richardson=True)
    assert res.value == pytest.approx(-6.0, abs=1e-12)
    assert res.error < 1e-12


def test_offset_invariance_smooth():
    model = builtin_model("honeycomb")

    def f(k):
        return np.exp(np.cos(k @ np.array([1.0, 0.0])) + 0.5 * np.sin(k @ np.array([0.5, np.sqrt(3) / 2])))

    a = integrate_bz(f, BZGrid(model.basis, 48, offset=0.0)).value
    b = integrate_bz(f, BZGrid(model.basis, 48, offset=0.37)).value
    assert abs(a - b) < 1e-12


def test_nonfinite_names_node():
    basis = ReciprocalBasis.cartesian(2)
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(ValueError, match="not finite at node"):
            integrate_bz(lambda k: 1.0 / k[:, 0], BZGrid(basis, 4))


def test_honeycomb_inverse_envelope_stable():
    # 1/e is integrable at the two conical zeros; midpoint + local refinement
    # keeps the value stable under grid doubling.
    model = builtin_model("honeycomb")

    def f(k):
        return 1.0 / model.envelope(k)

    coarse = integrate_bz(f, BZGrid(model.basis, 128), singular_envelope=model.envelope).value
    fine = integrate_bz(f, BZGrid(model.basis, 256), singular_envelope=model.envelope).value
    assert abs(fine - coarse) / abs(fine) < 0.01


def test_sum_lattice_constant_and_phase():
    model = builtin_model("honeycomb")
    assert sum_lattice(lambda k: np.full(k.shape[0], 2.5), 6, model.basis) == pytest.approx(2.5)
    # e^{i<x,k>} averages to zero over the momentum lattice for x in the
    # direct lattice, x not a multiple of L
    x = 2 * model.basis.vectors[0] + 1 * model.basis.vectors[1]
    val = sum_lattice(lambda k: np.exp(1j * k @ x), 6, model.basis)
    assert abs(val) < 1e-13


def test_lattice_sum_approaches_integral():
    cases = {
        "cubic3": (4, 8, 16),
        "cubic4": (4, 8, 16),
        "honeycomb": (4, 8, 16),
        "square6band": (4, 8, 16),
        "aniso3d": (4, 8, 16),
        "flat5d": (4, 8),
    }
    ref_n = {2: 64, 3: 48, 4: 24, 5: 14}
    for name, ladder in cases.items():
        model = builtin_model(name)
        f = trace_kernel(model, beta=2.0, theta=1.0, z=0.3)
        ref = integrate_bz(f, BZGrid(model.basis, ref_n[model.basis.dim])).value
        gaps = [abs(sum_lattice(f, L, model.basis) - ref) for L in ladder]
        for a, b in zip(gaps, gaps[1:]):
            assert b < a or b < 1e-13, (name, gaps)


def test_gap_check_cosine_chain():
    basis = ReciprocalBasis.cartesian(1)
    check = discrete_continuum_gap(lambda k: np.cos(k[:, 0]), 10, basis)
    assert check.lhs < 1e-14
    assert check.holds


def test_gap_check_constant():
    basis = ReciprocalBasis.cartesian(2)
    check = discrete_continuum_gap(lambda k: np.full(k.shape[0], 3.0), 7, basis)
    assert check.lhs < 1e-14
    assert check.rhs < 1e-9
    assert check.holds


def test_gap_check_honeycomb_resolvent():
    model = builtin_model("honeycomb")

    def f(k):
        return 1.0 / (model.envelope(k) ** 2 + 1.0)

    check = discrete_continuum_gap(f, 24, model.basis, n_integral=192)
    assert check.holds
    assert check.lhs > 0.0


def test_eigenvalue_cache_reuse():
    model = builtin_model("square6band")
    grid = BZGrid(model.basis, 12)
    a = eigenvalues_on_grid(model, grid)
    b = eigenvalues_on_grid(model, grid)
    assert a is b
    assert a.shape == (144, 6)
    direct = np.sort(np.linalg.eigvalsh(model.hopping(grid.nodes())), axis=-1)
    assert np.allclose(a, direct, atol=1e-12)

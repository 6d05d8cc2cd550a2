"""Grassmann algebra, Pfaffian integration, and the desk-scale identity checks."""

import numpy as np
import pytest
import scipy.linalg

from ibcs import covariance_engine as ce
from ibcs import grassmann_desk as gd
from ibcs.ed_oracle import ModeSpace, build_operator
from ibcs.gap_solver import PhysParams
from ibcs.lattice_models import chain_model, model_from_config

CHAIN = chain_model()
PARAMS = PhysParams(beta=1.0, theta=1.0, U=-0.3, gamma=0.2)


def random_poly(n_gen, n_terms, rng, parity=None):
    acc = gd.GrassmannPoly.zero(n_gen)
    for _ in range(n_terms):
        size = int(rng.integers(0, n_gen + 1))
        if parity == "even":
            size -= size % 2
        elif parity == "odd" and size % 2 == 0:
            size = max(size - 1, 1)
        idx = sorted(rng.choice(n_gen, size=size, replace=False))
        acc = acc + gd.GrassmannPoly.monomial(
            n_gen, idx, complex(rng.normal(), rng.normal())
        )
    return acc


def test_generator_algebra():
    rng = np.random.default_rng(0)
    for _ in range(10):
        i, j = rng.choice(8, size=2, replace=False)
        a = gd.GrassmannPoly.monomial(8, (int(i),))
        b = gd.GrassmannPoly.monomial(8, (int(j),))
        assert (a * b + b * a).max_abs() == 0.0
    for _ in range(5):
        f, g, h = (random_poly(8, 6, rng) for _ in range(3))
        assert ((f * g) * h - f * (g * h)).max_abs() < 1e-12
    for _ in range(5):
        even = random_poly(8, 5, rng, parity="even")
        other = random_poly(8, 5, rng)
        assert (even * other - other * even).max_abs() == 0.0
    # odd elements anticommute up to their even parts; probe pure odd ones
    for _ in range(5):
        f = random_poly(8, 4, rng, parity="odd")
        g = random_poly(8, 4, rng, parity="odd")
        assert (f * g + g * f).max_abs() < 1e-12


def test_monomial_ordering_and_lookup():
    # (2, 0, 1) is an even permutation of (0, 1, 2)
    p = gd.GrassmannPoly.monomial(4, (2, 0, 1), 1.0)
    assert p.coeff((0, 1, 2)) == 1.0 + 0.0j
    q = gd.GrassmannPoly.monomial(4, (1, 0), 2.0)
    assert q.coeff((0, 1)) == -2.0 + 0.0j
    assert gd.GrassmannPoly.monomial(4, (1, 1)).terms == {}
    assert gd.GrassmannPoly.monomial(4, ()).constant == 1.0
    with pytest.raises(ValueError):
        gd.GrassmannPoly.monomial(4, (4,))
    with pytest.raises(ValueError):
        p.coeff((1, 0))
    with pytest.raises(ValueError):
        gd.GrassmannPoly(29)


def test_exp_even():
    one = gd.GrassmannPoly.one(6)
    assert gd.exp_even(gd.GrassmannPoly.zero(6)).terms == one.terms
    # a single density term squares to zero
    dens = gd.GrassmannPoly.monomial(6, (0, 1), 0.7 - 0.2j)
    expd = gd.exp_even(dens)
    assert (expd - one - dens).max_abs() == 0.0
    rng = np.random.default_rng(1)
    body = random_poly(8, 5, rng, parity="even")
    body = body - body.constant * gd.GrassmannPoly.one(8) + gd.GrassmannPoly.one(8) * 0.0
    prod = gd.exp_even(body) * gd.exp_even(-body)
    assert (prod - gd.GrassmannPoly.one(8)).max_abs() < 1e-10
    # constant part exponentiates scalarly
    shifted = body + 0.3j * gd.GrassmannPoly.one(8)
    diff = gd.exp_even(shifted) - np.exp(0.3j) * gd.exp_even(body)
    assert diff.max_abs() < 1e-12
    with pytest.raises(ValueError):
        gd.exp_even(gd.GrassmannPoly.monomial(6, (2,)))


def test_pfaffian_square_is_determinant():
    rng = np.random.default_rng(2)
    for m in range(1, 7):
        raw = rng.normal(size=(2 * m, 2 * m)) + 1j * rng.normal(size=(2 * m, 2 * m))
        anti = raw - raw.T
        w = gd.WickCovariance(anti)
        pf = w.pfaffian(range(2 * m))
        det = np.linalg.det(anti)
        assert abs(pf**2 - det) <= 1e-8 * abs(det)
    assert gd.WickCovariance(np.zeros((3, 3))).pfaffian((0, 1, 2)) == 0.0


def test_wick_examples():
    rng = np.random.default_rng(3)
    c = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    w = gd.WickCovariance.from_plain(c)
    assert np.array_equal(w.matrix, -w.matrix.T)
    assert np.array_equal(w.matrix, 2.0 * ce.antisymmetric_extension(c))
    assert gd.gaussian_integral(gd.GrassmannPoly.one(6), w) == 1.0
    for x in range(3):
        for y in range(3):
            pair = gd.GrassmannPoly.monomial(6, (2 * x, 2 * y + 1))
            assert abs(gd.gaussian_integral(pair, w) - c[x, y]) < 1e-14
    quart = gd.GrassmannPoly.monomial(6, (0, 1, 2, 3))
    want = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
    assert abs(gd.gaussian_integral(quart, w) - want) < 1e-13
    assert gd.gaussian_integral(gd.GrassmannPoly.monomial(6, (0,)), w) == 0.0
    with pytest.raises(ValueError):
        gd.WickCovariance(np.eye(4))
    with pytest.raises(ValueError):
        gd.gaussian_integral(gd.GrassmannPoly.one(4), w)


def test_quadratic_shift_determinant():
    # int exp(sum A[X,Y] conj_X plain_Y) dmu_C = det(I + A C^T); the
    # transpose is forced by writing both covariance arguments in the
    # same order as the quadratic form, since the degree-two moment is
    # sum A[X,Y] C[X,Y] = tr(A C^T).
    rng = np.random.default_rng(4)
    for m in (2, 3, 4):
        a = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
        c = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
        quad = gd.GrassmannPoly.zero(2 * m)
        for x in range(m):
            for y in range(m):
                quad = quad + gd.GrassmannPoly.monomial(
                    2 * m, (2 * x, 2 * y + 1), a[x, y]
                )
        val = gd.gaussian_integral(gd.exp_even(quad), gd.WickCovariance.from_plain(c))
        want = np.linalg.det(np.eye(m) + a @ c.T)
        assert abs(val - want) <= 1e-10 * abs(want)


def test_disjoint_factorization():
    rng = np.random.default_rng(5)
    blk1 = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    blk2 = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    plain = np.zeros((4, 4), dtype=complex)
    plain[:2, :2] = blk1
    plain[2:, 2:] = blk2
    cov = gd.WickCovariance.from_plain(plain)
    cov1 = gd.WickCovariance.from_plain(blk1)
    cov2 = gd.WickCovariance.from_plain(blk2)
    for _ in range(5):
        f_small = random_poly(4, 4, rng, parity="even")
        g_small = random_poly(4, 4, rng, parity="even")
        f = gd.GrassmannPoly(8, dict(f_small.terms))
        g = gd.GrassmannPoly(8, {m << 4: c for m, c in g_small.terms.items()})
        whole = gd.gaussian_integral(f * g, cov)
        split = gd.gaussian_integral(f_small, cov1) * gd.gaussian_integral(
            g_small, cov2
        )
        assert abs(whole - split) < 1e-10


def _jw_annihilators(n):
    lower = np.array([[0.0, 1.0], [0.0, 0.0]])
    string = np.diag([1.0, -1.0])
    eye = np.eye(2)
    ops = []
    for j in range(n):
        mats = [string] * j + [lower] + [eye] * (n - 1 - j)
        acc = mats[0]
        for m in mats[1:]:
            acc = np.kron(acc, m)
        ops.append(acc)
    return ops


def _spin_covariance_bruteforce(model, params, L, h):
    """Time-ordered thermal traces straight on the Fock space."""
    index = gd.SpinIndexSet(model.bands, L, model.dim, params.beta, h)
    space = ModeSpace("spin", model.bands, L, model.dim)
    kmat = (
        build_operator("H0", model, params, L)
        + (1j * params.theta_reduced) * build_operator("Sz", model, params, L)
    ).matrix
    weight = scipy.linalg.expm(-params.beta * kmat)
    z = np.trace(weight)
    ops = _jw_annihilators(space.n_modes)
    T = index.n_slices
    prop = {
        s: (scipy.linalg.expm((s / h) * kmat), scipy.linalg.expm(-(s / h) * kmat))
        for s in range(T)
    }
    n = index.plain_size
    out = np.zeros((n, n), dtype=complex)
    labels = [
        (b, x, sp, s)
        for b in range(1, model.bands + 1)
        for x in range(index.n_sites)
        for sp in (0, 1)
        for s in range(T)
    ]
    for b1, x, sp1, si in labels:
        i = space.spin_mode(b1, x, sp1)
        creator = prop[si][0] @ ops[i].T @ prop[si][1]
        pi = index.plain_index(b1, x, sp1, si)
        for b2, y, sp2, ti in labels:
            j = space.spin_mode(b2, y, sp2)
            annihil = prop[ti][0] @ ops[j] @ prop[ti][1]
            if si >= ti:
                val = np.trace(weight @ creator @ annihil)
            else:
                val = -np.trace(weight @ annihil @ creator)
            out[pi, index.plain_index(b2, y, sp2, ti)] = val / z
    return out


def test_spin_covariance_against_fock_traces():
    cases = [
        (CHAIN, PhysParams(beta=1.0, theta=1.3, U=-0.3), 1, 4.0),
        (CHAIN, PhysParams(beta=1.0, theta=1.3, U=-0.3), 2, 2.0),
    ]
    # complex hopping breaks E(k) = E(-k); catches row/column slips that
    # symmetric models cannot see
    asym = model_from_config(
        {
            "name": "asym_chain",
            "dim": 1,
            "bands": 1,
            "stencil": [
                {"displacement": [0.0], "block": [[0.2]]},
                {"displacement": [1.0], "block": [[-0.8 - 0.3j]]},
                {"displacement": [-1.0], "block": [[-0.8 + 0.3j]]},
            ],
            "const_a": 2.0,
            "exponents": [1],
        }
    )
    cases.append((asym, PhysParams(beta=0.7, theta=2.0, U=-0.3), 3, 2.0 / 0.7))
    for model, params, L, h in cases:
        index = gd.SpinIndexSet(model.bands, L, model.dim, params.beta, h)
        mine = gd.spin_covariance(model, params, index)
        ref = _spin_covariance_bruteforce(model, params, L, h)
        assert np.abs(mine - ref).max() < 1e-10


def test_wick_covariance_from_kernel_table():
    table = ce.CovarianceTable(CHAIN, PARAMS, 0.4 - 0.2j, 2, 2.0)
    dense = table.dense()
    wick = gd.WickCovariance.from_plain(dense)
    assert np.array_equal(wick.matrix, 2.0 * ce.antisymmetric_extension(dense))
    n = dense.shape[0]
    rng = np.random.default_rng(6)
    for _ in range(10):
        x, y = rng.integers(0, n, size=2)
        pair = gd.GrassmannPoly.monomial(2 * n, (2 * int(x), 2 * int(y) + 1))
        assert abs(gd.gaussian_integral(pair, wick) - dense[x, y]) < 1e-14


def test_index_set_budget_and_validation():
    idx = gd.SpinIndexSet(1, 1, 1, 1.0, 4.0)
    assert idx.signed_size == 16
    assert idx.plain_index(1, 0, 0, 0) == 0
    assert idx.generator(1, 0, 1, 3, -1) == 2 * idx.plain_index(1, 0, 1, 3) + 1
    with pytest.raises(ValueError):
        gd.SpinIndexSet(1, 2, 1, 1.0, 4.0)  # 32 signed generators
    with pytest.raises(ValueError):
        gd.SpinIndexSet(1, 1, 1, 1.0, 3.0)  # odd slice count
    with pytest.raises(ValueError):
        gd.SpinIndexSet(1, 1, 1, 1.0, 2.5)  # fractional slice count
    with pytest.raises(ValueError):
        idx.plain_index(1, 0, 2, 0)
    with pytest.raises(ValueError):
        idx.plain_index(1, 1, 0, 0)
    with pytest.raises(ValueError):
        gd.spin_covariance(CHAIN, PhysParams(beta=2.0, theta=1.0, U=-0.3), idx)


def test_first_formulation_free_normalization():
    index = gd.SpinIndexSet(1, 1, 1, 1.0, 4.0)
    wick = gd.WickCovariance.from_plain(gd.spin_covariance(CHAIN, PARAMS, index))
    weight = gd.exp_even(
        -(gd.onsite_attraction(index, 0.0) + gd.pair_source(index, 0.0))
    )
    assert gd.gaussian_integral(weight, wick) == 1.0 + 0.0j


def test_first_formulation_convergence():
    report = gd.first_formulation_check(CHAIN, PARAMS, 1, (2.0, 4.0, 6.0))
    assert abs(report.reference.imag) < 1e-12
    assert report.decreasing
    assert report.final_gap < 5e-2
    # the same identity with both sources switched on
    loaded = gd.first_formulation_check(
        CHAIN, PARAMS, 1, (2.0, 4.0, 6.0), lambdas=(0.15, -0.1)
    )
    assert loaded.decreasing
    assert loaded.final_gap < 5e-2
    # two sites fit the budget only at the coarsest step
    small = gd.first_formulation_check(CHAIN, PARAMS, 2, (2.0,), lambdas=(0.1, 0.05))
    assert small.final_gap < 5e-2
    with pytest.raises(ValueError):
        gd.first_formulation_check(CHAIN, PARAMS, 2, (4.0,))


def test_source_response_trend():
    report = gd.source_response_check(CHAIN, PARAMS, 1, (2.0, 4.0, 6.0))
    assert report.decreasing
    assert report.final_gap < 0.1
    # sanity: the reference is a genuine nonzero response
    assert abs(report.reference) > 0.5


def test_hubbard_stratonovich_identity():
    params = PhysParams(beta=1.0, theta=1.0, U=-0.5, gamma=0.2)
    residual = gd.hubbard_stratonovich_check(CHAIN, params, 1, 4.0, quad_n=24)
    assert residual < 1e-8
    loaded = gd.hubbard_stratonovich_check(
        CHAIN, params, 1, 4.0, quad_n=24, lambdas=(0.1, -0.05)
    )
    assert loaded < 1e-8
    two_site = gd.hubbard_stratonovich_check(
        CHAIN, params, 2, 2.0, quad_n=24, lambdas=(0.08, 0.03)
    )
    assert two_site < 1e-8


def test_hubbard_stratonovich_quadrature_sensitivity():
    params = PhysParams(beta=1.0, theta=1.0, U=-0.5, gamma=0.2)
    # inner polynomial degree is at most 8 per axis here, so 5 nodes
    # (exact through degree 9) already resolve it; 3 do not
    coarse = gd.hubbard_stratonovich_check(CHAIN, params, 1, 4.0, quad_n=3)
    assert coarse > 1e-6
    for q in (5, 8, 40):
        assert gd.hubbard_stratonovich_check(CHAIN, params, 1, 4.0, quad_n=q) < 1e-8


def test_hubbard_stratonovich_small_coupling_limit():
    # U -> 0: both sides collapse to the source-only weight
    tiny = PhysParams(beta=1.0, theta=1.0, U=-1e-12, gamma=0.2)
    assert gd.hubbard_stratonovich_check(CHAIN, tiny, 1, 4.0, quad_n=24) < 1e-10


def test_vanishing_property():
    rng = np.random.default_rng(11)
    L, n = 2, 3
    base = rng.normal(size=(L, L)) + 1j * rng.normal(size=(L, L))
    cov = gd.time_constant_covariance(L, n, base)
    f = random_poly(2 * L * n, 8, rng, parity="even")
    assert abs(gd.vanishing_property_check(n, L, cov, f)) < 1e-12
    assert abs(gd.vanishing_property_check(n, L, cov, None)) < 1e-12
    one_site = gd.time_constant_covariance(1, 4, np.array([[0.6 - 0.4j]]))
    f1 = random_poly(8, 6, rng, parity="even")
    assert abs(gd.vanishing_property_check(4, 1, one_site, f1)) < 1e-12


def test_vanishing_negative_control():
    rng = np.random.default_rng(0)
    L, n = 2, 3
    plain = rng.normal(size=(L * n, L * n)) + 1j * rng.normal(size=(L * n, L * n))
    cov = gd.WickCovariance.from_plain(plain)
    f = random_poly(2 * L * n, 8, rng, parity="even")
    assert abs(gd.vanishing_property_check(n, L, cov, f)) > 1e-3
    assert abs(gd.vanishing_property_check(n, L, cov, None)) > 1e-3
    with pytest.raises(ValueError):
        gd.vanishing_property_check(n, 3, cov, None)
    with pytest.raises(ValueError):
        gd.time_constant_covariance(2, 3, np.eye(3))

"""Observables, effective potentials, and Laplace-type finite-volume integrals."""

import math

import numpy as np
import pytest

from ibcs.gap_solver import PhysParams, g_value, solve_gap, solve_perturbed
from ibcs.lattice_models import builtin_model, chain_model, flat_model
from ibcs.quadrature import BZGrid, eigenvalues_on_grid
from ibcs.thermodynamics import (
    EffectivePotential1D,
    band_pair_factors,
    compute_observables,
    finite_volume_expectation,
    free_energy_density,
    laplace_check_1d,
    observables_csv_rows,
    odlro_limit,
    ssb_expectation,
    laplace_check_1d as _lc,  # noqa: F401  (import smoke for __all__-less module)
)


def flat_free_energy(beta, theta_reduced, delta, U, eps=1.0):
    # direct (overflow-prone) form of the same closed formula, as oracle
    s = math.sqrt(eps * eps + delta * delta)
    c = math.cos(beta * theta_reduced / 2.0)
    return delta * delta / abs(U) + eps - (math.log(c + math.cosh(beta * s)) + math.log(2.0)) / beta


def test_free_energy_flat_band_matches_direct_formula():
    flat = flat_model(1.0)
    for beta, theta, delta, U in [(1.0, 0.0, 0.0, -1.0), (2.0, 1.3, 0.4, -0.7), (0.5, 2.0, 1.1, -2.0)]:
        p = PhysParams(beta, theta, U)
        want = flat_free_energy(beta, p.theta_reduced, delta, U)
        assert free_energy_density(flat, p, delta) == pytest.approx(want, abs=1e-14)


def test_free_energy_free_fermion_reduction():
    # delta=0, theta=0, unit flat band: -(2/beta) log(1 + e^{-beta})
    flat = flat_model(1.0)
    for beta in (1.0, 3.0):
        got = free_energy_density(flat, PhysParams(beta, 0.0, -1.0), 0.0)
        assert got == pytest.approx(-(2.0 / beta) * math.log1p(math.exp(-beta)), abs=1e-14)


def test_free_energy_zero_temperature_trend():
    model = builtin_model("cubic3")
    grid = None
    from ibcs.gap_solver import default_grid

    grid = default_grid(model)
    eigs = eigenvalues_on_grid(model, grid)
    limit = float((eigs - np.abs(eigs)).sum(axis=1).mean())
    errs = []
    for k in range(3, 8):
        f = free_energy_density(model, PhysParams(float(2**k), 0.0, -0.5), 0.0, grid)
        errs.append(abs(f - limit))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    for beta in (50.0, 100.0):
        f = free_energy_density(model, PhysParams(beta, 0.0, -0.5), 0.0, grid)
        assert abs(f - limit) < 1e-5


def test_free_energy_theta_periodicity():
    model = builtin_model("cubic3")
    beta = 2.0
    p1 = PhysParams(beta, 0.9, -1.0)
    p2 = PhysParams(beta, 0.9 + 4.0 * math.pi / beta, -1.0)
    f1 = free_energy_density(model, p1, 0.0)
    f2 = free_energy_density(model, p2, 0.0)
    assert f1 == pytest.approx(f2, abs=1e-13)


def test_free_energy_domain_error_on_singular_line():
    # chain has zeros at k = pi/2 which lie on the default grid; on the
    # singular line the log argument vanishes there
    chain = chain_model()
    p = PhysParams(1.0, 2.0 * math.pi, -1.0)
    assert not p.admissible
    with pytest.raises(ValueError):
        free_energy_density(chain, p, 0.0)
    assert math.isfinite(free_energy_density(chain, p, 0.5))


def test_ssb_flat_band_closed_form():
    flat = flat_model(1.0)
    p = PhysParams(2.0, 0.7, -3.0)
    sol = solve_gap(flat, p)
    assert sol.solvable
    s = math.sqrt(1.0 + sol.delta**2)
    c = math.cos(p.beta * p.theta_reduced / 2.0)
    want = -(sol.delta / 2.0) * math.sinh(p.beta * s) / ((c + math.cosh(p.beta * s)) * s)
    got = ssb_expectation(flat, p)
    assert got.shape == (1,)
    assert got[0] == pytest.approx(want, abs=1e-13)


def test_ssb_zero_when_unsolvable():
    flat = flat_model(1.0)
    p = PhysParams(1.0, 0.0, -0.5)
    assert not solve_gap(flat, p).solvable
    assert np.all(ssb_expectation(flat, p) == 0.0)
    assert all(v == 0.0 for v in odlro_limit(flat, p).values())


def test_flat_band_odlro_is_cpd():
    # b=1: gap equation makes s = 1/|U|, so the single odlro entry is delta^2/U^2
    flat = flat_model(1.0)
    p = PhysParams(2.0, 0.7, -3.0)
    obs = compute_observables(flat, p)
    assert obs.odlro[(0, 0)] == pytest.approx(obs.cooper_pair_density, abs=1e-12)


def _random_solvable_points(model, rng, count):
    out = []
    while len(out) < count:
        beta = float(rng.uniform(0.5, 3.0))
        theta = float(rng.uniform(0.0, 4.0 * math.pi / beta))
        p = PhysParams(beta, theta, -float(rng.uniform(1.5, 5.0)))
        if not p.admissible:
            continue
        sol = solve_gap(model, p)
        if sol.solvable and sol.delta > 0:
            out.append((p, sol))
    return out


@pytest.mark.parametrize("name", ["honeycomb", "square6band"])
def test_factorization_sum_rule_and_cpd(name):
    model = builtin_model(name)
    rng = np.random.default_rng(11)
    for p, sol in _random_solvable_points(model, rng, 10):
        obs = compute_observables(model, p)
        assert obs.delta == sol.delta
        for (r, e), v in obs.odlro.items():
            assert v == pytest.approx(obs.ssb_per_band[r] * obs.ssb_per_band[e], abs=1e-10)
        assert obs.cooper_pair_density == pytest.approx(sol.delta**2 / p.U**2, abs=1e-12)
        # gap equation restated: sum of band factors = 1/|U|
        assert obs.ssb_per_band.sum() == pytest.approx(-sol.delta / abs(p.U), abs=1e-10)
        assert free_energy_density(model, p, sol.delta) == pytest.approx(obs.free_energy)


def test_effective_potential_basics():
    model = builtin_model("cubic3")
    p = PhysParams(2.0, 0.0, -12.0)
    sol = solve_gap(model, p)
    pot = EffectivePotential1D(model, p)
    assert pot.value(0.0) == 0.0
    f_at_gap = pot.value(sol.delta)
    for x in np.linspace(0.0, 2.0 * sol.delta + 1.0, 25):
        assert pot.value(float(x)) <= f_at_gap + 1e-12
    for x in (0.3, 0.8, 1.5, sol.delta):
        assert pot.derivative(float(x)) == pytest.approx(x * g_value(model, p, float(x)), abs=1e-7)
    assert pot.second_derivative(sol.delta) < 0.0
    potL = EffectivePotential1D(model, p, L=8)
    assert potL.value(0.0) == 0.0
    with pytest.raises(ValueError):
        EffectivePotential1D(model, p, L=8, grid=BZGrid(model.basis, 8, 0.0))


def test_finite_volume_cpd_converges():
    model = builtin_model("cubic3")
    p = PhysParams(2.0, 0.0, -12.0)
    target = solve_gap(model, p).delta ** 2 / p.U**2
    errs = []
    for L in (8, 16, 32):
        v = finite_volume_expectation(model, p, L, "cpd")
        errs.append(abs(v - target))
    assert errs[0] > errs[1] > errs[2]
    assert errs[-1] / target < 0.05


def test_finite_volume_ssb_zero_at_gamma_zero():
    model = builtin_model("cubic3")
    p = PhysParams(2.0, 0.0, -12.0)
    v = finite_volume_expectation(model, p, 8, "ssb")
    assert np.all(v == 0.0)


def test_finite_volume_ssb_gamma_tilted_trend():
    model = builtin_model("cubic3")
    p = PhysParams(2.0, 0.0, -12.0, gamma=0.01)
    theorem = ssb_expectation(model, PhysParams(2.0, 0.0, -12.0))[0]
    a_g = solve_perturbed(model, p)
    tilted_limit = -a_g * float(band_pair_factors(model, p, a_g)[0])
    errs_tilted, errs_theorem = [], []
    for L in (8, 16, 32):
        v = float(finite_volume_expectation(model, p, L, "ssb")[0])
        errs_tilted.append(abs(v - tilted_limit))
        errs_theorem.append(abs(v - theorem))
    assert errs_tilted[0] > errs_tilted[1] > errs_tilted[2]
    assert errs_theorem[-1] < errs_theorem[0]
    assert errs_theorem[-1] < 0.01


def test_finite_volume_odlro_multiband():
    model = builtin_model("honeycomb")
    p = PhysParams(1.5, 2.0, -3.0)
    limit = odlro_limit(model, p)
    od6 = finite_volume_expectation(model, p, 6, "odlro")
    od12 = finite_volume_expectation(model, p, 12, "odlro")
    assert sorted(od6) == sorted(limit)
    for key in limit:
        assert abs(od12[key] - limit[key]) < abs(od6[key] - limit[key])
    assert od12[(0, 1)] == pytest.approx(od12[(1, 0)], abs=1e-15)
    assert abs(od12[(0, 0)] - limit[(0, 0)]) / limit[(0, 0)] < 0.01


def test_finite_volume_logz_laplace_expansion():
    model = builtin_model("cubic3")
    p = PhysParams(2.0, 0.0, -12.0)
    resids = []
    for L in (4, 8, 16):
        lz = finite_volume_expectation(model, p, L, "logZ")
        pot = EffectivePotential1D(model, p, L=L)
        d_L = solve_gap(model, p, BZGrid(model.basis, L, 0.0)).delta
        scale = p.beta * L**3
        f2 = pot.second_derivative(d_L)
        boundary = (
            math.log(scale / (math.pi * abs(p.U)))
            + math.log(2.0 * math.pi)
            + math.log(d_L * math.sqrt(2.0 * math.pi / (scale * abs(f2))))
        )
        resids.append(abs(lz - boundary - scale * pot.value(d_L)))
    assert resids[0] > resids[1] > resids[2]
    assert resids[-1] < 1e-4


def test_finite_volume_validation():
    model = builtin_model("cubic3")
    p = PhysParams(2.0, 0.0, -12.0)
    with pytest.raises(ValueError):
        finite_volume_expectation(model, p, 4, "cpd", mean_field=False)
    with pytest.raises(ValueError):
        finite_volume_expectation(model, p, 4, "susceptibility")


def test_laplace_check_trivial_family():
    f = lambda x, L: -((x - 1.0) ** 2)
    one = lambda x, L: 1.0
    rep = laplace_check_1d(f, one, one, 1.0, [4, 16, 64], d=2)
    assert all(e < 1e-12 for e in rep.ratio_errors)
    assert rep.log_limit == 0.0
    assert rep.log_errors[0] > rep.log_errors[1] > rep.log_errors[2]
    assert rep.log_errors[-1] < 1e-3


def test_laplace_check_quartic_family():
    # x-weighted boundary maximum at a=0: ratio decays like sqrt(pi)/2 * (L^d)^{-1/2}
    f = lambda x, L: -x * x + x**4 / L if L is not None else -x * x
    one = lambda x, L: 1.0
    u = lambda x, L: x
    rep = laplace_check_1d(f, one, u, 0.0, [16, 64, 256], d=3, x_max=1.0)
    assert rep.ratio_limit == 0.0
    for L, ratio in zip(rep.L_values, rep.ratios):
        assert ratio == pytest.approx(math.sqrt(math.pi) / 2.0 * L**-1.5, rel=0.05)
    assert rep.ratio_errors[0] > rep.ratio_errors[1] > rep.ratio_errors[2]
    assert rep.ratio_errors[-1] < 1e-3


def test_laplace_check_rejects_non_integrable_tail():
    # without the window the quartic family grows at large x
    f = lambda x, L: -x * x + x**4 / L if L is not None else -x * x
    one = lambda x, L: 1.0
    u = lambda x, L: x
    with pytest.raises(ValueError):
        laplace_check_1d(f, one, u, 0.0, [16], d=3)


def test_laplace_check_bcs_cross_module():
    model = builtin_model("cubic3")
    p = PhysParams(2.0, 0.0, -12.0)
    delta = solve_gap(model, p).delta
    pots: dict = {}

    def pot(L):
        if L not in pots:
            pots[L] = EffectivePotential1D(model, p, L=L)
        return pots[L]

    def f(x, L):
        return p.beta * pot(L).value(x)

    def u(x, L):
        grid = BZGrid(model.basis, L, 0.0) if L is not None else None
        return x * x * float(band_pair_factors(model, p, x, grid).sum()) ** 2

    one = lambda x, L: 1.0
    rep = laplace_check_1d(f, one, u, delta, [8, 16, 32], d=3)
    assert rep.ratio_limit == pytest.approx(delta**2 / p.U**2, abs=1e-10)
    assert rep.ratio_errors[0] > rep.ratio_errors[1] > rep.ratio_errors[2]
    assert rep.ratio_errors[-1] < 1e-4
    assert rep.log_errors[-1] < 1e-3


def test_free_energy_continuous_across_phase_boundary():
    # locate a theta boundary by bisection on the solvability criterion,
    # then compare linearly extrapolated one-sided values
    chain = chain_model()
    beta, U = 2.0, -2.0
    lo, hi = 1e-6, (2.0 * math.pi / beta) * (1.0 - 1e-9)
    assert g_value(chain, PhysParams(beta, lo, U), 0.0) < 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if g_value(chain, PhysParams(beta, mid, U), 0.0) < 0.0:
            lo = mid
        else:
            hi = mid
    tc = 0.5 * (lo + hi)
    h = 1e-4

    def f_at(theta):
        return free_energy_density(chain, PhysParams(beta, theta, U))

    assert solve_gap(chain, PhysParams(beta, tc - h, U)).delta == 0.0
    assert solve_gap(chain, PhysParams(beta, tc + h, U)).delta > 0.0
    left = 2.0 * f_at(tc - h) - f_at(tc - 2.0 * h)
    right = 2.0 * f_at(tc + h) - f_at(tc + 2.0 * h)
    assert abs(left - right) < 1e-8


def test_observables_csv_rows():
    model = builtin_model("honeycomb")
    params = [PhysParams(1.5, 2.0, -3.0), PhysParams(1.0, 0.0, -0.5)]
    header, rows = observables_csv_rows(model, params)
    assert header == ["beta", "theta", "U", "delta", "free_energy", "ssb_1", "ssb_2", "cpd"]
    assert len(rows) == 2 and all(len(r) == len(header) for r in rows)
    obs = compute_observables(model, params[0])
    assert float(rows[0][3]) == obs.delta  # %.17g round-trips doubles
    assert float(rows[1][3]) == 0.0

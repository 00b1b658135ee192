import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coresurrogate.errors import ConvergenceError, DomainError, InfeasibleEquilibriumError
from coresurrogate.kvconfig import dataclass_from_kv
from coresurrogate.plant import (DEFAULT_CONSTANTS, PlantConstants, PowerProfile, State, _slow_rhs,
                                 equilibrium_state, jacobian, reactivity, rhs, rod_reactivity,
                                 solve_quasistatic_flux, temperature_program, xenon_equilibrium)

C = DEFAULT_CONSTANTS
NZ = C.n_z


def full_power_state():
    return State(np.ones(NZ), np.ones(NZ), np.ones(NZ), 306.0, 0.0)


def random_valid_state(rng):
    x = np.concatenate([rng.uniform(0.3, 1.2, NZ), rng.uniform(0.3, 1.2, NZ),
                        rng.uniform(0.3, 1.5, NZ), [rng.uniform(290, 310), rng.uniform(0.05, 0.95)]])
    return x


def fd_jacobian(x, p, c=C):
    n = x.size
    J = np.empty((n, n))
    for j in range(n):
        h = 1e-6 * (1.0 + abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (rhs(xp, p, c) - rhs(xm, p, c)) / (2 * h)
    return J


# ---- rhs -------------------------------------------------------------------

def test_full_power_equilibrium_is_fixed_point():
    assert np.max(np.abs(rhs(full_power_state(), 1.0))) < 1e-12


def test_state_vector_layout_round_trip():
    s = full_power_state()
    x = s.to_vector()
    assert x.shape == (3 * NZ + 2,) == (20,)
    back = State.from_vector(x)
    assert np.array_equal(back.to_vector(), x)


def test_single_mesh_prompt_decay_rate():
    # one mesh, no coupling, reactivity -0.001 from the power feedback alone
    c = PlantConstants(n_z=1, kappa=0.0)
    n = 1.0 + (-0.001) / c.alpha_pow
    x = np.array([n, n, 1.0, 306.0, 0.0])
    dn = rhs(x, 1.0, c)[0]
    assert dn == pytest.approx(-100.0 * n, rel=1e-12)


def test_iodine_production_rate():
    x = full_power_state().to_vector()
    x[NZ:2 * NZ] = 0.0
    assert np.allclose(rhs(x, 1.0)[NZ:2 * NZ], 2.9e-5, rtol=0, atol=1e-20)


def test_rhs_rejects_bad_inputs():
    x = full_power_state().to_vector()
    bad = x.copy()
    bad[0] = np.nan
    with pytest.raises(DomainError):
        rhs(bad, 1.0)
    bad = x.copy()
    bad[NZ] = -0.1
    with pytest.raises(DomainError):
        rhs(bad, 1.0)
    with pytest.raises(DomainError):
        rhs(x, 1.5)


def test_slow_rhs_matches_full_rhs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = random_valid_state(rng)
        p = rng.uniform(0.3, 1.0)
        assert np.allclose(_slow_rhs(x, p, C), rhs(x, p)[NZ:], rtol=1e-12, atol=1e-18)


# ---- rod worth and temperature program --------------------------------------

def test_rod_reactivity_withdrawn_with_spec_width():
    c = PlantConstants(w_rod=0.05)
    rho = rod_reactivity(0.0, c)
    assert np.all((rho < 0) & (rho > -c.W_rod))
    sig = 1.0 / (1.0 + math.exp(0.083 / 0.05))
    assert abs(rho[-1]) <= c.W_rod * sig * 1.01
    assert abs(rho[0]) < 1e-6


def test_rod_reactivity_inserted_with_spec_width():
    c = PlantConstants(w_rod=0.05)
    rho = rod_reactivity(1.0, c)
    sig = 1.0 / (1.0 + math.exp(0.083 / 0.05))
    assert np.all(np.abs(rho + c.W_rod) <= c.W_rod * sig * 1.01)


def test_rod_reactivity_top_mesh_first():
    rho = rod_reactivity(0.2)
    assert np.all(np.diff(rho) <= 0)  # top mesh (last index) most negative


@given(st.floats(0, 1), st.floats(0, 1))
def test_rod_reactivity_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert np.all(rod_reactivity(hi) <= rod_reactivity(lo))


def test_rod_reactivity_range_checked():
    with pytest.raises(DomainError):
        rod_reactivity(1.01)
    with pytest.raises(DomainError):
        rod_reactivity(-0.01)


@pytest.mark.parametrize("p,t", [(1.0, 306.0), (0.0, 286.0), (0.5, 296.0)])
def test_temperature_program(p, t):
    assert temperature_program(p) == pytest.approx(t, abs=1e-12)


# ---- Jacobian ----------------------------------------------------------------

def test_jacobian_iodine_diagonal_exact():
    J = jacobian(full_power_state(), 1.0)
    for i in range(NZ):
        assert J[NZ + i, NZ + i] == -C.lambda_I


def test_jacobian_flux_diagonal_at_full_power():
    J = jacobian(full_power_state(), 1.0)
    # reflective ends contribute -kappa instead of -2 kappa at the first and last mesh
    inner = C.alpha_pow / C.lambda_prompt - 2 * C.kappa
    for i in range(1, NZ - 1):
        assert J[i, i] == pytest.approx(inner, rel=1e-12)
    assert J[0, 0] == pytest.approx(inner + C.kappa, rel=1e-12)


def test_jacobian_matches_finite_differences_on_random_states():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        x = random_valid_state(rng)
        p = rng.uniform(0.3, 1.0)
        J = jacobian(x, p)
        F = fd_jacobian(x, p)
        big = np.abs(F) > 1e-6 * np.abs(F).max()
        worst = max(worst, np.max(np.abs(J[big] - F[big]) / np.abs(F[big])))
        assert np.max(np.abs(J[~big] - F[~big])) < 1e-6 * np.abs(F).max()
    assert worst <= 1e-5


def test_stiffness_certificate():
    J = jacobian(equilibrium_state(1.0), 1.0)
    re = np.abs(np.linalg.eigvals(J).real)
    re = re[re > 1e-14]
    assert re.max() / re.min() >= 1e6


# ---- equilibria ----------------------------------------------------------------

def test_equilibrium_full_power_is_nominal():
    x = equilibrium_state(1.0)
    assert np.allclose(x[:3 * NZ], 1.0, atol=1e-12)
    assert x[3 * NZ] == pytest.approx(306.0)
    assert x[3 * NZ + 1] == 0.0


def test_xenon_equilibrium_half_power_closed_form():
    assert xenon_equilibrium(0.5) == pytest.approx(0.5 * 5.6e-5 / 3.85e-5, rel=1e-12)
    assert xenon_equilibrium(0.5) == pytest.approx(0.7273, abs=1e-4)


@pytest.mark.parametrize("p0", list(np.linspace(0.3, 1.0, 8)) + [0.9])
def test_equilibrium_is_stationary(p0):
    x = equilibrium_state(p0)
    assert np.max(np.abs(rhs(x, p0))) < 1e-10
    nz = NZ
    assert np.allclose(x[nz:2 * nz], x[:nz], rtol=0, atol=1e-14)
    assert np.allclose(x[2 * nz:3 * nz], xenon_equilibrium(x[:nz]), rtol=1e-13)
    assert x[3 * nz] == pytest.approx(temperature_program(p0))
    assert x[:nz].mean() == pytest.approx(p0, abs=1e-10)


def test_equilibrium_rejects_out_of_range_power():
    with pytest.raises(DomainError):
        equilibrium_state(0.1)


def test_equilibrium_infeasible_with_weak_rods():
    with pytest.raises(InfeasibleEquilibriumError):
        equilibrium_state(0.3, PlantConstants(W_rod=1e-4))


# ---- quasi-static flux -------------------------------------------------------------

def test_quasistatic_flux_at_equilibrium():
    x = equilibrium_state(1.0)
    n = solve_quasistatic_flux(x[NZ:2 * NZ], x[2 * NZ:3 * NZ], x[3 * NZ], x[3 * NZ + 1])
    assert np.allclose(n, 1.0, atol=1e-10)


def test_quasistatic_flux_drops_with_more_xenon():
    x = equilibrium_state(0.8)
    n0 = solve_quasistatic_flux(x[NZ:2 * NZ], x[2 * NZ:3 * NZ], x[3 * NZ], x[3 * NZ + 1])
    n1 = solve_quasistatic_flux(x[NZ:2 * NZ], x[2 * NZ:3 * NZ] + 0.01, x[3 * NZ], x[3 * NZ + 1])
    assert np.all(n1 < n0)


def test_quasistatic_flux_residual():
    rng = np.random.default_rng(2)
    for _ in range(10):
        x = random_valid_state(rng)
        n = solve_quasistatic_flux(x[NZ:2 * NZ], x[2 * NZ:3 * NZ], x[3 * NZ], x[3 * NZ + 1])
        x[:NZ] = n
        dn = rhs(x, 1.0)[:NZ]
        assert np.all(n >= 0)
        assert np.max(np.abs(dn)) * C.lambda_prompt < 1e-10


def test_quasistatic_flux_rejects_negative_xenon():
    with pytest.raises(DomainError):
        solve_quasistatic_flux(np.ones(NZ), -np.ones(NZ), 306.0, 0.0)


def test_quasistatic_flux_reports_non_convergence():
    x = equilibrium_state(1.0)
    with pytest.raises(ConvergenceError):
        solve_quasistatic_flux(x[NZ:2 * NZ], x[2 * NZ:3 * NZ], 306.0, 0.0, tol=0.0)


# ---- constants and profiles -------------------------------------------------------

def test_constants_kv_round_trip_and_unknown_keys():
    c = PlantConstants(kappa=123.0)
    assert PlantConstants.from_kv(c.to_kv()) == c
    with pytest.raises(Exception):
        dataclass_from_kv(PlantConstants, "not_a_field = 1\n")


def test_constants_reject_non_stiff_values():
    with pytest.raises(DomainError):
        PlantConstants(lambda_prompt=1.0)


def test_reactivity_zero_at_full_power():
    assert np.allclose(reactivity(equilibrium_state(1.0)), 0.0, atol=1e-15)


def test_profile_interpolates_and_holds():
    prof = PowerProfile(((0.0, 1.0), (600.0, 0.9), (1200.0, 0.9)))
    assert prof(300.0) == pytest.approx(0.95)
    assert prof(1e6) == 0.9
    with pytest.raises(DomainError):
        PowerProfile(((10.0, 1.0),))
    with pytest.raises(DomainError):
        PowerProfile(((0.0, 1.0), (0.0, 0.9)))
    with pytest.raises(DomainError):
        PowerProfile(((0.0, 0.1),))


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(1, 1e4), st.floats(0.2, 1.0)), min_size=1, max_size=6),
       st.floats(0, 5e4))
def test_profile_piecewise_linear_between_breakpoints(steps, t):
    times = np.cumsum([0.0] + [s[0] for s in steps])
    powers = [1.0] + [s[1] for s in steps]
    prof = PowerProfile(tuple(zip(times, powers)))
    v = prof(t)
    assert min(powers) - 1e-12 <= v <= max(powers) + 1e-12

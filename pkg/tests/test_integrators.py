import numpy as np
import pytest

from coresurrogate.dataset import Normalizer, fig3_profile
from coresurrogate.errors import DomainError, IntegrationError
from coresurrogate.integrators import (STATS_HEADER, ImplicitSolver, SolverConfig, StepStats,
                                       advance_nonstiff, implicit_euler_step, integrate_reference,
                                       nonstiff_derivative, step_controller, step_nonstiff_explicit)
from coresurrogate.plant import DEFAULT_CONSTANTS, PowerProfile, equilibrium_state, rhs

C = DEFAULT_CONSTANTS
NZ = C.n_z
DAY = 86400.0


def frozen_flux_system(u, c=C):
    """Iodine/xenon block with the flux frozen at ``u`` (linear, closed form known)."""
    ls = c.lambda_X + c.sigma_star
    k = c.lambda_X + c.sigma_star * u
    nz = c.n_z

    def fun(t, y):
        i, x = y[:nz], y[nz:]
        return np.concatenate([c.lambda_I * (u - i), ls * (c.beta_I * i + (1 - c.beta_I) * u) - k * x])

    jac = np.zeros((2 * nz, 2 * nz))
    jac[:nz, :nz] = -c.lambda_I * np.eye(nz)
    jac[nz:, :nz] = ls * c.beta_I * np.eye(nz)
    jac[nz:, nz:] = -k * np.eye(nz)

    def exact(t, y0):
        i0, x0 = y0[:nz], y0[nz:]
        d = i0 - u
        x_eq = ls * u / k
        a = ls * c.beta_I * d / (k - c.lambda_I)
        b = x0 - x_eq - a
        t = np.asarray(t)[:, None]
        return np.concatenate([u + d * np.exp(-c.lambda_I * t),
                               x_eq + a * np.exp(-c.lambda_I * t) + b * np.exp(-k * t)], axis=1)

    return fun, (lambda t, y: jac), exact


def solve_frozen(cfg, u=0.6, horizon=DAY):
    fun, jac, exact = frozen_flux_system(u)
    y0 = np.concatenate([np.full(NZ, 1.0), np.full(NZ, 1.0)])
    times = 60.0 * np.arange(int(horizon / 60) + 1)
    ys, _ = ImplicitSolver(fun, jac, cfg).solve(0.0, y0, horizon, times)
    return ys, exact(times, y0)


@pytest.fixture(scope="module")
def fig3_reference():
    x0 = equilibrium_state(1.0)
    return integrate_reference(x0, fig3_profile(), DAY)


# ---- controller and small formulas --------------------------------------------------

def test_step_controller_examples():
    cfg = SolverConfig()
    assert step_controller(1.0, 2.0, 2, cfg) == pytest.approx(1.8)
    assert step_controller(0.0, 2.0, 2, cfg) == pytest.approx(10.0)
    assert step_controller(1e6, 2.0, 2, cfg) == pytest.approx(0.4)
    assert step_controller(0.0, 50.0, 2, cfg) == cfg.dt_max
    with pytest.raises(DomainError):
        step_controller(-1.0, 1.0, 2, cfg)


def test_solver_config_invariants():
    with pytest.raises(DomainError):
        SolverConfig(rtol=0.0)
    with pytest.raises(DomainError):
        SolverConfig(atol=0.0)
    with pytest.raises(DomainError):
        SolverConfig(dt_init=100.0, dt_max=60.0)
    with pytest.raises(DomainError):
        SolverConfig(safety=1.0)


def test_implicit_euler_closed_form():
    lam = -1e4
    y1 = implicit_euler_step(lambda t, y: lam * y, lambda t, y: np.array([[lam]]), 0.0,
                             np.array([1.0]), 1.0)
    assert y1[0] == pytest.approx(1.0 / (1.0 + 1e4), rel=1e-14)


def test_stats_csv_row_round_trip():
    s = StepStats(3, 1, 20, 4, 0.125)
    assert STATS_HEADER == "steps_accepted,steps_rejected,newton_iters,jacobian_evals,wall_clock_s"
    assert StepStats.from_csv_row(s.csv_row()) == s


# ---- reference solver ------------------------------------------------------------------

def test_equilibrium_is_fixed_point_over_a_day():
    x0 = equilibrium_state(1.0)
    traj, stats = integrate_reference(x0, PowerProfile.constant(1.0), DAY)
    assert len(traj) == 1441
    assert np.max(np.abs(traj.states - x0)) < 1e-6
    assert stats.wall_clock_s > 0


def test_samples_exactly_on_grid(fig3_reference):
    traj, stats = fig3_reference
    assert np.array_equal(traj.times, 60.0 * np.arange(1441))
    assert traj.provenance == "reference"
    assert stats.steps_accepted > 0 and stats.wall_clock_s > 0
    assert min(stats.steps_accepted, stats.steps_rejected, stats.newton_iters,
               stats.jacobian_evals) >= 0


def test_reference_positivity_and_rod_range(fig3_reference):
    traj, _ = fig3_reference
    traj.check_invariants()
    assert traj.states[:, :3 * NZ].min() >= 0


def test_no_flux_blow_up_between_samples(fig3_reference):
    n = fig3_reference[0].flux
    assert np.all(n[1:] <= 1.5 * n[:-1] + 1e-12)


def test_horizon_must_be_a_sample_multiple():
    with pytest.raises(DomainError):
        integrate_reference(equilibrium_state(1.0), PowerProfile.constant(1.0), 90.0)


def test_reference_is_deterministic():
    x0 = equilibrium_state(1.0)
    a, _ = integrate_reference(x0, fig3_profile(), 7200.0)
    b, _ = integrate_reference(x0, fig3_profile(), 7200.0)
    assert np.array_equal(a.states, b.states)


def test_step_underflow_raises_with_partial_trajectory():
    def fun(t, y):
        return np.array([1e30 * np.sin(1e12 * t)])

    def jac(t, y):
        return np.zeros((1, 1))

    solver = ImplicitSolver(fun, jac, SolverConfig(rtol=1e-12, atol=1e-14))
    with pytest.raises(IntegrationError) as err:
        solver.solve(0.0, np.array([0.0]), 60.0, np.array([0.0, 60.0]))
    assert err.value.partial is not None


def test_frozen_flux_default_settings_within_global_contract():
    # at the default 60 s step cap the global error is set by the cap, not by rtol
    cfg = SolverConfig()
    ys, ex = solve_frozen(cfg)
    assert np.max(np.abs(ys - ex)) < 10 * cfg.rtol


def test_frozen_flux_subsystem_matches_closed_form():
    ys, ex = solve_frozen(SolverConfig().tightened(1000.0))
    assert np.max(np.abs(ys - ex)) < 1e-8


def test_frozen_flux_error_shrinks_with_tolerance():
    # uncapped steps so the controller alone sets the step size
    coarse = SolverConfig(rtol=1e-5, atol=1e-7, dt_max=DAY)
    e1 = np.max(np.abs(np.subtract(*solve_frozen(coarse))))
    e2 = np.max(np.abs(np.subtract(*solve_frozen(coarse.tightened(10.0)))))
    assert 2.0 < e1 / e2 < 20.0


# ---- explicit non-stiff step ----------------------------------------------------------------

def test_explicit_step_keeps_equilibrium():
    x = equilibrium_state(0.7)
    y = step_nonstiff_explicit(x, x[:NZ], 0.7)
    assert np.max(np.abs(y - x)) < 1e-12


def test_explicit_step_iodine_is_euler():
    rng = np.random.default_rng(0)
    x = equilibrium_state(1.0)
    x[NZ:2 * NZ] = rng.uniform(0.5, 1.5, NZ)
    n_next = rng.uniform(0.5, 1.5, NZ)
    y = step_nonstiff_explicit(x, n_next, 1.0, 60.0)
    assert np.array_equal(y[:NZ], n_next)
    iod = x[NZ:2 * NZ]
    assert np.array_equal(y[NZ:2 * NZ], iod + 60.0 * (C.lambda_I * (x[:NZ] - iod)))


def test_explicit_step_rejects_bad_flux():
    x = equilibrium_state(1.0)
    with pytest.raises(DomainError):
        step_nonstiff_explicit(x, np.full(NZ, np.nan), 1.0)
    with pytest.raises(DomainError):
        step_nonstiff_explicit(x, np.ones(NZ - 1), 1.0)


def test_nonstiff_derivative_matches_rhs():
    x = equilibrium_state(0.6)
    x[2 * NZ:3 * NZ] *= 1.05
    assert np.allclose(nonstiff_derivative(x, 0.8), rhs(x, 0.8)[NZ:], rtol=1e-12, atol=1e-18)
    assert advance_nonstiff(x, 0.8, 60.0).shape == (2 * NZ + 2,)


def _hybrid_step_errors(traj, norm, stride):
    dt = stride * 60.0
    return np.array([np.abs(norm.transform(step_nonstiff_explicit(
        traj.states[k], traj.states[k + stride, :NZ], traj.p_turb[k], dt)) - norm.transform(traj.states[k + stride]))
        for k in range(0, len(traj) - stride, 2)])


@pytest.fixture(scope="module")
def fig3_normalizer(fig3_reference):
    # span over a spread of operating points, standing in for a training corpus
    states = [fig3_reference[0].states] + [equilibrium_state(p)[None] for p in (0.3, 0.5, 1.0)]
    return Normalizer.fit(np.concatenate(states))


def test_hybrid_step_error_is_second_order(fig3_reference, fig3_normalizer):
    traj, _ = fig3_reference
    e60 = _hybrid_step_errors(traj, fig3_normalizer, 1).max()
    e120 = _hybrid_step_errors(traj, fig3_normalizer, 2).max()
    assert 3.0 < e120 / e60 < 5.0


@pytest.mark.xfail(strict=True, reason="explicit Euler on the cold-leg temperature through 60 s "
                   "ramps leaves ~6e-4 normalized error; see the decisions ledger")
def test_hybrid_step_with_reference_flux_is_within_1e_4(fig3_reference, fig3_normalizer):
    traj, _ = fig3_reference
    assert _hybrid_step_errors(traj, fig3_normalizer, 1).max() < 1e-4

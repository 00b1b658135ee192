"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the terminal summary.
"""
import subprocess
import sys
import time

import numpy as np
import pytest

from gradcheck_suite import CASES, TRIALS, run_case
from test_gbt import brute_force_split, random_instance
from test_integrators import solve_frozen
from coresurrogate.bench import GROUPS, scaled_mse
from coresurrogate.dataset import fig3_profile
from coresurrogate.gbt import best_split, recursive_rollout
from coresurrogate.integrators import SolverConfig, integrate_reference
from coresurrogate.pinn import QuasiStaticOracle, hybrid_rollout
from coresurrogate.plant import PowerProfile, equilibrium_state, jacobian
from coresurrogate.trajectory import Trajectory

pytestmark = pytest.mark.acceptance
DAY = 86400.0


@pytest.fixture(scope="module")
def fig3_reference():
    traj, _ = integrate_reference(equilibrium_state(1.0), fig3_profile(), DAY)
    return traj


def test_equilibrium_fixed_point(desk_corpus, criterion):
    norm = desk_corpus.normalizer
    t0 = time.perf_counter()
    drift = {}
    for p0 in (0.5, 0.8, 1.0):
        x0 = equilibrium_state(p0)
        traj, _ = integrate_reference(x0, PowerProfile.constant(p0), DAY)
        drift[p0] = float(np.max(np.abs(norm.transform(traj.states) - norm.transform(x0))))
    seconds = time.perf_counter() - t0
    ok = max(drift.values()) < 1e-6 and seconds < 30.0
    criterion(ok, f"max normalized drift {max(drift.values()):.2e} (< 1e-6) in {seconds:.1f} s (< 30 s)")
    assert ok


def test_solver_convergence(fig3_reference, criterion):
    fine, _ = integrate_reference(fig3_reference.states[0], fig3_profile(), DAY,
                                  cfg=SolverConfig().tightened(10.0))
    # per-component error relative to the component's magnitude over the run
    rel = float(np.max(np.abs(fig3_reference.states - fine.states).max(axis=0) / np.abs(fine.states).max(axis=0)))
    ys, exact = solve_frozen(SolverConfig().tightened(1000.0))
    analytic = float(np.max(np.abs(ys - exact)))
    ok = rel < 1e-6 and analytic < 1e-8
    criterion(ok, f"tolerance-refinement difference {rel:.2e} (< 1e-6); frozen-flux error {analytic:.2e} (< 1e-8)")
    assert ok


def test_stiffness_certificate(criterion):
    re = np.abs(np.linalg.eigvals(jacobian(equilibrium_state(1.0), 1.0)).real)
    re = re[re > 1e-14]
    ratio = float(re.max() / re.min())
    criterion(ratio >= 1e6, f"eigenvalue magnitude ratio {ratio:.3e} (>= 1e6)")
    assert ratio >= 1e6


def test_autodiff_gradcheck_suite(criterion):
    failed = []
    for name in sorted(CASES):
        passed, worst = run_case(name)
        if passed != TRIALS:
            failed.append(f"{name} ({passed}/{TRIALS}, worst {worst:.2g})")
    criterion(not failed, f"{len(CASES) - len(failed)}/{len(CASES)} cases x {TRIALS} trials within 1e-5"
              + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_quasistatic_oracle_rollout(fig3_reference, desk_corpus, criterion):
    traj, _ = hybrid_rollout(QuasiStaticOracle(), fig3_reference.states[0], fig3_profile(), DAY)
    norm = desk_corpus.normalizer
    err = float(np.max(np.abs(norm.transform(traj.states) - norm.transform(fig3_reference.states))))
    criterion(err < 5e-3, f"max normalized error {err:.2e} (< 5e-3)")
    assert err < 5e-3


def test_pinn_accuracy_and_residual(trained_pinn, desk_report, desk_corpus, criterion):
    _, _, seconds = trained_pinn
    report, _ = desk_report
    mse = report.mse_per_min_np["pinn-hybrid"]
    res = report.pi_residual["pinn-hybrid"]
    ok = len(desk_corpus.train) >= 32 and mse[0] <= 1.0 and res[0] <= 1e-5 and seconds <= 1800.0
    criterion(ok, f"mse_per_min_np {mse[0]:.3f} +- {mse[1]:.3f} (%NP)^2 (<= 1.0); "
                  f"residual {res[0]:.2e} +- {res[1]:.1e} (<= 1e-5); training {seconds / 60:.1f} min (<= 30)")
    assert ok


def test_pinn_speedup(desk_report, criterion):
    report, _ = desk_report
    speedup = report.speedup["pinn-hybrid"]
    ok = report.n_test >= 8 and speedup >= 10.0
    criterion(ok, f"{speedup:.1f}x over {report.n_test} scenarios (>= 10x; published "
                  f"{report.published_speedup:.0f}x)")
    assert ok


def test_gbt_beats_baselines(trained_gbt, gbt_test_rollouts, desk_report, criterion):
    report, _ = desk_report
    norm = trained_gbt.normalizer  # the corpus normalizer, stored with the ensemble
    first = trained_gbt.truncated(1)
    full, one, persist = [], [], []
    for pred, ref in gbt_test_rollouts:
        full.append(scaled_mse(pred, ref, norm)["overall"])
        q, _ = recursive_rollout(first, ref.states[0], ref.profile, float(ref.times[-1]))
        one.append(scaled_mse(q, ref, norm)["overall"])
        still = Trajectory(ref.times, np.tile(ref.states[0], (len(ref), 1)), ref.profile)
        persist.append(scaled_mse(still, ref, norm)["overall"])
    log = trained_gbt.fit_log
    monotone = all(b <= a for a, b in zip(log, log[1:]))
    table = report.scaled_mse["gbt-rollout"]
    lines = ["Scaled MSE on 24h (x1e3): " + ", ".join(f"{g} {table[g][0]:.2g}+-{table[g][1]:.2g}"
                                                      for g in GROUPS + ("overall",))]
    ok = (len(gbt_test_rollouts) >= 8 and len(trained_gbt.trees) == 100 and np.mean(full) < np.mean(persist)
          and np.mean(full) < np.mean(one) and monotone and all(g in lines[0] for g in GROUPS))
    criterion(ok, f"overall {np.mean(full):.3g} vs persistence {np.mean(persist):.3g} vs one round "
                  f"{np.mean(one):.3g}; fit log monotone: {monotone}; {lines[0]}")
    assert ok


def test_split_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        X, Y, msl = random_instance(rng)
        got, want = best_split(X, Y, msl), brute_force_split(X, Y, msl)
        same = (got is None and want is None) or (
            got is not None and want is not None and got[:2] == want[:2]
            and abs(got[2] - want[2]) <= 1e-9 * abs(want[2]) + 1e-12)
        mismatches += not same
    criterion(mismatches == 0, f"{200 - mismatches}/200 instances match brute force")
    assert mismatches == 0


def test_cli_end_to_end_smoke(tmp_path, criterion):
    cli = [sys.executable, "-m", "coresurrogate.cli"]
    corpus, models, report = tmp_path / "corpus", tmp_path / "models", tmp_path / "report"
    steps = [["gen", "--train", "4", "--test", "1", "--seed", "11", "--out", str(corpus)],
             ["train-pinn", "--corpus", str(corpus), "--out", str(models / "pinn.ckpt")],
             ["train-gbt", "--corpus", str(corpus), "--out", str(models / "gbt.json")],
             ["bench", "--corpus", str(corpus), "--models", str(models), "--out", str(report)]]
    models.mkdir()
    t0 = time.perf_counter()
    codes = [subprocess.run(cli + s, capture_output=True, text=True).returncode for s in steps]
    seconds = time.perf_counter() - t0
    artifacts = [report / "report.csv", report / "summary.json"]
    plots = list((report / "plotdata").glob("*.csv")) if (report / "plotdata").exists() else []
    ok = codes == [0, 0, 0, 0] and seconds < 600.0 and all(p.exists() for p in artifacts) and len(plots) == 2
    criterion(ok, f"exit codes {codes}, {seconds / 60:.1f} min (< 10), report.csv + summary.json + "
                  f"{len(plots)} plot files")
    assert ok

"""Accuracy metrics, timing harness and report artifacts.

Conventions:

* ``scaled_mse`` works in the corpus Normalizer's coordinates. Each group
  (iodine, xenon, cold-leg temperature, rod bank, flux) reports the mean of
  its components' MSEs; ``overall`` is the sum of the five group values.
  Every value is multiplied by 1e3.
* ``mse_per_min_np`` is the mean over the 60 s samples of the squared core
  power error, core power being the mesh-average flux in %NP, so the unit
  is (%NP)^2.
* ``pi_residual`` is the mean squared physics residual of a trajectory's flux
  sequence against its own slow variables.
* ``speedup`` is mean reference wall clock over mean surrogate wall clock,
  both timed around the integration or rollout loop only (no file I/O).

Artifacts written by :func:`bench`:

* ``report.csv``: one row per (scenario, method) with columns ``REPORT_COLUMNS``.
* ``summary.json``: per method, mean and std of every metric column, plus the
  speedups, scenario seeds and counts.
* ``plotdata/<seed>_<method>.csv``: ``t_min`` then ``<var>_ref, <var>_pred``
  for core power and every state component.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Corpus, Normalizer
from .errors import DomainError
from .gbt import GradientBoostedEnsemble, recursive_rollout
from .integrators import SolverConfig, integrate_reference
from .pinn import PinnModel, hybrid_rollout, physics_residual
from .plant import DEFAULT_CONSTANTS, PlantConstants
from .trajectory import Trajectory

SCALE = 1e3
GROUPS = ("I", "X", "T_cl", "X_bank", "n")
METHODS = ("reference", "pinn-hybrid", "gbt-rollout")
PUBLISHED_SPEEDUP = 1300.0
REPORT_COLUMNS = (("seed", "method", "wall_clock_s")
                  + tuple(f"scaled_mse_{g}" for g in GROUPS)
                  + ("scaled_mse_overall", "mse_per_min_np", "pi_residual"))


def group_indices(n_z: int) -> dict:
    return {"I": np.arange(n_z, 2 * n_z), "X": np.arange(2 * n_z, 3 * n_z),
            "T_cl": np.array([3 * n_z]), "X_bank": np.array([3 * n_z + 1]), "n": np.arange(n_z)}


def _check_aligned(pred: Trajectory, ref: Trajectory) -> None:
    if pred.states.shape != ref.states.shape or not np.array_equal(pred.times, ref.times):
        raise DomainError(f"trajectories are not aligned: {pred.states.shape} at "
                          f"{pred.times[:1]}..{pred.times[-1:]} vs {ref.states.shape}")


def component_mse(pred: Trajectory, ref: Trajectory, norm: Normalizer) -> np.ndarray:
    """Per-component MSE in normalized coordinates (not scaled)."""
    _check_aligned(pred, ref)
    diff = norm.transform(pred.states) - norm.transform(ref.states)
    return np.mean(diff * diff, axis=0)


def scaled_mse(pred: Trajectory, ref: Trajectory, norm: Normalizer) -> dict:
    """Per-group and overall normalized MSE, times 1e3."""
    comp = component_mse(pred, ref, norm)
    out = {g: SCALE * float(comp[idx].mean()) for g, idx in group_indices(ref.n_z).items()}
    out = {g: out[g] for g in GROUPS}
    out["overall"] = float(sum(out[g] for g in GROUPS))
    return out


def mse_per_min_np(pred: Trajectory, ref: Trajectory) -> float:
    """Mean over samples of the squared core-power error in (%NP)^2."""
    _check_aligned(pred, ref)
    if len(ref) > 1 and not np.allclose(np.diff(ref.times), 60.0):
        raise DomainError("mse_per_min_np needs 60 s sampling")
    err = 100.0 * (pred.flux.mean(axis=1) - ref.flux.mean(axis=1))
    return float(np.mean(err * err))


def pi_residual(traj: Trajectory, c: PlantConstants = DEFAULT_CONSTANTS) -> float:
    """Mean squared physics residual of a trajectory's flux against its slow variables."""
    nz = traj.n_z
    slow = np.concatenate([traj.states[:, nz:], traj.p_turb[:, None]], axis=1)
    dt = float(traj.times[1] - traj.times[0])
    r = physics_residual(traj.flux, slow, dt, c).data
    return float(np.mean(r * r))


def truncate(traj: Trajectory, n_samples: int) -> Trajectory:
    return Trajectory(traj.times[:n_samples], traj.states[:n_samples], traj.profile,
                      traj.provenance, dict(traj.meta))


@dataclass
class MetricsReport:
    """Mean and standard deviation over test scenarios, per surrogate method."""
    scaled_mse: dict = field(default_factory=dict)        # method -> group -> (mean, std)
    mse_per_min_np: dict = field(default_factory=dict)    # method -> (mean, std)
    pi_residual: dict = field(default_factory=dict)       # method -> (mean, std)
    wall_clock_s: dict = field(default_factory=dict)      # method -> (mean, std)
    speedup: dict = field(default_factory=dict)           # method -> ratio of means
    seeds: list = field(default_factory=list)
    n_train: int = 0
    n_test: int = 0
    published_speedup: float = PUBLISHED_SPEEDUP

    def to_json(self) -> dict:
        return asdict(self)


def _mean_std(values) -> tuple:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


def _write_plotdata(path: Path, ref: Trajectory, pred: Trajectory) -> None:
    nz = ref.n_z
    names = ([f"n{i}" for i in range(nz)] + [f"I{i}" for i in range(nz)]
             + [f"X{i}" for i in range(nz)] + ["T_cl", "X_bank"])
    cols = [ref.times / 60.0]
    header = ["t_min"]
    series = [("core_power", ref.flux.mean(axis=1), pred.flux.mean(axis=1))]
    series += [(nm, ref.states[:, j], pred.states[:, j]) for j, nm in enumerate(names)]
    for nm, a, b in series:
        header += [f"{nm}_ref", f"{nm}_pred"]
        cols += [a, b]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.column_stack(cols):
            w.writerow([repr(float(v)) for v in row])


def bench(corpus: Corpus, pinn: PinnModel, gbt: GradientBoostedEnsemble, out_dir,
          cfg: SolverConfig = SolverConfig(), c: PlantConstants = DEFAULT_CONSTANTS,
          progress=None) -> MetricsReport:
    """Run reference, PINN-hybrid and GBT rollouts on every test scenario and write the artifacts."""
    if not corpus.test:
        raise DomainError("corpus has no test scenarios")
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    norm = corpus.normalizer
    rows, seeds = [], []
    for stored in corpus.test:
        seed = int(stored.meta.get("seed", len(seeds)))
        seeds.append(seed)
        x0, profile = stored.states[0], stored.profile
        horizon = float(stored.times[-1])
        ref, stats = integrate_reference(x0, profile, horizon, cfg=cfg, c=c)
        runs = {"reference": (ref, stats.wall_clock_s)}
        runs["pinn-hybrid"] = hybrid_rollout(pinn, x0, profile, horizon, c)
        runs["gbt-rollout"] = recursive_rollout(gbt, x0, profile, horizon)
        for method in METHODS:
            traj, wall = runs[method]
            sm = scaled_mse(traj, ref, norm)
            rows.append({"seed": seed, "method": method, "wall_clock_s": float(wall),
                         **{f"scaled_mse_{g}": sm[g] for g in GROUPS},
                         "scaled_mse_overall": sm["overall"],
                         "mse_per_min_np": mse_per_min_np(traj, ref),
                         "pi_residual": pi_residual(traj, c)})
            if method != "reference":
                _write_plotdata(out / "plotdata" / f"{seed}_{method}.csv", ref, traj)
        if progress:
            progress(seed, rows[-3:])

    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["seed"], r["method"]] + [repr(float(r[k])) for k in REPORT_COLUMNS[2:]])

    report = MetricsReport(seeds=seeds, n_train=len(corpus.train), n_test=len(corpus.test))
    by = {m: [r for r in rows if r["method"] == m] for m in METHODS}
    for m in METHODS:
        report.scaled_mse[m] = {g: _mean_std([r[f"scaled_mse_{g}"] for r in by[m]])
                                for g in GROUPS + ("overall",)}
        report.mse_per_min_np[m] = _mean_std([r["mse_per_min_np"] for r in by[m]])
        report.pi_residual[m] = _mean_std([r["pi_residual"] for r in by[m]])
        report.wall_clock_s[m] = _mean_std([r["wall_clock_s"] for r in by[m]])
    t_ref = report.wall_clock_s["reference"][0]
    report.speedup = {m: t_ref / report.wall_clock_s[m][0] for m in METHODS[1:]}
    (out / "summary.json").write_text(json.dumps(report.to_json(), indent=2))
    return report


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for k in REPORT_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows


def timed(fn, *args, **kwargs):
    """Call ``fn`` and return ``(result, seconds)``."""
    t0 = time.perf_counter()
    res = fn(*args, **kwargs)
    return res, time.perf_counter() - t0

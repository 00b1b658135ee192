"""Load-following scenarios, reference corpora, normalization and slicing.

Scenario randomness comes from SplitMix64, a 64-bit counter-based generator
that is trivial to reproduce in any language:

    state += 0x9E3779B97F4A7C15                (mod 2**64)
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB   (mod 2**64)
    output z ^ (z >> 31)

Uniform floats are ``(output >> 11) * 2**-53`` and bounded integers use
``lo + output % (hi - lo + 1)``.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorpusError, DomainError, GenerationError, IntegrationError
from .integrators import SolverConfig, integrate_reference
from .kvconfig import format_kv, parse_kv
from .plant import DEFAULT_CONSTANTS, PlantConstants, PowerProfile, equilibrium_state
from .trajectory import Trajectory

log = logging.getLogger(__name__)

_MASK = (1 << 64) - 1
SAMPLE_DT_S = 60.0
MANIFEST_COLUMNS = ("seed", "file", "provenance", "n_samples")


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def integer(self, lo: int, hi: int) -> int:
        """Integer in the closed range [lo, hi]."""
        if hi < lo:
            raise DomainError(f"empty integer range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    n_ramps: int = 2
    power_floor: float = 0.3
    ramp_rate: float = 1.0  # %NP per minute
    horizon_s: float = 86400.0
    initial_power: float = 1.0
    boron_ppm: float = 1296.0  # held constant; recorded for reference only

    def __post_init__(self):
        if not 0 <= self.n_ramps <= 4:
            raise DomainError("n_ramps must lie in 0..4")
        if self.power_floor < 0.2:
            raise DomainError("power_floor must be >= 0.2")
        if not self.ramp_rate > 0:
            raise DomainError("ramp_rate must be > 0")
        if not self.horizon_s > 0:
            raise DomainError("horizon_s must be > 0")
        if not self.power_floor <= self.initial_power <= 1.0:
            raise DomainError("initial_power must lie in [power_floor, 1]")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def scenario_for_seed(seed: int, **overrides) -> ScenarioSpec:
    """Scenario whose ramp count (1..4) is itself drawn from ``seed``."""
    n_ramps = SplitMix64(seed ^ 0x5DEECE66D).integer(1, 4)
    return ScenarioSpec(seed=seed, **{"n_ramps": n_ramps, **overrides})


def fig3_profile() -> PowerProfile:
    """Canonical day: 100 -> 70 %NP at 30 min, back at 180 min, 50 %NP from 480 to 1200 min."""
    minutes = [(0, 1.0), (30, 1.0), (60, 0.7), (180, 0.7), (210, 1.0),
               (480, 1.0), (530, 0.5), (1200, 0.5), (1250, 1.0)]
    return PowerProfile(tuple((60.0 * m, p) for m, p in minutes), ramp_rate=1.0)


def _draw_schedule(spec: ScenarioSpec, n_ramps: int, rng: SplitMix64):
    """One attempt at a schedule; returns breakpoints or None when infeasible."""
    p0 = spec.initial_power
    top = int(round(100 * p0)) - 5
    bottom = int(math.ceil(100 * spec.power_floor - 1e-9))
    if n_ramps and top < bottom:
        return None
    levels = [rng.integer(bottom, top) / 100.0 for _ in range(n_ramps)]
    ramp_s = [100.0 * (p0 - lv) / spec.ramp_rate * 60.0 for lv in levels]
    slack = spec.horizon_s - 2.0 * sum(ramp_s)
    if slack < 60.0 * (2 * n_ramps + 1):
        return None
    # dwell before each down ramp, at each low level, and a tail hold
    weights = [0.05 + rng.uniform() for _ in range(2 * n_ramps + 1)]
    scale = slack / sum(weights)
    dwell = [60.0 * math.floor(w * scale / 60.0) for w in weights]
    bps = [(0.0, p0)]
    t = 0.0
    for i, (lv, r) in enumerate(zip(levels, ramp_s)):
        t += dwell[2 * i]
        if t > 0.0:
            bps.append((t, p0))
        t += r
        bps.append((t, lv))
        t += dwell[2 * i + 1]
        bps.append((t, lv))
        t += r
        bps.append((t, p0))
    # merge zero-length dwells so times stay strictly increasing
    out = [bps[0]]
    for tb, pb in bps[1:]:
        if tb <= out[-1][0]:
            out[-1] = (out[-1][0], pb)
        else:
            out.append((tb, pb))
    return tuple(out)


def generate_profile(spec: ScenarioSpec, max_retries: int = 10) -> PowerProfile:
    """Deterministic load-following profile made of down/up ramp pairs.

    Levels are whole percents in ``[power_floor, initial_power - 5 %]``; every
    pair returns to ``initial_power``. Dwell times are whole minutes. When
    the ramps do not fit in the horizon the schedule is redrawn with one
    fewer ramp pair.
    """
    rng = SplitMix64(spec.seed)
    n = spec.n_ramps
    for _ in range(max_retries + 1):
        bps = _draw_schedule(spec, n, rng)
        if bps is not None:
            return PowerProfile(bps, ramp_rate=spec.ramp_rate)
        n = max(n - 1, 0)
    raise GenerationError(f"no feasible schedule for seed {spec.seed} after {max_retries} retries")


# -- normalization -------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Per-component min-max scaling fitted on the training corpus.

    Components that never move in the data get a unit-wide band centred on
    their value, so ``hi > lo`` always holds.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DomainError("lo and hi must be equal-length vectors")
        if not np.all(hi > lo):
            raise DomainError("normalizer needs hi > lo for every component")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def fit(cls, states: np.ndarray) -> "Normalizer":
        states = np.asarray(states, dtype=float)
        lo, hi = states.min(axis=0), states.max(axis=0)
        flat = hi - lo <= 1e-12 * np.maximum(1.0, np.abs(lo))
        lo = np.where(flat, lo - 0.5, lo)
        hi = np.where(flat, hi + 0.5, hi)
        return cls(lo, hi)

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / self.span

    def inverse(self, z):
        return self.lo + np.asarray(z, dtype=float) * self.span

    def to_kv(self) -> str:
        values = {f"min_{i}": float(v) for i, v in enumerate(self.lo)}
        values.update({f"max_{i}": float(v) for i, v in enumerate(self.hi)})
        return format_kv(values)

    @classmethod
    def from_kv(cls, text: str) -> "Normalizer":
        kv = parse_kv(text)
        n = len(kv) // 2
        expected = {f"min_{i}" for i in range(n)} | {f"max_{i}" for i in range(n)}
        if set(kv) != expected:
            raise DomainError("normalizer file must hold exactly min_i and max_i keys")
        return cls(np.array([float(kv[f"min_{i}"]) for i in range(n)]),
                   np.array([float(kv[f"max_{i}"]) for i in range(n)]))

    def digest(self) -> str:
        return hashlib.sha256(self.to_kv().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_kv())

    @classmethod
    def load(cls, path) -> "Normalizer":
        return cls.from_kv(Path(path).read_text())


# -- corpus --------------------------------------------------------------------


@dataclass
class Corpus:
    train: list
    test: list
    normalizer: Normalizer
    specs: dict  # seed -> ScenarioSpec

    def save(self, out_dir, c: PlantConstants = DEFAULT_CONSTANTS) -> Path:
        """Write trajectories, ``manifest.csv`` and ``normalizer.kv`` under ``out_dir``."""
        out = Path(out_dir)
        rows = []
        for split, trajs in (("train", self.train), ("test", self.test)):
            (out / split).mkdir(parents=True, exist_ok=True)
            for tr in trajs:
                seed = tr.meta["seed"]
                rel = f"{split}/scenario_{seed}.jsonl"
                tr.to_jsonl(out / rel, spec=self.specs[seed].to_json(), c=c)
                rows.append({"seed": seed, "file": rel, "provenance": tr.provenance,
                             "n_samples": len(tr)})
        with open(out / "manifest.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        self.normalizer.save(out / "normalizer.kv")
        return out

    @classmethod
    def load(cls, corpus_dir) -> "Corpus":
        root = Path(corpus_dir)
        manifest = root / "manifest.csv"
        if not manifest.exists():
            raise CorpusError(f"{manifest} not found")
        train, test, specs = [], [], {}
        with open(manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                tr = Trajectory.from_jsonl(root / row["file"])
                if len(tr) != int(row["n_samples"]):
                    raise CorpusError(f"{row['file']}: manifest says {row['n_samples']} samples")
                seed = int(row["seed"])
                tr.meta["seed"] = seed
                if "spec" in tr.meta:
                    specs[seed] = ScenarioSpec(**tr.meta["spec"])
                (train if row["file"].startswith("train/") else test).append(tr)
        return cls(train, test, Normalizer.load(root / "normalizer.kv"), specs)


def scenario_seeds(base_seed: int, count: int) -> list[int]:
    rng = SplitMix64(base_seed)
    return [rng.next_u64() >> 1 for _ in range(count)]  # 63-bit keeps JSON/CSV readers happy


def simulate_scenario(spec: ScenarioSpec, cfg: SolverConfig = SolverConfig(),
                      c: PlantConstants = DEFAULT_CONSTANTS):
    """Reference trajectory of one scenario from its equilibrium initial state."""
    profile = generate_profile(spec)
    x0 = equilibrium_state(spec.initial_power, c)
    traj, stats = integrate_reference(x0, profile, spec.horizon_s, SAMPLE_DT_S, cfg, c)
    traj.meta.update(seed=spec.seed, wall_clock_s=stats.wall_clock_s)
    return traj, stats


def build_corpus(n_train: int = 32, n_test: int = 8, base_seed: int = 0,
                 cfg: SolverConfig = SolverConfig(), c: PlantConstants = DEFAULT_CONSTANTS,
                 horizon_s: float = 86400.0, out_dir=None, progress=None) -> Corpus:
    """Integrate ``n_train + n_test`` scenarios and fit the normalizer on train only.

    The split is by whole trajectory: the first ``n_train`` seeds train, the
    rest test. Failed integrations are skipped; more than 10 % failures
    raise :class:`CorpusError`.
    """
    if n_train < 1 or n_test < 1:
        raise DomainError("need at least one train and one test scenario")
    seeds = scenario_seeds(base_seed, n_train + n_test)
    specs, train, test, failed = {}, [], [], []
    for i, seed in enumerate(seeds):
        spec = scenario_for_seed(seed, horizon_s=horizon_s)
        specs[seed] = spec
        try:
            traj, _ = simulate_scenario(spec, cfg, c)
            traj.check_invariants()
        except (IntegrationError, DomainError) as exc:
            log.warning("scenario %d skipped: %s", seed, exc)
            failed.append(seed)
            continue
        (train if i < n_train else test).append(traj)
        if progress is not None:
            progress(i + 1, len(seeds))
    if len(failed) > 0.1 * len(seeds):
        raise CorpusError(f"{len(failed)} of {len(seeds)} scenarios failed")
    if not train or not test:
        raise CorpusError("a split ended up empty")
    norm = Normalizer.fit(np.concatenate([t.states for t in train]))
    corpus = Corpus(train, test, norm, specs)
    if out_dir is not None:
        corpus.save(out_dir, c)
    return corpus


def slice_supervised(traj: Trajectory, n_block: int):
    """Block-forecast samples ``x(t) ++ p(t+dt..t+N dt) -> x(t+dt) .. x(t+N dt)``.

    Returns ``(features, targets)`` with shapes ``(K - N, 20 + N)`` and
    ``(K - N, 20 N)`` where ``K`` is the trajectory length.
    """
    if n_block < 1:
        raise DomainError("n_block must be >= 1")
    k = len(traj)
    if k < n_block + 1:
        raise DomainError(f"trajectory of length {k} too short for blocks of {n_block}")
    m = k - n_block
    p = traj.p_turb
    idx = np.arange(m)[:, None] + np.arange(1, n_block + 1)[None, :]
    features = np.concatenate([traj.states[:m], p[idx]], axis=1)
    targets = traj.states[idx].reshape(m, -1)
    return features, targets

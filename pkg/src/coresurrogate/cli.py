"""Command-line entry point: ``coresurrogate <subcommand> ...``.

Subcommands:

* ``gen``        integrate a train/test corpus of random load-follow scenarios
* ``simulate``   one reference run (``--fig3`` or ``--profile FILE``)
* ``train-pinn`` fit the attention flux surrogate on a corpus
* ``train-gbt``  fit the boosted block forecaster on a corpus
* ``rollout``    24 h surrogate rollout of one scenario (pinn, gbt or quasistatic)
* ``bench``      compare all methods on the test split and write the report
* ``constants``  print the active plant constants

Config files are ``key = value`` text. Usage errors exit with status 2; every
other failure prints a message and exits with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench as bench_mod
from .dataset import Corpus, build_corpus, fig3_profile
from .gbt import GbtConfig, GradientBoostedEnsemble, recursive_rollout, train_gbt
from .gbt import load_config as load_gbt_config
from .integrators import SolverConfig, integrate_reference
from .kvconfig import load_dataclass
from .pinn import PinnConfig, PinnModel, QuasiStaticOracle, hybrid_rollout, train_pinn
from .pinn import load_config as load_pinn_config
from .plant import DEFAULT_CONSTANTS, PlantConstants, PowerProfile, equilibrium_state
from .trajectory import Trajectory

PINN_FILE = "pinn.ckpt"
GBT_FILE = "gbt.json"


def _constants(args) -> PlantConstants:
    if getattr(args, "constants", None):
        return load_dataclass(PlantConstants, args.constants)
    return DEFAULT_CONSTANTS


def _solver(args) -> SolverConfig:
    if getattr(args, "solver", None):
        return load_dataclass(SolverConfig, args.solver)
    return SolverConfig()


def _print_progress(label):
    def report(*values):
        print(label, *values, flush=True)
    return report


def cmd_gen(args) -> int:
    corpus = build_corpus(args.train, args.test, args.seed, _solver(args), _constants(args),
                          horizon_s=args.horizon, out_dir=args.out,
                          progress=_print_progress("scenario"))
    print(f"wrote {len(corpus.train)} train + {len(corpus.test)} test trajectories to {args.out}")
    return 0


def _load_profile(path) -> PowerProfile:
    obj = json.loads(Path(path).read_text())
    return PowerProfile.from_json(obj.get("profile", obj))


def cmd_simulate(args) -> int:
    c = _constants(args)
    profile = fig3_profile() if args.fig3 else _load_profile(args.profile)
    x0 = equilibrium_state(profile(0.0), c)
    traj, stats = integrate_reference(x0, profile, args.horizon, cfg=_solver(args), c=c)
    traj.to_jsonl(args.out, c=c)
    print(f"{len(traj)} samples written to {args.out}; "
          f"{stats.steps_accepted} steps in {stats.wall_clock_s:.3f} s")
    return 0


def cmd_train_pinn(args) -> int:
    cfg = load_pinn_config(args.config) if args.config else PinnConfig()
    if args.seed is not None:
        cfg = PinnConfig.from_kv(f"seed = {args.seed}", base=cfg)
    corpus = Corpus.load(args.corpus)
    model, _ = train_pinn(corpus, cfg, _constants(args), log_path=Path(args.out).with_suffix(".log.csv"),
                          progress=_print_progress("epoch"))
    model.save(args.out)
    print(f"saved {model.parameter_count} parameters to {args.out}")
    return 0


def cmd_train_gbt(args) -> int:
    cfg = load_gbt_config(args.config) if args.config else GbtConfig()
    corpus = Corpus.load(args.corpus)
    ens = train_gbt(corpus, cfg, progress=_print_progress("round"))
    ens.save(args.out)
    print(f"saved {len(ens.trees)} trees to {args.out}")
    return 0


def _scenario(arg) -> Trajectory | PowerProfile:
    if arg == "fig3":
        return fig3_profile()
    return Trajectory.from_jsonl(arg)


def cmd_rollout(args) -> int:
    c = _constants(args)
    scen = _scenario(args.scenario)
    if isinstance(scen, Trajectory):
        profile, x0, ref = scen.profile, scen.states[0], scen
        horizon = float(scen.times[-1])
    else:
        profile, ref, horizon = scen, None, args.horizon
        x0 = equilibrium_state(profile(0.0), c)
    if args.method != "quasistatic" and not args.model:
        return _usage_error(f"--method {args.method} needs --model")
    if args.method == "pinn":
        model = PinnModel.load(args.model)
        traj, wall = hybrid_rollout(model, x0, profile, horizon, model.constants)
    elif args.method == "gbt":
        model = GradientBoostedEnsemble.load(args.model)
        traj, wall = recursive_rollout(model, x0, profile, horizon)
    else:
        traj, wall = hybrid_rollout(QuasiStaticOracle(c), x0, profile, horizon, c)
    if args.out:
        traj.to_jsonl(args.out, c=c)
    print(f"{args.method} rollout: {len(traj)} samples in {wall:.4f} s")
    if ref is not None and ref.provenance == "reference" and len(ref) == len(traj):
        print(f"mse_per_min_np = {bench_mod.mse_per_min_np(traj, ref)!r}")
    return 0


def cmd_bench(args) -> int:
    models = Path(args.models)
    missing = [str(models / f) for f in (PINN_FILE, GBT_FILE) if not (models / f).exists()]
    if not Path(args.corpus, "manifest.csv").exists():
        missing.append(str(Path(args.corpus, "manifest.csv")))
    if missing:
        print("missing artifacts:\n  " + "\n  ".join(missing), file=sys.stderr)
        return 1
    corpus = Corpus.load(args.corpus)
    pinn = PinnModel.load(models / PINN_FILE)
    gbt = GradientBoostedEnsemble.load(models / GBT_FILE)
    report = bench_mod.bench(corpus, pinn, gbt, args.out, cfg=_solver(args), c=pinn.constants,
                             progress=lambda seed, rows: print("scenario", seed, flush=True))
    print("scaled MSE x1e3 (mean over test scenarios)")
    print("method        " + "  ".join(f"{g:>8}" for g in bench_mod.GROUPS) + "   overall")
    for m in bench_mod.METHODS[1:]:
        vals = [report.scaled_mse[m][g][0] for g in bench_mod.GROUPS + ("overall",)]
        print(f"{m:<13} " + "  ".join(f"{v:8.3g}" for v in vals))
    for m, s in report.speedup.items():
        print(f"speedup {m}: {s:.1f}x (published {bench_mod.PUBLISHED_SPEEDUP:.0f}x)")
    print(f"report written to {args.out}")
    return 0


def cmd_constants(args) -> int:
    print(_constants(args).to_kv(), end="")
    return 0


def _usage_error(msg: str) -> int:
    print(f"coresurrogate: error: {msg}", file=sys.stderr)
    return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coresurrogate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    def plant_opts(p, solver=False):
        p.add_argument("--constants", help="key=value file overriding plant constants")
        if solver:
            p.add_argument("--solver", help="key=value file overriding reference solver settings")

    p = sub.add_parser("gen", help="generate a train/test corpus")
    p.add_argument("--train", type=int, default=32)
    p.add_argument("--test", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=86400.0, help="seconds per scenario")
    p.add_argument("--out", required=True, help="corpus directory")
    plant_opts(p, solver=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="one reference run")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--fig3", action="store_true", help="canonical daily load-follow profile")
    src.add_argument("--profile", help="JSON file with a 'breakpoints' list of [t_s, p]")
    p.add_argument("--horizon", type=float, default=86400.0)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the run is deterministic")
    p.add_argument("--out", required=True, help="output JSONL trajectory")
    plant_opts(p, solver=True)
    p.set_defaults(func=cmd_simulate)

    for name, fn, what in (("train-pinn", cmd_train_pinn, "attention flux surrogate"),
                           ("train-gbt", cmd_train_gbt, "boosted block forecaster")):
        p = sub.add_parser(name, help=f"train the {what}")
        p.add_argument("--corpus", required=True)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=True, help="model file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        plant_opts(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("rollout", help="surrogate rollout of one scenario")
    p.add_argument("--method", choices=("pinn", "gbt", "quasistatic"), required=True)
    p.add_argument("--model", help="model file (not needed for quasistatic)")
    p.add_argument("--scenario", required=True, help="trajectory JSONL file or 'fig3'")
    p.add_argument("--horizon", type=float, default=86400.0, help="used with 'fig3'")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; rollouts are deterministic")
    p.add_argument("--out", help="output JSONL trajectory")
    plant_opts(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("bench", help="benchmark all methods on the test split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--models", required=True, help=f"directory holding {PINN_FILE} and {GBT_FILE}")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the benchmark is deterministic")
    plant_opts(p, solver=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("constants", help="print the active plant constants")
    plant_opts(p)
    p.set_defaults(func=cmd_constants)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage text on bad input
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # report any failure as a one-line message
        print(f"coresurrogate {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Session-wide desk-scale artifacts: a 32/8 corpus, trained surrogates and one benchmark run.

They are built once per session in a temporary directory. Setting
``CORESURROGATE_DESK_DIR`` keeps them in that directory instead and reuses
whatever is already there, which shortens repeated local runs.
"""
import os
import time
from pathlib import Path

import pytest

from coresurrogate.bench import bench
from coresurrogate.dataset import Corpus, build_corpus
from coresurrogate.gbt import GradientBoostedEnsemble, recursive_rollout, train_gbt
from coresurrogate.pinn import PinnConfig, PinnModel, read_log, train_pinn

N_TRAIN, N_TEST, BASE_SEED = 32, 8, 0


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    env = os.environ.get("CORESURROGATE_DESK_DIR")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def desk_corpus(desk_dir):
    out = desk_dir / "corpus"
    if (out / "manifest.csv").exists():
        return Corpus.load(out)
    return build_corpus(N_TRAIN, N_TEST, base_seed=BASE_SEED, out_dir=out)


@pytest.fixture(scope="session")
def trained_pinn(desk_corpus, desk_dir):
    """(model, training log, training seconds) for the default configuration."""
    path, timing = desk_dir / "pinn.ckpt", desk_dir / "pinn_seconds.txt"
    if path.exists() and timing.exists():
        return PinnModel.load(path), read_log(desk_dir / "pinn_log.csv"), float(timing.read_text())
    t0 = time.perf_counter()
    model, log = train_pinn(desk_corpus, PinnConfig(), log_path=desk_dir / "pinn_log.csv")
    seconds = time.perf_counter() - t0
    model.save(path)
    timing.write_text(repr(seconds))
    return model, log, seconds


@pytest.fixture(scope="session")
def trained_gbt(desk_corpus, desk_dir):
    path = desk_dir / "gbt.json"
    if path.exists():
        return GradientBoostedEnsemble.load(path)
    ens = train_gbt(desk_corpus)
    ens.save(path)
    return ens


@pytest.fixture(scope="session")
def gbt_test_rollouts(trained_gbt, desk_corpus):
    """(prediction, stored reference) for every test scenario."""
    pairs = []
    for ref in desk_corpus.test:
        pred, _ = recursive_rollout(trained_gbt, ref.states[0], ref.profile, float(ref.times[-1]))
        pairs.append((pred, ref))
    return pairs


@pytest.fixture(scope="session")
def desk_report(desk_corpus, trained_pinn, trained_gbt, desk_dir):
    """(MetricsReport, report directory) from one benchmark over the test split."""
    out = desk_dir / "report"
    return bench(desk_corpus, trained_pinn[0], trained_gbt, out), out


_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(ok, detail)``; printed in the terminal summary."""
    def record(ok: bool, detail: str) -> bool:
        _CRITERIA.append((request.node.name, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

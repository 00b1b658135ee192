"""Gradient-boosted multi-output regression trees for block forecasting.

One ensemble maps the current normalized state and the next ``N`` turbine
demands to the next ``N`` normalized states (all ``20 N`` values at once).
Every tree has vector-valued leaves, so a split is scored by the variance
reduction summed over all outputs. Boosting fits squared-loss residuals:
round ``m`` adds ``learning_rate * tree_m(x)`` to the running prediction.

File format (JSON, field order as written)::

    {"version": 1, "config": {...}, "feature_layout": {"state": 20, "power": N},
     "normalizer": "<key=value text>", "normalizer_digest": "...",
     "degenerate": false, "base": [...], "fit_log": [...],
     "trees": [{"feature": [...], "threshold": [...], "left": [...],
                "right": [...], "value": [[...], ...]}, ...]}

Internal nodes have ``left``/``right`` child indices; leaves have ``-1`` and
feature ``-1``. Samples with ``x[feature] <= threshold`` go left.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._gbt_kernels import split_gains
from .dataset import SAMPLE_DT_S, Normalizer, slice_supervised
from .errors import ConfigError, DomainError, ModelError, ShapeError
from .kvconfig import dataclass_from_kv, dataclass_to_kv
from .plant import PowerProfile
from .trajectory import Trajectory

GBT_VERSION = 1
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class GbtConfig:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 6
    min_samples_leaf: int = 5
    n_block: int = 10
    delta: bool = False
    sample_stride: int = 5

    def __post_init__(self):
        if self.n_rounds < 0:
            raise ConfigError("n_rounds must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if self.max_depth < 0 or self.min_samples_leaf < 1 or self.n_block < 1 or self.sample_stride < 1:
            raise ConfigError("max_depth >= 0, min_samples_leaf >= 1, n_block >= 1, sample_stride >= 1")

    def to_kv(self) -> str:
        return dataclass_to_kv(self)

    @classmethod
    def from_kv(cls, text: str, base: "GbtConfig | None" = None) -> "GbtConfig":
        return dataclass_from_kv(cls, text, base=base)


@dataclass
class RegressionTree:
    feature: np.ndarray     # (n_nodes,) int, -1 at leaves
    threshold: np.ndarray   # (n_nodes,) float
    left: np.ndarray        # (n_nodes,) int, -1 at leaves
    right: np.ndarray       # (n_nodes,) int, -1 at leaves
    value: np.ndarray       # (n_nodes, n_out); meaningful at leaves
    max_depth: int = 0
    min_samples_leaf: int = 1

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = X[rows, np.where(inner, f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_json(cls, obj: dict, max_depth: int = 0, min_samples_leaf: int = 1) -> "RegressionTree":
        return cls(np.asarray(obj["feature"], dtype=int), np.asarray(obj["threshold"], dtype=float),
                   np.asarray(obj["left"], dtype=int), np.asarray(obj["right"], dtype=int),
                   np.asarray(obj["value"], dtype=float).reshape(len(obj["feature"]), -1),
                   max_depth, min_samples_leaf)


def best_split(X: np.ndarray, Y: np.ndarray, min_samples_leaf: int, order: np.ndarray | None = None):
    """Greedy best split of one node.

    Args:
        X: (n, p) features. Y: (n, m) targets.
        order: optional (p, n) per-feature stable argsort of ``X`` rows.

    Returns:
        ``(feature, threshold, gain)`` maximizing the summed-over-outputs SSE
        reduction, or ``None`` when no admissible split reduces it. Gains
        within ``TIE_RTOL`` of the best (relative to the node SSE) count as
        ties, resolved by lowest feature index, then lowest threshold.
    """
    n, p = X.shape
    if order is None:
        order = np.argsort(X, axis=0, kind="stable").T
    Yc = Y - Y.mean(axis=0)
    sse = float(np.einsum("ij,ij->", Yc, Yc))
    if n < 2 * min_samples_leaf or sse <= 0.0:
        return None
    gains = split_gains(X, Yc, np.ascontiguousarray(order), min_samples_leaf)
    scored = []  # (feature, gains, thresholds) for every feature with a valid split
    for f in range(p):
        if np.isfinite(gains[f]).any():
            scored.append((f, gains[f], X[order[f][:-1], f]))
    if not scored:
        return None
    top = max(float(g.max()) for _, g, _ in scored)
    if top <= TIE_RTOL * sse:
        return None
    for f, gain, xs in scored:
        tied = np.flatnonzero(gain >= top - TIE_RTOL * sse)
        if tied.size:
            k = int(tied[np.argmin(xs[tied])])
            return f, float(xs[k]), float(gain[k])


def fit_tree(X: np.ndarray, Y: np.ndarray, max_depth: int = 6, min_samples_leaf: int = 5,
             order: np.ndarray | None = None) -> RegressionTree:
    """Grow a vector-leaf regression tree depth-first with greedy exact splits."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ShapeError(f"features {X.shape} and targets {Y.shape} differ in sample count")
    if n < 2 * min_samples_leaf:
        raise DomainError(f"need at least {2 * min_samples_leaf} samples, got {n}")
    if order is None:
        order = np.argsort(X, axis=0, kind="stable").T
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(Y[rows].mean(axis=0))
        return len(feature) - 1

    root_rows = np.arange(n)
    stack = [(new_node(root_rows), root_rows, order, 0)]
    while stack:
        node, rows, ord_node, depth = stack.pop()
        if depth >= max_depth:
            continue
        # ord_node holds positions into ``rows``, sorted per feature
        split = best_split(X[rows], Y[rows], min_samples_leaf, ord_node)
        if split is None:
            continue
        f, thr, _ = split
        go_left = X[rows, f] <= thr
        # stable partition of the per-feature orders
        pos_l = np.cumsum(go_left) - 1
        pos_r = np.cumsum(~go_left) - 1
        keep_l = go_left[ord_node]
        ord_l = pos_l[ord_node[keep_l].reshape(ord_node.shape[0], -1)]
        ord_r = pos_r[ord_node[~keep_l].reshape(ord_node.shape[0], -1)]
        rows_l, rows_r = rows[go_left], rows[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(rows_l)
        right[node] = new_node(rows_r)
        stack.append((right[node], rows_r, ord_r, depth + 1))
        stack.append((left[node], rows_l, ord_l, depth + 1))
    return RegressionTree(np.array(feature, dtype=int), np.array(threshold, dtype=float),
                          np.array(left, dtype=int), np.array(right, dtype=int),
                          np.array(value, dtype=float), max_depth, min_samples_leaf)


def _leaf_tree(mean: np.ndarray) -> RegressionTree:
    return RegressionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                          mean[None, :].copy())


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class GradientBoostedEnsemble:
    config: GbtConfig
    base: np.ndarray
    trees: list
    normalizer: Normalizer
    fit_log: list = field(default_factory=list)
    degenerate: bool = False

    @property
    def n_features(self) -> int:
        return self.normalizer.lo.size + self.config.n_block

    @property
    def n_state(self) -> int:
        return self.normalizer.lo.size

    def truncated(self, n_rounds: int) -> "GradientBoostedEnsemble":
        """The same ensemble keeping only its first ``n_rounds`` trees."""
        if n_rounds < 0:
            raise ConfigError("n_rounds must be >= 0")
        return GradientBoostedEnsemble(self.config, self.base, self.trees[:n_rounds],
                                       self.normalizer, self.fit_log[:n_rounds + 1],
                                       self.degenerate)

    def _stacked(self):
        # all trees padded to a common node count, routed together
        cache = getattr(self, "_stack_cache", None)
        if cache is not None and cache[0] == len(self.trees):
            return cache[1]
        t, m = len(self.trees), self.base.size
        width = max((tr.n_nodes for tr in self.trees), default=1)
        feat = np.full((t, width), -1, dtype=int)
        thr = np.zeros((t, width))
        lft = np.full((t, width), -1, dtype=int)
        rgt = np.full((t, width), -1, dtype=int)
        val = np.zeros((t, width, m))
        for i, tr in enumerate(self.trees):
            k = tr.n_nodes
            feat[i, :k], thr[i, :k], lft[i, :k], rgt[i, :k], val[i, :k] = (
                tr.feature, tr.threshold, tr.left, tr.right, tr.value)
        stacked = (feat, thr, lft, rgt, val)
        self._stack_cache = (len(self.trees), stacked)
        return stacked

    def predict_features(self, F: np.ndarray) -> np.ndarray:
        """Raw model output (normalized block, or block deltas in delta mode) for rows of ``F``."""
        F = np.asarray(F, dtype=float)
        single = F.ndim == 1
        F = np.atleast_2d(F)
        if F.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {F.shape[1]}")
        out = np.tile(self.base, (F.shape[0], 1))
        if self.trees:
            feat, thr, lft, rgt, val = self._stacked()
            t = feat.shape[0]
            tix = np.arange(t)[:, None]
            node = np.zeros((t, F.shape[0]), dtype=int)
            rows = np.arange(F.shape[0])[None, :]
            while True:
                f = feat[tix, node]
                inner = f >= 0
                if not inner.any():
                    break
                go_left = F[rows, np.where(inner, f, 0)] <= thr[tix, node]
                node = np.where(inner, np.where(go_left, lft[tix, node], rgt[tix, node]), node)
            out = out + self.config.learning_rate * val[tix, node].sum(axis=0)
        return out[0] if single else out

    def to_json(self) -> dict:
        return {"version": GBT_VERSION, "config": asdict(self.config),
                "feature_layout": {"state": self.n_state, "power": self.config.n_block},
                "normalizer": self.normalizer.to_kv(), "normalizer_digest": self.normalizer.digest(),
                "degenerate": self.degenerate, "base": self.base.tolist(), "fit_log": self.fit_log,
                "trees": [t.to_json() for t in self.trees]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "GradientBoostedEnsemble":
        obj = json.loads(Path(path).read_text())
        if "version" not in obj:
            raise ModelError(f"{path}: ensemble file lacks a version field")
        if obj["version"] != GBT_VERSION:
            raise ModelError(f"{path}: unsupported ensemble version {obj['version']}")
        cfg = GbtConfig(**obj["config"])
        norm = Normalizer.from_kv(obj["normalizer"])
        if norm.digest() != obj["normalizer_digest"]:
            raise ModelError(f"{path}: normalizer digest mismatch")
        trees = [RegressionTree.from_json(t, cfg.max_depth, cfg.min_samples_leaf) for t in obj["trees"]]
        return cls(cfg, np.asarray(obj["base"], dtype=float), trees, norm, obj["fit_log"],
                   bool(obj["degenerate"]))


def supervised_arrays(trajectories, normalizer: Normalizer, cfg: GbtConfig):
    """Normalized (features, targets) pooled over trajectories, every ``sample_stride``-th start."""
    feats, targs = [], []
    n_state = normalizer.lo.size
    for traj in trajectories:
        F, T = slice_supervised(traj, cfg.n_block)
        F, T = F[:: cfg.sample_stride], T[:: cfg.sample_stride]
        Fn = np.concatenate([normalizer.transform(F[:, :n_state]), F[:, n_state:]], axis=1)
        Tn = normalizer.transform(T.reshape(-1, cfg.n_block, n_state)).reshape(T.shape)
        if cfg.delta:
            Tn = Tn - np.tile(Fn[:, :n_state], cfg.n_block)
        feats.append(Fn)
        targs.append(Tn)
    return np.concatenate(feats), np.concatenate(targs)


def fit_boosted(features: np.ndarray, targets: np.ndarray, normalizer: Normalizer,
                cfg: GbtConfig = GbtConfig(), progress=None) -> GradientBoostedEnsemble:
    """Squared-loss boosting: each round fits a tree to the current residuals.

    ``fit_log[m]`` is the training MSE after ``m`` rounds (entry 0 is the base
    prediction alone).
    """
    X = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] == 0:
        raise ShapeError(f"need non-empty aligned 2-D features/targets, got {X.shape}, {Y.shape}")
    base = Y.mean(axis=0)
    pred = np.tile(base, (X.shape[0], 1))
    log = [float(np.mean((Y - pred) ** 2))]
    ens = GradientBoostedEnsemble(cfg, base, [], normalizer, log)
    if X.shape[0] > 1 and np.all(X.max(axis=0) == X.min(axis=0)):
        ens.degenerate = True
        return ens
    order = np.argsort(X, axis=0, kind="stable").T
    for m in range(cfg.n_rounds):
        resid = Y - pred
        if X.shape[0] >= 2 * cfg.min_samples_leaf:
            tree = fit_tree(X, resid, cfg.max_depth, cfg.min_samples_leaf, order)
        else:
            tree = _leaf_tree(resid.mean(axis=0))
        pred = pred + cfg.learning_rate * tree.predict(X)
        ens.trees.append(tree)
        log.append(float(np.mean((Y - pred) ** 2)))
        if progress:
            progress(m + 1, log[-1])
    return ens


def train_gbt(corpus, cfg: GbtConfig = GbtConfig(), progress=None) -> GradientBoostedEnsemble:
    X, Y = supervised_arrays(corpus.train, corpus.normalizer, cfg)
    return fit_boosted(X, Y, corpus.normalizer, cfg, progress)


def predict_block(ensemble: GradientBoostedEnsemble, state, power_block) -> np.ndarray:
    """Next ``N`` physical states from the current physical state and the next ``N`` demands."""
    state = np.asarray(state, dtype=float)
    power_block = np.asarray(power_block, dtype=float)
    cfg, norm = ensemble.config, ensemble.normalizer
    if state.shape != (ensemble.n_state,):
        raise ShapeError(f"state must have {ensemble.n_state} components, got {state.shape}")
    if power_block.shape != (cfg.n_block,):
        raise ShapeError(f"power block must have {cfg.n_block} values, got {power_block.shape}")
    z0 = norm.transform(state)
    out = ensemble.predict_features(np.concatenate([z0, power_block]))
    block = out.reshape(cfg.n_block, -1)
    if cfg.delta:
        block = block + z0
    return norm.inverse(block)


def _clip_state(x: np.ndarray, n_z: int) -> np.ndarray:
    x[..., : 3 * n_z] = np.maximum(x[..., : 3 * n_z], 0.0)
    x[..., 3 * n_z + 1] = np.clip(x[..., 3 * n_z + 1], 0.0, 1.0)
    return x


def recursive_rollout(ensemble: GradientBoostedEnsemble, x0, profile: PowerProfile,
                      horizon_s: float = 86400.0, dt_s: float = SAMPLE_DT_S):
    """Chain block predictions over the horizon; the last state of a block seeds the next.

    Predicted concentrations are clipped at zero and the rod position to [0, 1]
    so every emitted state lies in the state domain.
    """
    cfg = ensemble.config
    block_s = cfg.n_block * dt_s
    n_calls = horizon_s / block_s
    if n_calls < 1 or abs(n_calls - round(n_calls)) > 1e-9:
        raise DomainError(f"horizon {horizon_s} s is not a multiple of {block_s} s")
    n_calls = int(round(n_calls))
    steps = n_calls * cfg.n_block
    times = dt_s * np.arange(steps + 1)
    p = profile(times)
    n_z = (ensemble.n_state - 2) // 3
    out = np.empty((steps + 1, ensemble.n_state))
    out[0] = np.asarray(x0, dtype=float)
    t0 = time.perf_counter()
    for b in range(n_calls):
        k = b * cfg.n_block
        block = predict_block(ensemble, out[k], p[k + 1:k + 1 + cfg.n_block])
        if not np.all(np.isfinite(block)):
            raise ModelError(f"non-finite state predicted in block {b}")
        out[k + 1:k + 1 + cfg.n_block] = _clip_state(block, n_z)
    wall = time.perf_counter() - t0
    meta = {"ensemble_calls": n_calls, "wall_clock_s": wall}
    return Trajectory(times, out, profile, "gbt-rollout", meta), wall


def load_config(path, base: GbtConfig = GbtConfig()) -> GbtConfig:
    return GbtConfig.from_kv(Path(path).read_text(), base=base)

"""Physics-informed attention surrogate for the flux block and the hybrid rollout driver.

The model maps a window of past states (plus turbine demand) and the slow
components of the next step to the next flux vector::

    tokens  (b, W, 3 n_z + 3)   normalized state ++ p_turb, oldest first
    query   (b, 2 n_z + 3)      normalized slow block of the target step ++ p_turb
    n_last  (b, n_z)            flux of the newest window state
    ->      (b, n_z)            predicted flux, strictly positive

Encoder layers are post-LN (``x = LN(x + sublayer(x))``). The decoder embeds the
query, cross-attends to the encoder output once, applies a feed-forward block
and a linear head. The positive output map is a relative correction of a
base flux, ``n = base * softplus(z + log(e - 1))``, so a zero head output
returns the base. The base is the demanded power ``p`` of the target step on
every mesh point (``skip_base = "power"``) or the newest flux ``n_last``
(``skip_base = "last"``). The demand is exogenous, so with the power base a
prediction error never becomes the reference for the next step.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, Tape, Tensor, fused_multi_head_attention, ops
from .autodiff.checkpoint import load_checkpoint, params_digest, save_checkpoint
from .dataset import Corpus, Normalizer
from .errors import ConfigError, DomainError, ModelError, NonFiniteError, ShapeError
from .integrators import advance_nonstiff
from .kvconfig import dataclass_from_kv, dataclass_to_kv
from .plant import DEFAULT_CONSTANTS, PlantConstants, PowerProfile, _Kernel, solve_quasistatic_flux
from .trajectory import Trajectory

FLUX_FLOOR = 1e-12
SKIP_SHIFT = math.log(math.e - 1.0)  # softplus(SKIP_SHIFT) == 1
SKIP_BASES = ("power", "last")
HEAD_INIT_SCALE = 0.1
LOG_HEADER = ("epoch", "loss_total", "loss_data", "loss_phys", "seconds")


@dataclass(frozen=True)
class PinnConfig:
    window: int = 30
    d_model: int = 32
    heads: int = 4
    encoder_layers: int = 2
    ffn_width: int = 64
    alpha_D: float = 1.0
    alpha_phi: float = 0.1
    alpha_boundary: float = 0.0
    lr: float = 1e-3
    lr_final: float = 1e-4
    epochs: int = 12
    batch_size: int = 64
    samples_per_epoch: int = 0
    history_noise: float = 0.0
    skip_base: str = "power"
    seed: int = 0

    def __post_init__(self):
        if self.alpha_boundary != 0.0:
            raise ConfigError("alpha_boundary is fixed at 0")
        if self.alpha_D < 0 or self.alpha_phi < 0 or (self.alpha_D == 0 and self.alpha_phi == 0):
            raise ConfigError("alpha_D and alpha_phi must be >= 0 and not both 0")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        for name in ("window", "d_model", "encoder_layers", "ffn_width", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.skip_base not in SKIP_BASES:
            raise ConfigError(f"skip_base must be one of {SKIP_BASES}")
        if self.history_noise < 0:
            raise ConfigError("history_noise must be >= 0")
        if self.epochs < 0 or self.samples_per_epoch < 0:
            raise ConfigError("epochs and samples_per_epoch must be >= 0")
        if not 0 < self.lr_final <= self.lr:
            raise ConfigError("need 0 < lr_final <= lr")

    def to_kv(self) -> str:
        return dataclass_to_kv(self)

    @classmethod
    def from_kv(cls, text: str, base: "PinnConfig | None" = None) -> "PinnConfig":
        return dataclass_from_kv(cls, text, base=base)


def positional_encoding(window: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding, sin on even and cos on odd feature columns."""
    pos = np.arange(window)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    pe = np.zeros((window, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: d_model // 2])
    return pe


def init_params(cfg: PinnConfig, n_z: int, seed: int | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    The output head starts at a tenth of the Glorot scale so an untrained
    model returns roughly the base flux.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, f = cfg.d_model, cfg.ffn_width
    n_tok, n_qry = 3 * n_z + 3, 2 * n_z + 3

    def glorot(a, b):
        lim = math.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, size=(a, b))

    p = {"embed.w": glorot(n_tok, d), "embed.b": np.zeros(d)}
    blocks = [f"enc{i}" for i in range(cfg.encoder_layers)] + ["dec"]
    for blk in blocks:
        for m in ("wq", "wk", "wv", "wo"):
            p[f"{blk}.{m}"] = glorot(d, d)
        p[f"{blk}.ff1.w"], p[f"{blk}.ff1.b"] = glorot(d, f), np.zeros(f)
        p[f"{blk}.ff2.w"], p[f"{blk}.ff2.b"] = glorot(f, d), np.zeros(d)
        for ln in ("ln1", "ln2"):
            p[f"{blk}.{ln}.g"], p[f"{blk}.{ln}.b"] = np.ones(d), np.zeros(d)
    p["query.w"], p["query.b"] = glorot(n_qry, d), np.zeros(d)
    p["head.w"], p["head.b"] = HEAD_INIT_SCALE * glorot(d, n_z), np.zeros(n_z)
    return p


def _block(P, prefix: str, x, kv, heads: int):
    h = fused_multi_head_attention(x, kv, heads, P[prefix + ".wq"], P[prefix + ".wk"],
                                   P[prefix + ".wv"], P[prefix + ".wo"])
    x = ops.layer_norm(ops.add(x, h), P[prefix + ".ln1.g"], P[prefix + ".ln1.b"])
    h = ops.linear(ops.relu(ops.linear(x, P[prefix + ".ff1.w"], P[prefix + ".ff1.b"])),
                   P[prefix + ".ff2.w"], P[prefix + ".ff2.b"])
    return ops.layer_norm(ops.add(x, h), P[prefix + ".ln2.g"], P[prefix + ".ln2.b"])


def forward(P: dict, cfg: PinnConfig, tokens, query, n_last) -> Tensor:
    """Tape-recordable forward pass; ``P`` maps parameter names to tensors."""
    tokens, query = np.asarray(tokens, float), np.asarray(query, float)
    n_last = np.asarray(n_last, float)
    b, w, _ = tokens.shape
    if w != cfg.window:
        raise ShapeError(f"expected a window of {cfg.window} tokens, got {tokens.shape}")
    if query.shape[0] != b or n_last.shape[0] != b:
        raise ShapeError(f"batch sizes differ: tokens {tokens.shape}, query {query.shape}, "
                         f"n_last {n_last.shape}")
    pe = positional_encoding(cfg.window, cfg.d_model)
    x = ops.add(ops.linear(Tensor(tokens), P["embed.w"], P["embed.b"]), Tensor(pe))
    for i in range(cfg.encoder_layers):
        x = _block(P, f"enc{i}", x, x, cfg.heads)
    q = ops.linear(Tensor(query[:, None, :]), P["query.w"], P["query.b"])
    y = _block(P, "dec", q, x, cfg.heads)
    z = ops.linear(y, P["head.w"], P["head.b"])
    z = ops.reshape(z, (b, n_last.shape[1]))
    base = Tensor(skip_base(cfg, n_last, query[:, -1]))
    return ops.add(ops.mul(base, ops.softplus(ops.add(z, SKIP_SHIFT))), FLUX_FLOOR)


def skip_base(cfg: PinnConfig, n_last: np.ndarray, p_next) -> np.ndarray:
    """Base flux of the positive output map, shaped like ``n_last``."""
    if cfg.skip_base == "power":
        return np.broadcast_to(np.asarray(p_next, float)[..., None], n_last.shape).copy()
    return np.maximum(n_last, FLUX_FLOOR)


def physics_residual(n_seq, nonstiff_seq, dt_s: float, c: PlantConstants = DEFAULT_CONSTANTS):
    """Lambda-scaled flux-equation residual with a backward-difference time derivative.

    Args:
        n_seq: flux sequence, shape (T, n_z) or (b, T, n_z); array or Tensor.
        nonstiff_seq: per-step (iodine, xenon, t_cl, x_bank, p_turb), shape
            (..., T, 2 n_z + 3), aligned with ``n_seq``.
        dt_s: sample spacing in seconds.

    Returns:
        Tensor of shape (..., T - 1, n_z); entry ``t`` is the residual at step ``t + 1``.
    """
    n = n_seq if isinstance(n_seq, Tensor) else Tensor(n_seq)
    ns = np.asarray(nonstiff_seq, dtype=float)
    nz = c.n_z
    if n.ndim not in (2, 3) or n.shape[-1] != nz:
        raise ShapeError(f"flux sequence must end in {nz} meshes, got {n.shape}")
    if ns.shape[:-1] != n.shape[:-1] or ns.shape[-1] != 2 * nz + 3:
        raise ShapeError(f"flux sequence {n.shape} and slow sequence {ns.shape} do not align")
    if n.shape[-2] < 2:
        raise ShapeError("physics residual needs sequences of length >= 2")
    if dt_s <= 0:
        raise DomainError("dt_s must be > 0")
    k = _Kernel.get(c)
    xenon, t_cl, x_bank = ns[..., nz:2 * nz], ns[..., 2 * nz:2 * nz + 1], ns[..., 2 * nz + 1:2 * nz + 2]
    # reactivity with the flux feedback removed; it is added back differentiably
    base = k.reactivity(1.0, xenon, t_cl, x_bank)[..., 1:, :]
    lead = (slice(None),) * (n.ndim - 2)
    cur, prev = lead + (slice(1, None), slice(None)), lead + (slice(None, -1), slice(None))
    n_cur, n_prev = ops.getitem(n, cur), ops.getitem(n, prev)
    rho = ops.add(Tensor(base - c.alpha_pow), ops.scale(n_cur, c.alpha_pow))
    lam = c.lambda_prompt
    r = ops.mul(rho, n_cur)
    r = ops.add(r, ops.scale(ops.matmul(n_cur, Tensor(k.lap)), lam * c.kappa))
    return ops.sub(r, ops.scale(ops.sub(n_cur, n_prev), lam / dt_s))


# ---------------------------------------------------------------------------
# supervised samples


@dataclass
class PinnBatch:
    tokens: np.ndarray       # (b, W, 3 n_z + 3) normalized
    query: np.ndarray        # (b, 2 n_z + 3) normalized slow block of the target ++ p
    n_last: np.ndarray       # (b, n_z) flux at the newest window step
    n_target: np.ndarray     # (b, n_z) reference flux at the target step
    slow_seq: np.ndarray     # (b, 2, 2 n_z + 3) physical slow block ++ p at (last, target)

    def __len__(self) -> int:
        return self.tokens.shape[0]


class WindowSampler:
    """All (window, target) pairs of a set of trajectories.

    Each trajectory is padded at the front with ``W - 1`` copies of its first
    state, matching the replicated warm-up used by the rollout.
    """

    def __init__(self, trajectories: Sequence[Trajectory], normalizer: Normalizer, window: int):
        if not trajectories:
            raise DomainError("no trajectories to sample from")
        self.window = window
        nz = trajectories[0].n_z
        self.n_z = nz
        toks, phys, index = [], [], []
        offset = 0
        for traj in trajectories:
            x, p = traj.states, traj.p_turb
            pad = window - 1
            xp = np.concatenate([np.repeat(x[:1], pad, axis=0), x])
            pp = np.concatenate([np.repeat(p[:1], pad), p])
            toks.append(np.concatenate([normalizer.transform(xp), pp[:, None]], axis=1))
            phys.append(np.concatenate([xp, pp[:, None]], axis=1))
            # target row r (in padded coordinates) has window rows r-W .. r-1
            index.append(offset + np.arange(window, xp.shape[0]))
            offset += xp.shape[0]
        self.tok = np.concatenate(toks)
        self.phys = np.concatenate(phys)
        self.targets = np.concatenate(index)
        self._norm_lo = normalizer.lo
        self._norm_span = normalizer.span

    def __len__(self) -> int:
        return self.targets.size

    def batch(self, rows: np.ndarray, rng: np.random.Generator | None = None,
              noise: float = 0.0) -> PinnBatch:
        """Assemble a batch; with ``noise > 0`` the flux history is perturbed.

        The perturbation is a log-normal factor per sample and mesh point,
        shared across the window and ``n_last``, so the model sees histories
        that disagree with the slow state and learns to pull the flux back.
        """
        r = self.targets[rows]
        nz = self.n_z
        win = r[:, None] + np.arange(-self.window, 0)[None, :]
        tokens = self.tok[win]
        query = self.tok[r][:, nz:]
        n_last = self.phys[r - 1, :nz]
        if noise > 0.0:
            factor = np.exp(noise * (rng.standard_normal((r.size, 1, 1))
                                     + 0.5 * rng.standard_normal((r.size, 1, nz))))
            flux = self.phys[win][..., :nz] * factor
            tokens[..., :nz] = (flux - self._norm_lo[:nz]) / self._norm_span[:nz]
            n_last = n_last * factor[:, 0, :]
        n_target = self.phys[r, :nz]
        slow_seq = np.stack([self.phys[r - 1, nz:], self.phys[r, nz:]], axis=1)
        return PinnBatch(tokens, query, n_last, n_target, slow_seq)


def pinn_loss(batch: PinnBatch, P: dict, cfg: PinnConfig, c: PlantConstants = DEFAULT_CONSTANTS,
              dt_s: float = 60.0):
    """Weighted data + physics loss; returns ``(total, L_D, L_phi)`` tensors."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    pred = forward(P, cfg, batch.tokens, batch.query, batch.n_last)
    l_data = ops.mean(ops.square(ops.sub(pred, Tensor(batch.n_target))))
    seq = ops.concat([Tensor(batch.n_last[:, None, :]), ops.reshape(pred, (len(batch), 1, c.n_z))],
                     axis=1)
    l_phys = ops.mean(ops.square(physics_residual(seq, batch.slow_seq, dt_s, c)))
    total = ops.add(ops.scale(l_data, cfg.alpha_D), ops.scale(l_phys, cfg.alpha_phi))
    return total, l_data, l_phys


# ---------------------------------------------------------------------------
# model


@dataclass
class PinnModel:
    config: PinnConfig
    params: dict
    normalizer: Normalizer
    constants: PlantConstants = DEFAULT_CONSTANTS

    @property
    def n_z(self) -> int:
        return self.constants.n_z

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self) -> dict:
        return {k: Tensor(v) for k, v in self.params.items()}

    def predict(self, tokens, query, n_last) -> np.ndarray:
        """Batched forward pass without recording."""
        return forward(self.tensors(), self.config, tokens, query, n_last).data

    def digest(self) -> str:
        return params_digest(self.params)

    def save(self, path) -> None:
        meta = {"kind": "pinn", "config": self.config.to_kv(), "normalizer": self.normalizer.to_kv(),
                "constants": self.constants.to_kv()}
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "PinnModel":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "pinn":
            raise ModelError(f"{path} is not a PINN checkpoint")
        return cls(PinnConfig.from_kv(meta["config"]), params, Normalizer.from_kv(meta["normalizer"]),
                   PlantConstants.from_kv(meta["constants"]))

    def engine(self, compiled: bool = True):
        """Incremental single-trajectory predictor used by the rollout."""
        return CompiledPinnEngine(self) if compiled else PinnEngine(self)


def _layer_norm(x, g, b, avg, eps=ops.LN_EPS):
    # ``avg`` is a (d, 1) column of 1/d: row means as one matmul
    xc = x - x @ avg
    return xc * (1.0 / np.sqrt((xc * xc) @ avg + eps)) * g + b


def _per_head(w: np.ndarray, heads: int) -> np.ndarray:
    """(d_in, heads*d_h) projection -> (heads, d_in, d_h) stack of head blocks."""
    d_in, d = w.shape
    return np.ascontiguousarray(w.reshape(d_in, heads, d // heads).transpose(1, 0, 2))


class PinnEngine:
    """Single-trajectory numpy inference with an incremental window.

    Raw token embeddings and the first encoder layer's per-head projections
    are computed once per token and kept in sliding buffers; the positional
    part of those projections is precomputed per window slot. Attention runs
    on head-major (h, s, d_h) stacks. Results agree with :func:`forward` to
    round-off.
    """

    def __init__(self, model: PinnModel):
        cfg, P = model.config, model.params
        self.cfg, self.nz = cfg, model.n_z
        self.lo, self.inv_span = model.normalizer.lo, 1.0 / model.normalizer.span
        d, h, w = cfg.d_model, cfg.heads, cfg.window
        self.h, self.dh = h, d // h
        scale = 1.0 / math.sqrt(self.dh)
        self.embed_w, self.embed_b = P["embed.w"], P["embed.b"]
        self.blocks = []
        for name in [f"enc{i}" for i in range(cfg.encoder_layers)] + ["dec"]:
            self.blocks.append({
                "wq": _per_head(P[f"{name}.wq"] * scale, h),
                "wkv": np.concatenate([_per_head(P[f"{name}.wk"], h), _per_head(P[f"{name}.wv"], h)]),
                "wo": np.ascontiguousarray(P[f"{name}.wo"].reshape(h, self.dh, d)),
                "f1w": P[f"{name}.ff1.w"], "f1b": P[f"{name}.ff1.b"],
                "f2w": P[f"{name}.ff2.w"], "f2b": P[f"{name}.ff2.b"],
                "g1": P[f"{name}.ln1.g"], "b1": P[f"{name}.ln1.b"],
                "g2": P[f"{name}.ln2.g"], "b2": P[f"{name}.ln2.b"]})
        first = self.blocks[0]
        self.w_qkv0 = np.concatenate([first["wq"], first["wkv"]])          # (3h, d, d_h)
        self.pe = positional_encoding(w, d)
        self.pe_qkv0 = self.pe[None] @ self.w_qkv0                            # (3h, W, d_h)
        self.query_w, self.query_b = P["query.w"], P["query.b"]
        self.head_w, self.head_b = P["head.w"], P["head.b"]
        self._emb = np.zeros((2 * w, d))
        self._qkv = np.zeros((3 * h, 2 * w, self.dh))
        self._start = 0
        self._n_last = None
        self._avg = np.full((d, 1), 1.0 / d)
        self._ones_w = np.ones((w, 1))

    def reset(self, states: np.ndarray, p: np.ndarray) -> None:
        """Load a full window (oldest first) of physical states and demands."""
        w = self.cfg.window
        if states.shape[0] != w or p.shape[0] != w:
            raise ShapeError(f"warm-up window must hold {w} states")
        tok = np.concatenate([(states - self.lo) * self.inv_span, p[:, None]], axis=1)
        emb = tok @ self.embed_w + self.embed_b
        self._start = 0
        self._emb[:w] = emb
        self._qkv[:, :w] = emb[None] @ self.w_qkv0
        self._n_last = states[-1, : self.nz]

    def push(self, state: np.ndarray, p: float) -> None:
        """Append the newest state; the oldest one leaves the window."""
        w = self.cfg.window
        if self._start == w:
            self._emb[: w - 1] = self._emb[w + 1:]
            self._qkv[:, : w - 1] = self._qkv[:, w + 1:]
            self._start = 0
        else:
            self._start += 1
        e = ((state - self.lo) * self.inv_span) @ self.embed_w[:-1] + (p * self.embed_w[-1] + self.embed_b)
        slot = self._start + w - 1
        self._emb[slot] = e
        self._qkv[:, slot] = e @ self.w_qkv0
        self._n_last = state[: self.nz]

    def _attend(self, x, q, k, v, blk):
        # q (h, s_q, d_h) pre-scaled; k, v (h, s_k, d_h); returns LN(x + MHA)
        s = q @ k.transpose(0, 2, 1)
        e = np.exp(s - s.max())
        tot = e @ self._ones_w
        if tot.min() < 1e-200:  # a row far below the global max; shift per row instead
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            tot = e @ self._ones_w
        att = (((e / tot) @ v) @ blk["wo"]).sum(axis=0)
        return _layer_norm(x + att, blk["g1"], blk["b1"], self._avg)

    def _ffn(self, x, blk):
        f = np.maximum(x @ blk["f1w"] + blk["f1b"], 0.0) @ blk["f2w"] + blk["f2b"]
        return _layer_norm(x + f, blk["g2"], blk["b2"], self._avg)

    def predict(self, slow_next: np.ndarray, p_next: float) -> np.ndarray:
        """Flux at the next step given its slow block (physical units)."""
        w, h, nz = self.cfg.window, self.h, self.nz
        s = self._start
        x = self._emb[s:s + w] + self.pe
        qkv = self._qkv[:, s:s + w] + self.pe_qkv0
        blk = self.blocks[0]
        x = self._ffn(self._attend(x, qkv[:h], qkv[h:2 * h], qkv[2 * h:], blk), blk)
        for blk in self.blocks[1:-1]:
            kv = x @ blk["wkv"]
            x = self._ffn(self._attend(x, x @ blk["wq"], kv[:h], kv[h:], blk), blk)
        dec = self.blocks[-1]
        y = ((slow_next - self.lo[nz:]) * self.inv_span[nz:]) @ self.query_w[:-1] \
            + (p_next * self.query_w[-1] + self.query_b)
        y = y[None, :]
        kv = x @ dec["wkv"]
        y = self._ffn(self._attend(y, y @ dec["wq"], kv[:h], kv[h:], dec), dec)
        z = y[0] @ self.head_w + self.head_b
        base = skip_base(self.cfg, self._n_last, p_next)
        return base * np.logaddexp(0.0, z + SKIP_SHIFT) + FLUX_FLOOR


class CompiledPinnEngine:
    """Same interface and results as :class:`PinnEngine`, with the per-step
    forward pass compiled to a single native call."""

    def __init__(self, model: PinnModel):
        from . import _pinn_kernels

        self._kernel = _pinn_kernels.predict_step
        cfg, P = model.config, model.params
        self.cfg, self.nz = cfg, model.n_z
        self.lo, self.inv_span = model.normalizer.lo, 1.0 / model.normalizer.span
        d, w = cfg.d_model, cfg.window
        scale = 1.0 / math.sqrt(d // cfg.heads)
        names = [f"enc{i}" for i in range(cfg.encoder_layers)] + ["dec"]

        def stack(fmt):
            return np.ascontiguousarray(np.stack([P[fmt.format(n)] for n in names]))

        self.wqkv = np.ascontiguousarray(np.stack(
            [np.concatenate([P[f"{n}.wq"] * scale, P[f"{n}.wk"], P[f"{n}.wv"]], axis=1) for n in names]))
        self.dec_q = np.ascontiguousarray(self.wqkv[-1][:, :d])
        self.dec_kv = np.ascontiguousarray(self.wqkv[-1][:, d:])
        self.wo = stack("{}.wo")
        self.f1w, self.f1b = stack("{}.ff1.w"), stack("{}.ff1.b")
        self.f2w, self.f2b = stack("{}.ff2.w"), stack("{}.ff2.b")
        self.ln = np.ascontiguousarray(np.stack(
            [np.stack([P[f"{n}.ln1.g"], P[f"{n}.ln1.b"], P[f"{n}.ln2.g"], P[f"{n}.ln2.b"]]) for n in names]))
        self.embed_w, self.embed_b = P["embed.w"], P["embed.b"]
        self.pe = positional_encoding(w, d)
        self.w_qkv0 = np.ascontiguousarray(self.wqkv[0])
        self.pe_qkv0 = self.pe @ self.w_qkv0
        self.query_w, self.query_b = np.ascontiguousarray(P["query.w"]), P["query.b"]
        self.head_w, self.head_b = np.ascontiguousarray(P["head.w"]), P["head.b"]
        self._emb = np.zeros((2 * w, d))
        self._qkv = np.zeros((2 * w, 3 * d))
        self._start = 0
        self._n_last = None
        self._query = np.empty(self.query_w.shape[0])
        # compile (or load the cached build) outside any timed loop
        self.reset(np.tile(model.normalizer.lo, (w, 1)), np.ones(w))
        self.predict(model.normalizer.lo[self.nz:], 1.0)

    def reset(self, states: np.ndarray, p: np.ndarray) -> None:
        w = self.cfg.window
        if states.shape[0] != w or p.shape[0] != w:
            raise ShapeError(f"warm-up window must hold {w} states")
        tok = np.concatenate([(states - self.lo) * self.inv_span, p[:, None]], axis=1)
        emb = tok @ self.embed_w + self.embed_b
        self._start = 0
        self._emb[:w] = emb
        self._qkv[:w] = emb @ self.w_qkv0
        self._n_last = states[-1, : self.nz]

    def push(self, state: np.ndarray, p: float) -> None:
        w = self.cfg.window
        if self._start == w:
            self._emb[: w - 1] = self._emb[w + 1:]
            self._qkv[: w - 1] = self._qkv[w + 1:]
            self._start = 0
        else:
            self._start += 1
        e = ((state - self.lo) * self.inv_span) @ self.embed_w[:-1] + (p * self.embed_w[-1] + self.embed_b)
        slot = self._start + w - 1
        self._emb[slot] = e
        self._qkv[slot] = e @ self.w_qkv0
        self._n_last = state[: self.nz]

    def predict(self, slow_next: np.ndarray, p_next: float) -> np.ndarray:
        nz, q = self.nz, self._query
        q[:-1] = (slow_next - self.lo[nz:]) * self.inv_span[nz:]
        q[-1] = p_next
        base = skip_base(self.cfg, self._n_last, p_next)
        return self._kernel(self._emb, self._qkv, self._start, self.cfg.window, self.pe, self.pe_qkv0,
                            self.cfg.heads, self.wqkv, self.dec_q, self.dec_kv, self.wo, self.f1w,
                            self.f1b, self.f2w, self.f2b, self.ln, q, self.query_w, self.query_b,
                            self.head_w, self.head_b, base, SKIP_SHIFT, FLUX_FLOOR, ops.LN_EPS)


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(ModelError):
    """Loss became non-finite; ``model`` holds the last finite parameters."""

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


def _evaluate(sampler: WindowSampler, P: dict, cfg: PinnConfig, c: PlantConstants, rows, chunk=512):
    tot = np.zeros(3)
    for i in range(0, rows.size, chunk):
        sel = rows[i:i + chunk]
        vals = pinn_loss(sampler.batch(sel), P, cfg, c)
        tot += np.array([v.item() for v in vals]) * sel.size
    return tot / rows.size


def train_pinn(corpus: Corpus, cfg: PinnConfig = PinnConfig(), c: PlantConstants = DEFAULT_CONSTANTS,
               log_path=None, progress: Callable | None = None, init: dict | None = None):
    """Mini-batch Adam on the weighted data + physics objective.

    Epoch 0 of the log holds the losses of the untrained model. The learning
    rate decays geometrically from ``lr`` to ``lr_final`` over the epochs.

    Returns:
        (PinnModel, log) where log is a list of dicts keyed by ``LOG_HEADER``.
    """
    sampler = WindowSampler(corpus.train, corpus.normalizer, cfg.window)
    rng = np.random.default_rng(cfg.seed)
    tape = Tape()
    start = init if init is not None else init_params(cfg, c.n_z)
    P = {name: tape.param(name, value) for name, value in start.items()}
    opt = Adam(tape, lr=cfg.lr)
    n = len(sampler)
    eval_rows = np.sort(rng.choice(n, size=min(n, 4096), replace=False))
    t0 = time.perf_counter()

    def snapshot():
        return {k: v.data.copy() for k, v in P.items()}

    log = [_log_row(0, _evaluate(sampler, P, cfg, c, eval_rows), time.perf_counter() - t0)]
    if progress:
        progress(log[-1])
    good = snapshot()
    per_epoch = cfg.samples_per_epoch or n
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.epochs - 1, 1))
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr * decay ** (epoch - 1)
        order = rng.permutation(n)[:per_epoch]
        try:
            for i in range(0, order.size, cfg.batch_size):
                batch = sampler.batch(order[i:i + cfg.batch_size], rng, cfg.history_noise)
                with tape:
                    total, _, _ = pinn_loss(batch, P, cfg, c)
                tape.zero_grad()
                tape.backward(total)
                opt.step()
            losses = _evaluate(sampler, P, cfg, c, eval_rows)
            if not np.all(np.isfinite(losses)):
                raise NonFiniteError("non-finite loss")
        except NonFiniteError as exc:
            model = PinnModel(cfg, good, corpus.normalizer, c)
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", model) from exc
        good = snapshot()
        log.append(_log_row(epoch, losses, time.perf_counter() - t0))
        if progress:
            progress(log[-1])
    model = PinnModel(cfg, good, corpus.normalizer, c)
    if log_path is not None:
        write_log(log_path, log)
    return model, log


def _log_row(epoch, losses, seconds):
    return {"epoch": epoch, "loss_total": float(losses[0]), "loss_data": float(losses[1]),
            "loss_phys": float(losses[2]), "seconds": float(seconds)}


def write_log(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for row in log:
            w.writerow([row["epoch"]] + [repr(row[k]) for k in LOG_HEADER[1:]])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in LOG_HEADER[1:]}} for r in rows]


# ---------------------------------------------------------------------------
# hybrid rollout


class QuasiStaticOracle:
    """Flux predictor that solves the quasi-static balance exactly; same interface as PinnEngine."""

    def __init__(self, c: PlantConstants = DEFAULT_CONSTANTS):
        self.c = c
        self._n_last = None

    def reset(self, states: np.ndarray, p: np.ndarray) -> None:
        self._n_last = np.array(states[-1, : self.c.n_z], dtype=float)

    def push(self, state: np.ndarray, p: float) -> None:
        self._n_last = state[: self.c.n_z]

    def predict(self, slow_next: np.ndarray, p_next: float) -> np.ndarray:
        nz = self.c.n_z
        return solve_quasistatic_flux(slow_next[:nz], slow_next[nz:2 * nz], slow_next[2 * nz],
                                      slow_next[2 * nz + 1], self.c, n_guess=self._n_last)


def hybrid_rollout(model, x0, profile: PowerProfile, horizon_s: float = 86400.0,
                   c: PlantConstants | None = None, history: Trajectory | None = None,
                   dt_s: float = 60.0):
    """Alternate a flux predictor with explicit Euler on the slow block.

    Args:
        model: a PinnModel, or an object with ``reset/push/predict`` such as
            :class:`QuasiStaticOracle`.
        x0: initial flat state.
        history: optional reference trajectory ending at ``x0`` whose last
            ``W`` states warm the window; otherwise ``x0`` is replicated.

    Returns:
        (Trajectory with provenance ``pinn-hybrid``, wall-clock seconds of the loop).
    """
    if isinstance(model, PinnModel):
        c = model.constants if c is None else c
        engine, window, kind = model.engine(), model.config.window, "pinn"
    else:
        c = DEFAULT_CONSTANTS if c is None else c
        engine, window, kind = model, 1, "quasistatic"
    steps = horizon_s / dt_s
    if steps < 1 or abs(steps - round(steps)) > 1e-9:
        raise DomainError(f"horizon {horizon_s} s is not a positive multiple of {dt_s} s")
    steps = int(round(steps))
    x0 = np.asarray(x0, dtype=float)
    times = dt_s * np.arange(steps + 1)
    p = profile(times)
    if history is not None and len(history) >= window:
        warm_x, warm_p, warm = history.states[-window:], history.p_turb[-window:], "reference-history"
    else:
        warm_x, warm_p, warm = np.repeat(x0[None, :], window, 0), np.full(window, p[0]), "replicated-x0"

    out = np.empty((steps + 1, x0.size))
    out[0] = x0
    nz = c.n_z
    t0 = time.perf_counter()
    engine.reset(warm_x, warm_p)
    x = x0
    for k in range(steps):
        slow = advance_nonstiff(x, p[k], dt_s, c)
        n_next = engine.predict(slow, p[k + 1])
        if not np.all(np.isfinite(n_next)):
            raise ModelError(f"non-finite flux prediction at step {k}")
        x = out[k + 1]
        x[:nz] = n_next
        x[nz:] = slow
        engine.push(x, p[k + 1])
    wall = time.perf_counter() - t0
    meta = {"flux_model": kind, "warm_up": warm, "wall_clock_s": wall}
    return Trajectory(times, out, profile, "pinn-hybrid", meta), wall


def load_config(path, base: PinnConfig = PinnConfig()) -> PinnConfig:
    return PinnConfig.from_kv(Path(path).read_text(), base=base)

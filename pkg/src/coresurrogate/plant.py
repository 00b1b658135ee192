"""One-dimensional core model: flux, iodine, xenon, cold-leg temperature, rod bank.

All quantities are normalized so that the full-power equilibrium is
``n = I = X = 1`` in every mesh, ``t_cl = 306 °C`` and ``x_bank = 0``.
Mesh ``0`` is the bottom of the core, mesh ``n_z - 1`` the top; rods enter
from the top.

The flat state vector layout used throughout the package is::

    [n_0..n_{nz-1}, I_0..I_{nz-1}, X_0..X_{nz-1}, t_cl, x_bank]
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError, DomainError, InfeasibleEquilibriumError
from .kvconfig import dataclass_from_kv, dataclass_to_kv


@dataclass(frozen=True)
class PlantConstants:
    n_z: int = 6
    lambda_prompt: float = 1.0e-5
    kappa: float = 300.0
    alpha_pow: float = -0.02
    alpha_mod: float = -3.0e-4
    c_X: float = 0.03
    W_rod: float = 0.08
    w_rod: float = 0.2
    lambda_I: float = 2.9e-5
    lambda_X: float = 2.1e-5
    beta_I: float = 0.96
    sigma_star: float = 3.5e-5
    T_base: float = 286.0
    T_span: float = 20.0
    G_mismatch: float = 30.0
    tau_T: float = 300.0
    v_max: float = 1.7e-3
    g_rod: float = 3.0e-6
    delta_db: float = 0.8
    T_ref: float = 306.0
    # rod end stops: softening length in insertion fraction, and the width of
    # the controller-demand band over which the stop releases
    x_stop: float = 0.01
    u_stop: float = 1.0e-3

    def __post_init__(self):
        if self.n_z < 1:
            raise DomainError("n_z must be >= 1")
        positive = ("lambda_prompt", "lambda_I", "lambda_X", "sigma_star", "tau_T",
                    "v_max", "w_rod", "delta_db", "x_stop", "u_stop")
        for name in positive:
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0")
        if not 0.0 < self.beta_I < 1.0:
            raise DomainError("beta_I must lie in (0, 1)")
        if self.stiffness_ratio < 1e6:
            raise DomainError(f"constants are not stiff enough (ratio {self.stiffness_ratio:.3g})")

    @property
    def n_state(self) -> int:
        return 3 * self.n_z + 2

    @property
    def stiffness_ratio(self) -> float:
        return abs(self.alpha_pow) / self.lambda_prompt / self.lambda_X

    def to_kv(self) -> str:
        return dataclass_to_kv(self)

    @classmethod
    def from_kv(cls, text: str) -> "PlantConstants":
        return dataclass_from_kv(cls, text)


DEFAULT_CONSTANTS = PlantConstants()


def slices(n_z: int):
    """Index slices of (n, iodine, xenon) and the scalar positions in the flat vector."""
    return slice(0, n_z), slice(n_z, 2 * n_z), slice(2 * n_z, 3 * n_z), 3 * n_z, 3 * n_z + 1


@dataclass
class State:
    n: np.ndarray
    iodine: np.ndarray
    xenon: np.ndarray
    t_cl: float
    x_bank: float

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=float)
        self.iodine = np.asarray(self.iodine, dtype=float)
        self.xenon = np.asarray(self.xenon, dtype=float)
        self.t_cl = float(self.t_cl)
        self.x_bank = float(self.x_bank)

    @property
    def n_z(self) -> int:
        return self.n.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.n, self.iodine, self.xenon, [self.t_cl, self.x_bank]])

    @classmethod
    def from_vector(cls, x: Sequence[float], n_z: int = 6) -> "State":
        x = np.asarray(x, dtype=float)
        if x.shape != (3 * n_z + 2,):
            raise DomainError(f"expected flat state of length {3 * n_z + 2}, got shape {x.shape}")
        sn, si, sx, it, ib = slices(n_z)
        return cls(x[sn].copy(), x[si].copy(), x[sx].copy(), x[it], x[ib])

    def validate(self, n_z: int = 6) -> "State":
        for name in ("n", "iodine", "xenon"):
            arr = getattr(self, name)
            if arr.shape != (n_z,):
                raise DomainError(f"{name} must have length {n_z}, got {arr.shape}")
        validate_vector(self.to_vector(), n_z, check_rod=True)
        return self


def validate_vector(x: np.ndarray, n_z: int = 6, check_rod: bool = False) -> None:
    if x.shape != (3 * n_z + 2,):
        raise DomainError(f"expected flat state of length {3 * n_z + 2}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("state contains non-finite values")
    if np.any(x[: 3 * n_z] < 0.0):
        raise DomainError("negative flux or concentration in state")
    if check_rod and not 0.0 <= x[3 * n_z + 1] <= 1.0:
        raise DomainError(f"x_bank={x[3 * n_z + 1]!r} outside [0, 1]")


def as_vector(state, c: PlantConstants) -> np.ndarray:
    if isinstance(state, State):
        return state.to_vector()
    return np.asarray(state, dtype=float)


@dataclass(frozen=True)
class PowerProfile:
    """Piecewise-linear turbine demand, held constant after the last breakpoint."""

    breakpoints: tuple[tuple[float, float], ...]
    ramp_rate: float = 1.0  # %NP per minute, informational for hand-built profiles
    _t: np.ndarray = field(init=False, repr=False, compare=False)
    _p: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bps = tuple((float(t), float(p)) for t, p in self.breakpoints)
        if not bps:
            raise DomainError("profile needs at least one breakpoint")
        t = np.array([b[0] for b in bps])
        p = np.array([b[1] for b in bps])
        if t[0] != 0.0:
            raise DomainError("profile must start at t = 0")
        if np.any(np.diff(t) <= 0):
            raise DomainError("breakpoint times must be strictly increasing")
        if np.any((p < 0.2) | (p > 1.0)):
            raise DomainError("profile power must lie in [0.2, 1.0]")
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "_t", t)
        object.__setattr__(self, "_p", p)

    @classmethod
    def constant(cls, power: float) -> "PowerProfile":
        return cls(((0.0, power),))

    @property
    def times(self) -> np.ndarray:
        return self._t

    def __call__(self, t):
        if np.ndim(t) == 0:
            return float(np.interp(t, self._t, self._p))
        return np.interp(t, self._t, self._p)

    def to_json(self) -> dict:
        return {"breakpoints": [list(b) for b in self.breakpoints], "ramp_rate": self.ramp_rate}

    @classmethod
    def from_json(cls, obj: dict) -> "PowerProfile":
        return cls(tuple(tuple(b) for b in obj["breakpoints"]), float(obj.get("ramp_rate", 1.0)))


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _rod_centres(c: PlantConstants) -> np.ndarray:
    i = np.arange(1, c.n_z + 1)
    return 1.0 - (i - 0.5) / c.n_z


def _rod_raw(x_bank, c: PlantConstants) -> np.ndarray:
    return -c.W_rod * _logistic((x_bank - _rod_centres(c)) / c.w_rod)


def _rod_raw_slope(x_bank, c: PlantConstants) -> np.ndarray:
    s = _logistic((x_bank - _rod_centres(c)) / c.w_rod)
    return -c.W_rod * s * (1.0 - s) / c.w_rod


def rod_reactivity(x_bank: float, c: PlantConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Per-mesh rod worth for insertion fraction ``x_bank`` (Δk, all negative)."""
    if not np.isfinite(x_bank) or not 0.0 <= x_bank <= 1.0:
        raise DomainError(f"x_bank={x_bank!r} outside [0, 1]")
    return _rod_raw(x_bank, c)


def temperature_program(p_turb: float, c: PlantConstants = DEFAULT_CONSTANTS) -> float:
    return c.T_base + c.T_span * p_turb


def xenon_equilibrium(n, c: PlantConstants = DEFAULT_CONSTANTS):
    """Xenon level in equilibrium with flux ``n`` (iodine also in equilibrium)."""
    return n * (c.lambda_X + c.sigma_star) / (c.lambda_X + c.sigma_star * n)


def _laplacian(n_z: int) -> np.ndarray:
    lap = -2.0 * np.eye(n_z) + np.eye(n_z, k=1) + np.eye(n_z, k=-1)
    lap[0, 0] += 1.0
    lap[-1, -1] += 1.0
    return lap


class _Kernel:
    """Precomputed per-constants arrays for the hot right-hand-side path."""

    _cache: dict = {}

    def __init__(self, c: PlantConstants):
        self.c = c
        self.lap = _laplacian(c.n_z)
        self.centres = _rod_centres(c)
        self.rod0 = _rod_raw(0.0, c)
        nz = c.n_z
        self.sn, self.si, self.sx, self.it, self.ib = slices(nz)

    @classmethod
    def get(cls, c: PlantConstants) -> "_Kernel":
        k = cls._cache.get(c)
        if k is None:
            k = cls._cache[c] = _Kernel(c)
        return k

    def reactivity(self, n, xenon, t_cl, x_bank):
        c = self.c
        rod = -c.W_rod * _logistic((x_bank - self.centres) / c.w_rod) - self.rod0
        return rod + c.alpha_pow * (n - 1.0) + c.alpha_mod * (t_cl - c.T_ref) - c.c_X * (xenon - 1.0)


def reactivity(x, c: PlantConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Total per-mesh reactivity of flat state ``x``.

    The rod contribution is counted relative to the all-rods-out position: the
    constant ``rod_reactivity(0)`` part is compensated by the (fixed) boron
    concentration, which is what makes the full-power point critical with the
    bank fully withdrawn.
    """
    k = _Kernel.get(c)
    x = np.asarray(x, dtype=float)
    return k.reactivity(x[k.sn], x[k.sx], x[k.it], x[k.ib])


def deadband(e, width):
    return e - width * np.tanh(e / width)


def _smoothstep_release(u, width):
    """1 for u <= 0, 0 for u >= width, C1 cubic in between."""
    r = np.clip(u / width, 0.0, 1.0)
    return 1.0 - r * r * (3.0 - 2.0 * r)


def _smoothstep_release_slope(u, width):
    r = np.clip(u / width, 0.0, 1.0)
    return np.where((u > 0) & (u < width), -6.0 * r * (1.0 - r) / width, 0.0)


def _rod_speed(e, x_bank, c: PlantConstants):
    """Rod velocity and its partial derivatives wrt (e, x_bank).

    ``e`` is the cold-leg error against the temperature program. The raw
    controller is a smoothed deadband followed by a tanh speed limit. Near the
    mechanical stops the velocity towards the stop is switched off by a C1
    gate so the bank never leaves [0, 1].
    """
    u = c.g_rod * deadband(e, c.delta_db) / c.v_max
    du_de = c.g_rod * np.tanh(e / c.delta_db) ** 2 / c.v_max
    v = c.v_max * np.tanh(u)
    dv_du = c.v_max * (1.0 - np.tanh(u) ** 2)

    b_lo = np.exp(-x_bank / c.x_stop)
    b_hi = np.exp(-(1.0 - x_bank) / c.x_stop)
    s_lo, s_hi = _smoothstep_release(u, c.u_stop), _smoothstep_release(-u, c.u_stop)
    g_lo = 1.0 - b_lo * s_lo
    g_hi = 1.0 - b_hi * s_hi
    dg_lo_du = -b_lo * _smoothstep_release_slope(u, c.u_stop)
    dg_hi_du = b_hi * _smoothstep_release_slope(-u, c.u_stop)
    dg_lo_dx = b_lo * s_lo / c.x_stop
    dg_hi_dx = -b_hi * s_hi / c.x_stop

    speed = v * g_lo * g_hi
    d_du = dv_du * g_lo * g_hi + v * (dg_lo_du * g_hi + g_lo * dg_hi_du)
    d_dx = v * (dg_lo_dx * g_hi + g_lo * dg_hi_dx)
    return speed, d_du * du_de, d_dx


def _rhs(x: np.ndarray, p_turb: float, c: PlantConstants) -> np.ndarray:
    """Unchecked right-hand side; used by the solvers, which probe trial states."""
    k = _Kernel.get(c)
    n, iodine, xenon = x[k.sn], x[k.si], x[k.sx]
    t_cl, x_bank = x[k.it], x[k.ib]
    rho = k.reactivity(n, xenon, t_cl, x_bank)
    t_prog = c.T_base + c.T_span * p_turb

    out = np.empty_like(x)
    out[k.sn] = rho * n / c.lambda_prompt + c.kappa * (k.lap @ n)
    out[k.si] = c.lambda_I * (n - iodine)
    out[k.sx] = ((c.lambda_X + c.sigma_star) * (c.beta_I * iodine + (1.0 - c.beta_I) * n)
                 - c.lambda_X * xenon - c.sigma_star * n * xenon)
    out[k.it] = (t_prog + c.G_mismatch * (n.mean() - p_turb) - t_cl) / c.tau_T
    out[k.ib] = _rod_speed(t_cl - t_prog, x_bank, c)[0]
    return out


def _rod_speed_scalar(e: float, x_bank: float, c: PlantConstants) -> float:
    """Scalar-math twin of ``_rod_speed(...)[0]`` for the per-step hybrid loop."""
    th = math.tanh(e / c.delta_db)
    u = c.g_rod * (e - c.delta_db * th) / c.v_max
    v = c.v_max * math.tanh(u)

    def release(w):
        r = min(max(w / c.u_stop, 0.0), 1.0)
        return 1.0 - r * r * (3.0 - 2.0 * r)

    g_lo = 1.0 - math.exp(-x_bank / c.x_stop) * release(u)
    g_hi = 1.0 - math.exp(-(1.0 - x_bank) / c.x_stop) * release(-u)
    return v * g_lo * g_hi


def _slow_rhs(x: np.ndarray, p_turb: float, c: PlantConstants) -> np.ndarray:
    """Derivatives of the slow block ``x[n_z:]``; equal to ``_rhs(x, p, c)[n_z:]``."""
    nz = c.n_z
    n, iodine, xenon = x[:nz], x[nz:2 * nz], x[2 * nz:3 * nz]
    t_cl, x_bank = float(x[3 * nz]), float(x[3 * nz + 1])
    t_prog = c.T_base + c.T_span * p_turb
    out = np.empty(2 * nz + 2)
    out[:nz] = c.lambda_I * (n - iodine)
    ls = c.lambda_X + c.sigma_star
    out[nz:2 * nz] = (ls * (c.beta_I * iodine + (1.0 - c.beta_I) * n)
                      - (c.lambda_X + c.sigma_star * n) * xenon)
    out[2 * nz] = (t_prog + c.G_mismatch * (n.sum() / nz - p_turb) - t_cl) / c.tau_T
    out[2 * nz + 1] = _rod_speed_scalar(t_cl - t_prog, x_bank, c)
    return out


def _check_inputs(x: np.ndarray, p_turb: float, c: PlantConstants) -> None:
    validate_vector(x, c.n_z)
    if not np.isfinite(p_turb) or not 0.0 <= p_turb <= 1.2:
        raise DomainError(f"p_turb={p_turb!r} outside [0, 1.2]")


def rhs(state, p_turb: float, c: PlantConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Time derivative of ``state`` (flat vector or :class:`State`), per second."""
    x = as_vector(state, c)
    _check_inputs(x, p_turb, c)
    return _rhs(x, p_turb, c)


def _jacobian(x: np.ndarray, p_turb: float, c: PlantConstants) -> np.ndarray:
    k = _Kernel.get(c)
    nz = c.n_z
    n, iodine, xenon = x[k.sn], x[k.si], x[k.sx]
    t_cl, x_bank = x[k.it], x[k.ib]
    sn, si, sx, it, ib = k.sn, k.si, k.sx, k.it, k.ib
    lam = c.lambda_prompt
    rho = k.reactivity(n, xenon, t_cl, x_bank)
    diag = np.arange(nz)

    J = np.zeros((c.n_state, c.n_state))
    J[sn, sn] = c.kappa * k.lap
    J[diag, diag] += (rho + c.alpha_pow * n) / lam
    J[diag, 2 * nz + diag] = -c.c_X * n / lam
    J[sn, it] = c.alpha_mod * n / lam
    J[sn, ib] = _rod_raw_slope(x_bank, c) * n / lam

    J[nz + diag, diag] = c.lambda_I
    J[nz + diag, nz + diag] = -c.lambda_I

    ls = c.lambda_X + c.sigma_star
    J[2 * nz + diag, diag] = ls * (1.0 - c.beta_I) - c.sigma_star * xenon
    J[2 * nz + diag, nz + diag] = ls * c.beta_I
    J[2 * nz + diag, 2 * nz + diag] = -c.lambda_X - c.sigma_star * n

    J[it, sn] = c.G_mismatch / (nz * c.tau_T)
    J[it, it] = -1.0 / c.tau_T

    _, d_de, d_dx = _rod_speed(t_cl - (c.T_base + c.T_span * p_turb), x_bank, c)
    J[ib, it] = d_de
    J[ib, ib] = d_dx
    return J


def jacobian(state, p_turb: float, c: PlantConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Analytic Jacobian of :func:`rhs` with respect to the flat state."""
    x = as_vector(state, c)
    _check_inputs(x, p_turb, c)
    return _jacobian(x, p_turb, c)


def _flux_balance(n, xenon, t_cl, x_bank, k: _Kernel):
    """Flux equation scaled by the prompt time, and its Jacobian wrt n."""
    c = k.c
    rho = k.reactivity(n, xenon, t_cl, x_bank)
    f = rho * n + c.lambda_prompt * c.kappa * (k.lap @ n)
    J = c.lambda_prompt * c.kappa * k.lap
    J[np.diag_indices_from(J)] += rho + c.alpha_pow * n
    return f, J


def _local_flux_guess(rho_of_n, n_z: int, floor: float):
    """Per-mesh root of the (monotone decreasing) local reactivity balance.

    Leakage is ignored. Meshes that stay subcritical even at vanishing flux get
    ``floor`` as a seed.
    """
    lo = np.zeros(n_z)
    hi = np.full(n_z, 4.0)
    r0 = rho_of_n(lo)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        pos = rho_of_n(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    return np.where(r0 > 0, np.maximum(0.5 * (lo + hi), floor), floor)


def _log_newton(residual, u, tol: float, maxiter: int):
    """Damped Newton in ``u = log n``; returns ``(u, res)`` at the best point reached."""
    f, J, scale = residual(np.exp(u))
    res = np.max(np.abs(f)) / scale
    for _ in range(maxiter):
        if res < tol:
            break
        m = np.exp(u)
        try:
            du = np.linalg.solve(J * m[None, :], -f)
        except np.linalg.LinAlgError:
            break
        du = np.clip(du, -4.0, 4.0)
        lam = 1.0
        while True:
            trial = u + lam * du
            f_t, J_t, _ = residual(np.exp(trial))
            res_t = np.max(np.abs(f_t)) / scale
            if res_t < res or lam < 1e-6:
                break
            lam *= 0.5
        if res_t >= res:
            break
        u, f, J, res = trial, f_t, J_t, res_t
    return u, res


def _pseudo_transient(residual, u, iters: int = 400):
    """Backward-Euler march of ``du/dt = f(n)/n`` with a growing pseudo step.

    Follows the physical flux relaxation towards its stable fixed point, so it
    converges from guesses where plain Newton stalls.
    """
    dtau = 1e-2
    f, J, scale = residual(np.exp(u))
    for _ in range(iters):
        m = np.exp(u)
        g = f / m
        Jg = J * (m[None, :] / m[:, None])
        Jg[np.diag_indices_from(Jg)] -= g
        try:
            du = np.linalg.solve(np.eye(u.size) / dtau - Jg, g)
        except np.linalg.LinAlgError:
            break
        u = u + np.clip(du, -4.0, 4.0)
        g_old = np.max(np.abs(g))
        f, J, _ = residual(np.exp(u))
        g_new = np.max(np.abs(f / np.exp(u)))
        dtau = min(dtau * max(0.5, min(4.0, g_old / max(g_new, 1e-300))), 1e8)
        if np.max(np.abs(f)) / scale < 1e-6:
            break
    return u


def _positive_newton(residual, n, tol: float, maxiter: int, what: str):
    """Solve ``residual(n) -> (f, J, scale)`` for positive ``n``.

    Newton works in log-flux variables, which keeps every iterate positive
    and handles meshes whose flux is orders of magnitude below the others.
    Convergence is judged on ``max|f| / scale`` (per second); round-off puts
    a floor near 1e-13 /s. When Newton stalls, a pseudo-transient march
    brings the iterate into its basin and Newton is restarted.
    """
    u0 = np.log(np.maximum(n, 1e-300))
    u, res = _log_newton(residual, u0, tol, maxiter)
    if res < tol:
        return np.exp(u)
    u, res = _log_newton(residual, _pseudo_transient(residual, u0), tol, maxiter)
    if res < tol:
        return np.exp(u)
    raise ConvergenceError(f"{what} Newton did not converge in {maxiter} iterations "
                           f"(residual {res:.3g} /s)")


def _newton_flux(n, xenon, t_cl, x_bank, k: _Kernel, tol: float, maxiter: int = 50):
    def residual(m):
        f, J = _flux_balance(m, xenon, t_cl, x_bank, k)
        return f, J, k.c.lambda_prompt
    return _positive_newton(residual, n, tol, maxiter, "quasi-static flux")


def solve_quasistatic_flux(iodine, xenon, t_cl: float, x_bank: float,
                           c: PlantConstants = DEFAULT_CONSTANTS, n_guess=None,
                           tol: float = 1e-11) -> np.ndarray:
    """Flux that makes dn/dt vanish for frozen slow variables.

    ``iodine`` does not enter the flux equation; it is accepted so callers can
    pass the non-stiff block unchanged.
    """
    iodine = np.asarray(iodine, dtype=float)
    xenon = np.asarray(xenon, dtype=float)
    vals = np.concatenate([iodine, xenon, [t_cl, x_bank]])
    if not np.all(np.isfinite(vals)):
        raise DomainError("non-finite input to quasi-static flux solve")
    if np.any(xenon < 0):
        raise DomainError("negative xenon")
    k = _Kernel.get(c)
    if n_guess is None:
        n0 = _local_flux_guess(lambda m: k.reactivity(m, xenon, t_cl, x_bank), c.n_z, 1e-6)
    else:
        n0 = np.asarray(n_guess, float)
    n = _newton_flux(n0.copy(), xenon, t_cl, x_bank, k, tol)
    if np.any(n < 0):
        raise ConvergenceError("quasi-static flux solve produced negative flux")
    return n


def _equilibrium_flux(x_bank, t_cl, k: _Kernel, n0=None, tol=1e-11, maxiter=60):
    """Flux with iodine and xenon in equilibrium at the same flux."""
    c = k.c
    ls = c.lambda_X + c.sigma_star

    def residual(m):
        f, J = _flux_balance(m, xenon_equilibrium(m, c), t_cl, x_bank, k)
        dxe = ls * c.lambda_X / (c.lambda_X + c.sigma_star * m) ** 2
        J[np.diag_indices_from(J)] += -c.c_X * dxe * m
        return f, J, c.lambda_prompt

    if n0 is None:
        n0 = _local_flux_guess(lambda m: k.reactivity(m, xenon_equilibrium(m, c), t_cl, x_bank),
                               c.n_z, 1e-6)
    n = n0.copy()
    return _positive_newton(residual, n, tol, maxiter, "equilibrium flux")


def equilibrium_state(p0: float, c: PlantConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Steady state at constant turbine demand ``p0`` (flat vector).

    Iodine and xenon sit at their flux equilibria, the cold leg on its program
    and the rod bank where the core power matches the demand.
    """
    if not np.isfinite(p0) or not 0.2 <= p0 <= 1.0:
        raise DomainError(f"p0={p0!r} outside [0.2, 1.0]")
    k = _Kernel.get(c)
    t_cl = temperature_program(p0, c)

    def power_gap(xb):
        return _equilibrium_flux(xb, t_cl, k).mean() - p0

    g0 = power_gap(0.0)
    if abs(g0) < 1e-14:
        x_bank = 0.0
    else:
        g1 = power_gap(1.0)
        if g0 < 0 or g1 > 0:
            raise InfeasibleEquilibriumError(f"no rod position balances p0={p0}")
        x_bank = brentq(power_gap, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)

    n = _equilibrium_flux(x_bank, t_cl, k)
    if x_bank > 0.0:
        n, x_bank = _polish_equilibrium(n, x_bank, t_cl, p0, k)
    x = np.concatenate([n, n, xenon_equilibrium(n, c), [t_cl, x_bank]])
    return x


def _polish_equilibrium(n, x_bank, t_cl, p0, k: _Kernel, iters: int = 8):
    """Joint Newton on (n, x_bank) so the residual reaches round-off."""
    c = k.c
    nz = c.n_z
    ls = c.lambda_X + c.sigma_star
    for _ in range(iters):
        xe = xenon_equilibrium(n, c)
        f, Jn = _flux_balance(n, xe, t_cl, x_bank, k)
        dxe = ls * c.lambda_X / (c.lambda_X + c.sigma_star * n) ** 2
        Jn[np.diag_indices_from(Jn)] += -c.c_X * dxe * n
        F = np.append(f, n.mean() - p0)
        if np.max(np.abs(F[:-1])) / c.lambda_prompt < 1e-13 and abs(F[-1]) < 1e-15:
            break
        J = np.zeros((nz + 1, nz + 1))
        J[:nz, :nz] = Jn
        J[:nz, nz] = _rod_raw_slope(x_bank, c) * n
        J[nz, :nz] = 1.0 / nz
        step = np.linalg.solve(J, -F)
        n = n + step[:nz]
        x_bank = x_bank + step[nz]
    return n, x_bank

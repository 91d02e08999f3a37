"""Path simulation, self-financing wealth and replication diagnostics.

Grid mode holds positions fixed over each step (set at the left node) and
credits every asset with its exact discounted cumulative price increment:
node to node for survivors, node to default time for paths defaulting inside
the step.  Continuous mode (deterministic markets) re-solves the hedge at
Gauss-Legendre nodes inside the steps, so the only error left is quadrature.

Random numbers come in fixed blocks of paths; block ``j`` draws its normals
and its uniforms from two Philox streams keyed by (seed, j).  Block size does
not depend on the number of worker threads, so results are bit-identical for
any ``CDSHEDGE_MAX_WORKERS``.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .claims_contracts import CdsSpec, DefaultableClaim, FtdClaim
from .errors import DomainError, NonHedgeableError
from .hedge_engine import RESIDUAL_TOL, SINGULAR_RTOL, solve_system
from .market_model import (
    DeterministicIntensity,
    IntensityModel,
    MarketEnv,
    SquareRootIntensity,
    default_times_on_grid,
)
from .multi_name import (
    MultiNameModel,
    basket_cds_price,
    contagion_cds_value,
    first_defaulter,
    ftd_intensities,
    ftd_price,
    sample_joint_defaults,
)
from .quadrature import gauss_legendre
from .rolling_cds import RollingCdsSpec, RollingFamily
from .single_name_pricer import (
    AffineClaimKernel,
    cds_legs,
    claim_ex_dividend_price,
    claim_price_gradient,
)

MAX_WORKERS_ENV = "CDSHEDGE_MAX_WORKERS"
BLOCK_SIZE = 2048
NORMAL_STREAM, UNIFORM_STREAM = 0, 1


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get(MAX_WORKERS_ENV, "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# configuration and random streams
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    path_count: int
    step_count: int
    horizon: float
    seed: int = 0
    antithetic: bool = False
    brownian_steps: int | None = None
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if self.step_count < 2:
            raise DomainError("step_count must be at least 2")
        if self.path_count < 1:
            raise DomainError("path_count must be at least 1")
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")
        if self.seed < 0:
            raise DomainError("seed must be nonnegative")
        if self.block_size < 2 or self.block_size % 2:
            raise DomainError("block_size must be even")
        fine = self.fine_steps
        if fine % self.step_count:
            raise DomainError("brownian_steps must be a multiple of step_count")

    @property
    def fine_steps(self) -> int:
        return self.step_count if self.brownian_steps is None else self.brownian_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.step_count + 1)

    @property
    def dt(self) -> float:
        return self.horizon / self.step_count

    def blocks(self):
        """(block index, first path, size) for every block."""
        out = []
        for j, start in enumerate(range(0, self.path_count, self.block_size)):
            out.append((j, start, min(self.block_size, self.path_count - start)))
        return out

    def with_steps(self, step_count: int) -> "SimConfig":
        return SimConfig(self.path_count, step_count, self.horizon, self.seed, self.antithetic,
                         self.brownian_steps, self.block_size)

    def with_paths(self, path_count: int) -> "SimConfig":
        return SimConfig(path_count, self.step_count, self.horizon, self.seed, self.antithetic,
                         self.brownian_steps, self.block_size)


def block_generator(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, 2 * block + stream], dtype=np.uint64)))


def brownian_increments(cfg: SimConfig, block: int, size: int, d: int) -> np.ndarray:
    """Increments on the simulation grid, shape (size, step_count, d)."""
    fine = cfg.fine_steps
    rng = block_generator(cfg.seed, block, NORMAL_STREAM)
    full = cfg.block_size
    if cfg.antithetic:
        half = rng.standard_normal((full // 2, fine, d))
        z = np.concatenate([half, -half])[:size]
    else:
        z = rng.standard_normal((full, fine, d))[:size]
    z *= math.sqrt(cfg.horizon / fine)
    ratio = fine // cfg.step_count
    if ratio > 1:
        z = z.reshape(size, cfg.step_count, ratio, d).sum(axis=2)
    return z


def uniform_draws(cfg: SimConfig, block: int, size: int, n: int) -> np.ndarray:
    """Uniforms in (0, 1] for default thresholds, shape (size, n)."""
    rng = block_generator(cfg.seed, block, UNIFORM_STREAM)
    full = cfg.block_size
    if cfg.antithetic:
        half = rng.random((full // 2, n))
        u = np.concatenate([half, 1.0 - half])[:size]
    else:
        u = rng.random((full, n))[:size]
    return 1.0 - u


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PathRecord:
    times: np.ndarray
    dW: np.ndarray
    states: np.ndarray | None
    survival: np.ndarray
    H: np.ndarray
    tau: float
    dM: np.ndarray
    taus: np.ndarray | None = None
    first: int = 0


@dataclass
class PathBatch:
    """Simulated paths; arrays have the path axis first.

    ``threshold`` is the exponential level hit by the cumulative hazard at
    default, so the compensator stopped at default is min(cumhaz, threshold).
    For baskets ``taus`` holds every name's default time, ``tau`` the first,
    ``first`` the index of the first defaulter, and ``comp_grid`` /
    ``comp_tau`` the per-name first-to-default compensators on the grid and at
    the first default.
    """

    cfg: SimConfig
    times: np.ndarray
    dW: np.ndarray
    states: np.ndarray | None
    survival: np.ndarray
    intensity: np.ndarray
    tau: np.ndarray
    cumhaz: np.ndarray | None = None
    threshold: np.ndarray | None = None
    model: object = None
    taus: np.ndarray | None = None
    first: np.ndarray | None = None
    ties: np.ndarray | None = None
    comp_grid: np.ndarray | None = None
    comp_tau: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return len(self.tau)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def multi(self) -> bool:
        return self.taus is not None

    @property
    def n_names(self) -> int:
        return self.taus.shape[1] if self.multi else 1

    def state_at(self, k: int, idx=None):
        if self.states is None:
            return None
        s = self.states[:, k]
        return s if idx is None else s[idx]

    @property
    def H(self) -> np.ndarray:
        return (self.tau[:, None] <= self.times[None, :]).astype(float)

    @property
    def dM(self) -> np.ndarray:
        """Compensated default-indicator increments; (P, N) or (P, N, n) for baskets."""
        if not self.multi:
            stopped = np.minimum(self.cumhaz, self.threshold[:, None])
            return np.diff(self.H, axis=1) - np.diff(stopped, axis=1)
        t = self.times
        alive_end = self.tau[:, None] > t[None, :]
        comp = np.where(alive_end[..., None], self.comp_grid[None, :, :], self.comp_tau[:, None, :])
        jumps = np.zeros((self.n_paths, self.n_steps + 1, self.n_names))
        hit = np.isfinite(self.tau) & (self.tau <= t[-1])
        rows = np.nonzero(hit)[0]
        kk = np.searchsorted(t, self.tau[rows], side="left")
        jumps[rows, kk, self.first[rows]] = 1.0
        Hn = np.cumsum(jumps, axis=1)
        return np.diff(Hn, axis=1) - np.diff(comp, axis=1)

    def record(self, i: int) -> PathRecord:
        return PathRecord(self.times, self.dW[i], None if self.states is None else self.states[i],
                          self.survival[i], self.H[i], float(self.tau[i]), self.dM[i],
                          None if self.taus is None else self.taus[i],
                          0 if self.first is None else int(self.first[i]))

    def __len__(self):
        return self.n_paths

    def __iter__(self):
        return (self.record(i) for i in range(self.n_paths))


def _euler_square_root(model: SquareRootIntensity, x0: float, dt: float, dW: np.ndarray):
    """Full-truncation Euler states and left-point cumulative hazard."""
    P, N = dW.shape[:2]
    x = np.empty((P, N + 1))
    lam = np.empty((P, N + 1))
    cum = np.zeros((P, N + 1))
    x[:, 0] = x0
    for k in range(N):
        xp = np.maximum(x[:, k], 0.0)
        lam[:, k] = model.scale * xp
        cum[:, k + 1] = cum[:, k] + lam[:, k] * dt
        x[:, k + 1] = x[:, k] + model.a * (model.b - xp) * dt + model.sigma * np.sqrt(xp) * dW[:, k, 0]
    lam[:, N] = model.scale * np.maximum(x[:, N], 0.0)
    return x, lam, cum


def _single_block(model: IntensityModel, cfg: SimConfig, block: int, size: int):
    t = cfg.times
    d = model.driver_dim
    dW = brownian_increments(cfg, block, size, d)
    E = -np.log(uniform_draws(cfg, block, size, 1)[:, 0])
    if isinstance(model, SquareRootIntensity):
        x, lam, cum = _euler_square_root(model, model.x0, cfg.dt, dW)
        tau = default_times_on_grid(t, cum, E)
    elif isinstance(model, DeterministicIntensity):
        W = np.concatenate([np.zeros((size, 1, d)), np.cumsum(dW, axis=1)], axis=1)
        x = W[..., 0] if d == 1 else W
        cum = np.broadcast_to(model.cumulative_hazard(t), (size, len(t)))
        lam = np.broadcast_to(np.broadcast_to(model.hazard(t), t.shape), (size, len(t)))
        tau = np.asarray(model.inverse_cumulative_hazard(E), dtype=float)
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    return dW, x, lam, np.asarray(cum), tau, E


def _run_blocks(fn, cfg):
    blocks = cfg.blocks()
    workers = min(max_workers(), len(blocks))
    if workers <= 1:
        return [fn(*b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), blocks))


def simulate_paths(model, cfg: SimConfig) -> PathBatch:
    """Simulate drivers and default times for a single-name model or a basket."""
    if isinstance(model, MultiNameModel):
        return _simulate_basket(model, cfg)
    parts = _run_blocks(lambda j, start, size: _single_block(model, cfg, j, size), cfg)
    dW, x, lam, cum, tau, E = (np.concatenate([p[i] for p in parts]) for i in range(6))
    return PathBatch(cfg, cfg.times, dW, x, np.exp(-cum), lam, tau, cum, E, model)


def _ftd_compensator_grid(mnm: MultiNameModel, times: np.ndarray, nodes: int = 8):
    x, w = gauss_legendre(nodes)
    lo, hi = times[:-1], times[1:]
    half = 0.5 * (hi - lo)
    u = lo[:, None] + half[:, None] * (x + 1.0)
    lam = ftd_intensities(mnm, u).per_name  # (N, nodes, n)
    steps = np.einsum("kjn,j->kn", lam, w) * half[:, None]
    return np.concatenate([np.zeros((1, mnm.n)), np.cumsum(steps, axis=0)])


def _ftd_compensator_at(mnm, times, grid, tau, nodes: int = 8):
    out = np.zeros((len(tau), mnm.n))
    fin = np.isfinite(tau) & (tau <= times[-1])
    out[~fin] = grid[-1]
    if not np.any(fin):
        return out
    tt = tau[fin]
    k = np.clip(np.searchsorted(times, tt, side="left") - 1, 0, len(times) - 2)
    x, w = gauss_legendre(nodes)
    half = 0.5 * (tt - times[k])
    u = times[k][:, None] + half[:, None] * (x + 1.0)
    lam = ftd_intensities(mnm, u).per_name
    out[fin] = grid[k] + np.einsum("pjn,j->pn", lam, w) * half[:, None]
    return out


def _simulate_basket(mnm: MultiNameModel, cfg: SimConfig) -> PathBatch:
    if mnm.factor is not None:
        raise NotImplementedError("basket simulation supports deterministic hazards")
    t = cfg.times

    def block(j, start, size):
        if cfg.antithetic and mnm.copula.name == "independence":
            U = uniform_draws(cfg, j, size, mnm.n)
        else:
            U = mnm.copula.sample(block_generator(cfg.seed, j, UNIFORM_STREAM), cfg.block_size, mnm.n)[:size]
            U = np.clip(U, np.finfo(float).tiny, 1.0)
        return sample_joint_defaults(mnm, U)[0]

    taus = np.concatenate(_run_blocks(block, cfg))
    first, ties = first_defaulter(taus)
    tau = taus.min(axis=1)
    P = len(tau)
    G = np.broadcast_to(mnm.joint_survival(t), (P, len(t)))
    lam = np.broadcast_to(ftd_intensities(mnm, t).total, (P, len(t)))
    grid = _ftd_compensator_grid(mnm, t)
    comp_tau = _ftd_compensator_at(mnm, t, grid, tau)
    return PathBatch(cfg, t, np.zeros((P, cfg.step_count, 0)), None, G, lam, tau, model=mnm, taus=taus,
                     first=first, ties=ties, comp_grid=grid, comp_tau=comp_tau)


# --------------------------------------------------------------------------
# survival Monte Carlo (streaming)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalEstimate:
    maturity: float
    estimate: float
    standard_error: float
    closed_form: float

    @property
    def z(self) -> float:
        return (self.estimate - self.closed_form) / self.standard_error if self.standard_error > 0 else 0.0


def survival_monte_carlo(model: IntensityModel, maturities: Sequence[float], cfg: SimConfig,
                         estimator: str = "indicator", chunk_blocks: int = 8) -> list[SurvivalEstimate]:
    """Monte Carlo P(tau > T) on the simulation grid without storing paths.

    ``estimator="indicator"`` averages 1{tau > T}; ``"conditional"`` averages
    exp(-cumulative hazard), which has lower variance.
    """
    mats = np.asarray(maturities, dtype=float)
    t = cfg.times
    cols = np.searchsorted(t, mats - 1e-12)
    if np.any(np.abs(t[np.minimum(cols, len(t) - 1)] - mats) > 1e-9):
        raise DomainError("maturities must lie on the simulation grid")
    s1 = np.zeros(len(mats))
    s2 = np.zeros(len(mats))
    blocks = cfg.blocks()
    for c in range(0, len(blocks), chunk_blocks):
        part = blocks[c:c + chunk_blocks]
        for j, start, size in part:
            dW, x, lam, cum, tau, E = _single_block(model, cfg, j, size)
            if estimator == "indicator":
                v = (tau[:, None] > mats[None, :]).astype(float)
            else:
                v = np.exp(-cum[:, cols])
            s1 += v.sum(axis=0)
            s2 += (v * v).sum(axis=0)
    n = cfg.path_count
    mean = s1 / n
    var = np.maximum(s2 / n - mean ** 2, 0.0) * n / max(n - 1, 1)
    se = np.sqrt(var / n)
    closed = [float(np.asarray(model.survival(0.0, T, model.initial_state()))) for T in mats]
    return [SurvivalEstimate(float(T), float(m), float(s), c) for T, m, s, c in zip(mats, mean, se, closed)]


# --------------------------------------------------------------------------
# assets on the grid
# --------------------------------------------------------------------------

@dataclass
class NodeEval:
    """Discounted cumulative value, ex-dividend price and exposures on alive paths."""

    value: np.ndarray
    price: np.ndarray
    jump: np.ndarray
    diffusion: np.ndarray
    extra: object = None


def _accrued(env: MarketEnv, rate, s0, s1):
    """Integral of rate / B over [s0, s1] (broadcast)."""
    if not callable(rate) and rate == 0:
        return np.zeros(np.broadcast_shapes(np.shape(s0), np.shape(s1)))
    return np.asarray(env.accrual_value(rate, s0, s1))


def _full(x, m):
    return np.broadcast_to(np.asarray(x, dtype=float), (m,)).astype(float)


class GridAsset:
    """Interface of tradeable assets and target claims for the grid engine."""

    n_names = 1
    driver_dim = 1
    rate = 0.0

    def prepare(self, batch: PathBatch):
        self.batch = batch
        self.B = self.env.savings(batch.times)
        return self

    def node(self, k: int, idx: np.ndarray) -> NodeEval:
        raise NotImplementedError

    def advance(self, k: int, idx: np.ndarray, ev: NodeEval, dflt: np.ndarray):
        """End-of-step discounted values for the step's alive paths and the next node's eval for survivors."""
        raise NotImplementedError

    # continuous mode (deterministic markets)
    def curve(self, u: np.ndarray):
        """Ex-dividend price (len(u),) and value at default by first defaulter (len(u), n)."""
        raise NotImplementedError


class SingleNameAsset(GridAsset):
    """A defaultable claim or CDS on one name."""

    def __init__(self, model: IntensityModel, env: MarketEnv, contract):
        self.model, self.env = model, env
        self.contract = contract
        self.claim = contract.as_claim() if isinstance(contract, CdsSpec) else contract
        self.driver_dim = model.driver_dim
        c = self.claim
        self.rate = c.dividend_rate
        self.maturity = c.maturity
        self.state_free = not (c.recovery_uses_state or callable(c.payoff))

    def prepare(self, batch):
        self.batch = batch
        t = batch.times
        self.B = self.env.savings(t)
        self.acc = _accrued(self.env, self.claim.dividend_rate, 0.0, np.minimum(t, self.claim.maturity))
        self._det_price = None
        if isinstance(self.model, DeterministicIntensity) and self.state_free:
            T = self.claim.maturity
            self._det_price = np.array([claim_ex_dividend_price(self.model, self.env, self.claim, tk)
                                        if tk < T - 1e-12 else 0.0 for tk in t])
        return self

    def _payoff(self, x):
        X = self.claim.payoff
        return np.asarray(X(x), dtype=float) if callable(X) else float(X)

    def node(self, k, idx):
        t = self.batch.times[k]
        m = len(idx)
        B = self.B[k]
        x = self.batch.state_at(k, idx)
        c = self.claim
        if t >= c.maturity - 1e-12:
            value = _full(self._payoff(x), m) / B + self.acc[k]
            return NodeEval(value, np.zeros(m), np.zeros((m, 1)), np.zeros((m, self.driver_dim)))
        if self._det_price is not None:
            price = np.full(m, self._det_price[k])
            grad_load = np.zeros((m, self.driver_dim))
        elif isinstance(self.model, SquareRootIntensity):
            p, g = AffineClaimKernel(self.model, self.env, t, c.maturity, [c]).evaluate(x)
            price = p[0]
            grad_load = self.model.apply_loading(x, g[0])
        else:
            price = np.asarray(claim_ex_dividend_price(self.model, self.env, c, t, x))
            grad_load = self.model.apply_loading(x, claim_price_gradient(self.model, self.env, c, t, x))
        surv = self.batch.survival[idx, k]
        jump = (_full(c.recovery_at(t, x), m) - price)[:, None]
        diff = grad_load * (surv / B)[:, None]
        return NodeEval(price / B + self.acc[k], price, jump, diff)

    def advance(self, k, idx, ev, dflt):
        end = np.empty(len(idx))
        surv_idx = idx[~dflt]
        nxt = self.node(k + 1, surv_idx) if len(surv_idx) else None
        if nxt is not None:
            end[~dflt] = nxt.value
        if np.any(dflt):
            d_idx = idx[dflt]
            tau = self.batch.tau[d_idx]
            x = self.batch.state_at(k, d_idx)
            z = _full(self.claim.recovery_at(tau, x), len(d_idx))
            end[dflt] = z / self.env.savings(tau) + self.acc[k] + _accrued(
                self.env, self.claim.dividend_rate, self.batch.times[k], tau)
        return end, nxt

    def curve(self, u):
        c = self.claim
        price = np.array([claim_ex_dividend_price(self.model, self.env, c, ui) if ui < c.maturity - 1e-12
                          else float(self._payoff(None)) for ui in np.atleast_1d(u)])
        return price, np.asarray(c.recovery_at(np.atleast_1d(u)), dtype=float)[:, None]


class RollingAsset(GridAsset):
    """Rolling CDS rolled at every grid node: enter at market at t_k, unwind at t_{k+1}."""

    def __init__(self, model: IntensityModel, env: MarketEnv, family):
        self.model, self.env = model, env
        self.family = family
        self.driver_dim = model.driver_dim

    def member(self, t: float) -> RollingCdsSpec:
        if isinstance(self.family, RollingFamily):
            return self.family.contract_at(t)
        return self.family

    def _legs(self, spec, t, x, m):
        if isinstance(self.model, SquareRootIntensity):
            legs = [DefaultableClaim(spec.expiry, 0.0, 0.0, spec.protection),
                    DefaultableClaim(spec.expiry, 0.0, 1.0, 0.0)]
            p, g = AffineClaimKernel(self.model, self.env, t, spec.expiry, legs).evaluate(x)
            return p[0], p[1], g[0], g[1]
        l = cds_legs(self.model, self.env, spec.unit_cds(), t)
        z = np.zeros(m)
        return _full(l.protection_value, m), _full(l.annuity_value, m), z, z

    def _eval(self, spec, k, idx, legs):
        prot, ann, gp, ga = legs
        t = self.batch.times[k]
        m = len(idx)
        kappa = prot / ann
        x = self.batch.state_at(k, idx)
        if isinstance(self.model, SquareRootIntensity):
            load = self.model.apply_loading(x, gp - kappa * ga)
        else:
            load = np.zeros((m, self.driver_dim))
        diff = load * (self.batch.survival[idx, k] / self.B[k])[:, None]
        jump = _full(spec.protection_at(t), m)[:, None]
        return NodeEval(np.zeros(m), np.zeros(m), jump, diff, (spec, kappa))

    def node(self, k, idx):
        t = self.batch.times[k]
        spec = self.member(t)
        if t >= spec.expiry:
            raise DomainError("rolling contract expired inside the horizon")
        return self._eval(spec, k, idx, self._legs(spec, t, self.batch.state_at(k, idx), len(idx)))

    def advance(self, k, idx, ev, dflt):
        spec, kappa = ev.extra
        t0, t1 = self.batch.times[k], self.batch.times[k + 1]
        end = np.empty(len(idx))
        nxt = None
        s = ~dflt
        if np.any(s):
            s_idx = idx[s]
            legs = self._legs(spec, t1, self.batch.state_at(k + 1, s_idx), len(s_idx))
            prot, ann = legs[0], legs[1]
            end[s] = (prot - kappa[s] * ann) / self.B[k + 1] - kappa[s] * self.env.annuity(t0, t1)
            if k + 1 < self.batch.n_steps:
                # same contract: its legs at t_{k+1} also give the next entry spread
                nxt = self._eval(spec, k + 1, s_idx, legs) if self.member(t1) == spec else self.node(k + 1, s_idx)
        if np.any(dflt):
            tau = self.batch.tau[idx[dflt]]
            end[dflt] = spec.protection_at(tau) / self.env.savings(tau) - kappa[dflt] * self.env.annuity(t0, tau)
        return end, nxt

    def curve(self, u):
        u = np.atleast_1d(u)
        prot = np.array([self.member(ui).protection_at(ui) for ui in u], dtype=float)
        return np.zeros(len(u)), prot[:, None]


class _BasketAsset(GridAsset):
    driver_dim = 0

    def __init__(self, mnm: MultiNameModel, env: MarketEnv):
        if mnm.factor is not None:
            raise NotImplementedError("basket assets support deterministic hazards")
        self.mnm, self.env = mnm, env
        self.n_names = mnm.n

    # subclasses: maturity, rate, price_at(t), jumps_at(t) -> (n,), jump_for(t, who), payoff
    def prepare(self, batch):
        self.batch = batch
        t = batch.times
        self.B = self.env.savings(t)
        self.acc = _accrued(self.env, self.rate, 0.0, np.minimum(t, self.maturity))
        live = t < self.maturity - 1e-12
        self._price = np.array([self.price_at(tk) if ok else 0.0 for tk, ok in zip(t, live)])
        self._jumps = np.array([self.jumps_at(tk) if ok else np.zeros(self.n_names) for tk, ok in zip(t, live)])
        return self

    def node(self, k, idx):
        m = len(idx)
        t = self.batch.times[k]
        if t >= self.maturity - 1e-12:
            return NodeEval(np.full(m, self.payoff / self.B[k] + self.acc[k]), np.zeros(m),
                            np.zeros((m, self.n_names)), np.zeros((m, 0)))
        p = self._price[k]
        jump = np.broadcast_to(self._jumps[k] - p, (m, self.n_names)).copy()
        return NodeEval(np.full(m, p / self.B[k] + self.acc[k]), np.full(m, p), jump, np.zeros((m, 0)))

    def advance(self, k, idx, ev, dflt):
        end = np.empty(len(idx))
        s_idx = idx[~dflt]
        nxt = self.node(k + 1, s_idx) if len(s_idx) else None
        if nxt is not None:
            end[~dflt] = nxt.value
        if np.any(dflt):
            d_idx = idx[dflt]
            tau = self.batch.tau[d_idx]
            who = self.batch.first[d_idx]
            vals = np.array([self.jump_for(ti, wi) for ti, wi in zip(tau, who)])
            end[dflt] = vals / self.env.savings(tau) + self.acc[k] + _accrued(
                self.env, self.rate, self.batch.times[k], tau)
        return end, nxt

    def curve(self, u):
        u = np.atleast_1d(u)
        live = u < self.maturity - 1e-12
        price = np.array([self.price_at(ui) if ok else self.payoff for ui, ok in zip(u, live)])
        jumps = np.array([self.jumps_at(ui) if ok else np.zeros(self.n_names) for ui, ok in zip(u, live)])
        return price, jumps


class BasketCdsAsset(_BasketAsset):
    """Single-name CDS on a basket name; values after another name's default are contagion values."""

    def __init__(self, mnm, env, cds: CdsSpec):
        super().__init__(mnm, env)
        self.cds = cds
        self.maturity = cds.maturity
        self.rate = -cds.spread
        self.payoff = 0.0

    def price_at(self, t):
        return basket_cds_price(self.mnm, self.env, self.cds, t)

    def jump_for(self, t, who):
        if who == self.cds.reference_name - 1:
            return float(self.cds.protection_at(t))
        if t >= self.maturity - 1e-12:
            return 0.0
        return float(contagion_cds_value(self.mnm, self.env, self.cds, t, int(who) + 1))

    def jumps_at(self, t):
        return np.array([self.jump_for(t, j) for j in range(self.n_names)])


class FtdAsset(_BasketAsset):
    """First-to-default claim."""

    def __init__(self, mnm, env, claim: FtdClaim):
        super().__init__(mnm, env)
        if callable(claim.payoff) or claim.recovery_uses_state:
            raise TypeError("basket claims take constant payoffs and time-only recoveries")
        self.claim = claim
        self.maturity = claim.maturity
        self.rate = claim.dividend_rate
        self.payoff = float(claim.payoff)

    def price_at(self, t):
        return ftd_price(self.mnm, self.env, self.claim, t)

    def jump_for(self, t, who):
        return float(self.claim.recovery_at(int(who), t))

    def jumps_at(self, t):
        return np.array([self.jump_for(t, j) for j in range(self.n_names)])


def make_asset(model, env, contract) -> GridAsset:
    if isinstance(contract, GridAsset):
        return contract
    if isinstance(model, MultiNameModel):
        if isinstance(contract, FtdClaim):
            return FtdAsset(model, env, contract)
        if isinstance(contract, CdsSpec):
            return BasketCdsAsset(model, env, contract)
        raise TypeError("basket assets are CDSs on basket names or FtD claims")
    if isinstance(contract, (RollingCdsSpec, RollingFamily)):
        return RollingAsset(model, env, contract)
    return SingleNameAsset(model, env, contract)


# --------------------------------------------------------------------------
# wealth and replication
# --------------------------------------------------------------------------

HedgeProvider = Callable[[int, np.ndarray, list, NodeEval], np.ndarray]


def matching_provider(singular_rtol: float = SINGULAR_RTOL, residual_tol: float = RESIDUAL_TOL) -> HedgeProvider:
    """Hedge provider solving the jump and diffusion matching conditions path by path."""

    def provider(k, idx, evals, target):
        N = np.stack([np.concatenate([e.jump, e.diffusion], axis=1) for e in evals], axis=-1)
        rhs = np.concatenate([target.jump, target.diffusion], axis=1)
        phi, cond, singular, resid = solve_system(N, rhs, singular_rtol, residual_tol)
        provider.last = (cond, singular, resid)
        return phi
    provider.last = None
    return provider


@dataclass
class WealthPaths:
    """Discounted wealth on the grid (held constant after default)."""

    values: np.ndarray
    mean_positions: np.ndarray
    mean_bank: np.ndarray
    condition_number: np.ndarray
    max_residual: float
    singular_paths: np.ndarray
    default_jump: np.ndarray
    mean_target_price: np.ndarray | None = None


def wealth_rollforward(batch: PathBatch, instruments: Sequence[GridAsset], hedge_provider: HedgeProvider,
                       env: MarketEnv, initial_wealth: float, target: GridAsset | None = None,
                       claim_path: np.ndarray | None = None) -> WealthPaths:
    """Roll the discounted wealth of a self-financing strategy along every path.

    Each step adds sum_i phi_i * (end value - node value) of instrument i, with
    positions from ``hedge_provider(k, idx, node evals, target eval)`` at the
    left node.  If ``target`` is given its discounted cumulative price is
    written into ``claim_path``.
    """
    P, N = batch.n_paths, batch.n_steps
    k_inst = len(instruments)
    for a in instruments:
        a.prepare(batch)
    if target is not None:
        target.prepare(batch)
    V = np.empty((P, N + 1))
    V[:, 0] = initial_wealth
    mean_pos = np.full((N, k_inst), np.nan)
    mean_bank = np.full(N, np.nan)
    cond_mean = np.full(N, np.nan)
    singular = np.zeros(P, dtype=bool)
    jump_err = np.zeros(P)
    max_resid = 0.0
    target_price = np.zeros(N + 1) if target is not None else None
    B = env.savings(batch.times)
    idx = np.nonzero(batch.tau > batch.times[0])[0]
    evals = [a.node(0, idx) for a in instruments]
    tev = target.node(0, idx) if target is not None else None
    if claim_path is not None:
        claim_path[:, 0] = initial_wealth
        claim_path[idx, 0] = tev.value
    for k in range(N):
        t1 = batch.times[k + 1]
        if target is not None and len(idx):
            target_price[k] = tev.price.sum() / P
        if len(idx) == 0:
            V[:, k + 1] = V[:, k]
            if claim_path is not None:
                claim_path[:, k + 1] = claim_path[:, k]
            continue
        phi = hedge_provider(k, idx, evals, tev)
        last = getattr(hedge_provider, "last", None)
        if last is not None:
            cond, sing, resid = last
            singular[idx[np.asarray(sing, bool)]] = True
            cond_mean[k] = float(np.mean(np.where(np.isfinite(cond), cond, np.nan)))
            max_resid = max(max_resid, float(np.max(resid)))
        mean_pos[k] = phi.mean(axis=0)
        prices = np.stack([e.price for e in evals], axis=1)
        mean_bank[k] = float(np.mean((V[idx, k] * B[k] - np.sum(phi * prices, axis=1)) / B[k]))
        dflt = batch.tau[idx] <= t1
        gain = np.zeros(len(idx))
        nexts = []
        for i, (a, e) in enumerate(zip(instruments, evals)):
            end, nxt = a.advance(k, idx, e, dflt)
            gain += phi[:, i] * (end - e.value)
            nexts.append(nxt)
        V[:, k + 1] = V[:, k]
        V[idx, k + 1] = V[idx, k] + gain
        if target is not None:
            tend, tnext = target.advance(k, idx, tev, dflt)
            if claim_path is not None:
                claim_path[:, k + 1] = claim_path[:, k]
                claim_path[idx, k + 1] = tend
            if np.any(dflt):
                d_idx = idx[dflt]
                jump_err[d_idx] = (gain[dflt] - (tend - tev.value)[dflt]) * env.savings(batch.tau[d_idx])
            tev = tnext
        idx = idx[~dflt]
        evals = nexts
    if target is not None and len(idx) and tev is not None:
        target_price[N] = tev.price.sum() / P
    return WealthPaths(V, mean_pos, mean_bank, cond_mean, max_resid, singular, jump_err, target_price)


@dataclass(frozen=True)
class ReplicationReport:
    mean_error: float
    rmse: float
    max_abs_error: float
    sup_error_quantiles: dict
    max_default_mismatch: float
    max_residual: float
    singular_paths: int
    path_count: int
    step_count: int


def replication_error(wealth: np.ndarray, claim: np.ndarray, savings: np.ndarray | None = None,
                      default_mismatch: np.ndarray | None = None, max_residual: float = 0.0,
                      singular: np.ndarray | None = None) -> ReplicationReport:
    """Statistics of V - S^c on the grid, in money of each grid date.

    ``wealth`` and ``claim`` are discounted paths (paths, nodes), constant after
    default; ``savings`` converts them back to undiscounted values.
    """
    wealth = np.asarray(wealth, dtype=float)
    claim = np.asarray(claim, dtype=float)
    if wealth.shape != claim.shape:
        raise DomainError("wealth and claim paths must share the grid")
    err = wealth - claim
    if savings is not None:
        err = err * np.asarray(savings)[None, :]
    keep = np.ones(len(err), bool) if singular is None else ~np.asarray(singular, bool)
    e = err[keep]
    if not np.all(np.isfinite(e)):
        raise DomainError("non-finite replication error")
    term = e[:, -1]
    sup = np.max(np.abs(e), axis=1) if e.size else np.zeros(0)
    q = {p: float(np.quantile(sup, p)) if sup.size else 0.0 for p in (0.5, 0.9, 0.99, 1.0)}
    dm = 0.0 if default_mismatch is None else float(np.max(np.abs(np.asarray(default_mismatch)[keep]), initial=0.0))
    return ReplicationReport(float(term.mean()) if term.size else 0.0,
                             float(np.sqrt(np.mean(term ** 2))) if term.size else 0.0,
                             float(np.max(np.abs(term), initial=0.0)), q, dm, float(max_residual),
                             int((~keep).sum()), int(len(err)), int(err.shape[1] - 1))


@dataclass
class ReplicationResult:
    report: ReplicationReport
    wealth: np.ndarray
    claim: np.ndarray
    savings: np.ndarray
    rollforward: WealthPaths | None
    initial_price: float


def replicate(batch: PathBatch, instruments: Sequence, target, env: MarketEnv, model=None,
              mode: str = "grid", hedge_provider: HedgeProvider | None = None) -> ReplicationResult:
    """Replicate ``target`` with ``instruments`` along simulated paths.

    Instruments and target are contracts (CdsSpec, claims, rolling specs or
    families, FtdClaim) or ready-made grid assets.  The initial wealth is the
    target's price at time 0.
    """
    model = batch.model if model is None else model
    insts = [make_asset(model, env, c) for c in instruments]
    tgt = make_asset(model, env, target)
    if mode == "continuous":
        return _replicate_continuous(batch, insts, tgt, env)
    if mode != "grid":
        raise ValueError(f"unknown mode {mode!r}")
    tgt.prepare(batch)
    idx0 = np.arange(batch.n_paths)
    v0 = float(tgt.node(0, idx0[:1]).value[0])
    claim_path = np.empty((batch.n_paths, batch.n_steps + 1))
    wp = wealth_rollforward(batch, insts, hedge_provider or matching_provider(), env, v0, tgt, claim_path)
    B = env.savings(batch.times)
    rep = replication_error(wp.values, claim_path, B, wp.default_jump, wp.max_residual, wp.singular_paths)
    return ReplicationResult(rep, wp.values, claim_path, B, wp, v0)


def _hazards(batch, u):
    """First-to-default intensities by name at times u, shape (len(u), n)."""
    m = batch.model
    if isinstance(m, MultiNameModel):
        return np.atleast_2d(ftd_intensities(m, u).per_name)
    return np.broadcast_to(np.asarray(m.hazard(u), dtype=float), np.shape(u))[:, None]


def _continuous_integrand(batch, insts, tgt, env, u):
    """Hedged drift sum_i phi_i mu_i and the target's drift at times u."""
    lam = _hazards(batch, u)
    curves = [a.curve(u) for a in insts]
    S_t, J_t = tgt.curve(u)
    N = np.stack([J - S[:, None] for S, J in curves], axis=-1)  # (m, n, k)
    rhs = J_t - S_t[:, None]
    phi, cond, singular, resid = solve_system(N, rhs)
    Binv = 1.0 / env.savings(u)
    mu = np.stack([Binv * np.sum(lam * (S[:, None] - J), axis=1) for S, J in curves], axis=1)
    return np.sum(phi * mu, axis=1), phi, curves, (S_t, J_t), bool(np.any(singular)), float(np.max(resid))


def _replicate_continuous(batch, insts, tgt, env, nodes: int = 8) -> ReplicationResult:
    model = batch.model
    if not (isinstance(model, MultiNameModel) and model.factor is None) and \
            not isinstance(model, DeterministicIntensity):
        raise DomainError("continuous rebalancing needs a deterministic market")
    t = batch.times
    N = batch.n_steps
    x, w = gauss_legendre(nodes)
    breaks = set(env.knots) | set(model.breakpoints(0.0, float(t[-1])))
    stats = {"resid": 0.0, "singular": False}

    def integral(a, b):
        cuts = [a, *sorted(c for c in breaks if a < c < b), b]
        total = 0.0
        for lo, hi in zip(cuts, cuts[1:]):
            if hi <= lo:
                continue
            half = 0.5 * (hi - lo)
            val, _, _, _, sing, res = _continuous_integrand(batch, insts, tgt, env, lo + half * (x + 1.0))
            total += half * float(val @ w)
            stats["singular"] |= sing
            stats["resid"] = max(stats["resid"], res)
        return total

    def claim_alive(u):
        S, _ = tgt.curve(np.array([u]))
        return float(S[0] / env.savings(u) + _accrued(env, tgt.rate, 0.0, u))

    v0 = claim_alive(0.0)
    pre = np.empty(N + 1)
    pre[0] = v0
    for k in range(N):
        pre[k + 1] = pre[k] + integral(t[k], t[k + 1])
    claim_pre = np.array([claim_alive(tk) for tk in t])
    P = batch.n_paths
    V = np.broadcast_to(pre, (P, N + 1)).copy()
    C = np.broadcast_to(claim_pre, (P, N + 1)).copy()
    mismatch = np.zeros(P)
    who_all = batch.first if batch.multi else np.zeros(P, dtype=int)
    for p in np.nonzero(batch.tau <= t[-1])[0]:
        tp = float(batch.tau[p])
        k = int(np.clip(np.searchsorted(t, tp, side="left") - 1, 0, N - 1))
        v_before = pre[k] + integral(t[k], tp)
        c_before = claim_alive(tp)
        _, phi, curves, (_, J_t), _, _ = _continuous_integrand(batch, insts, tgt, env, np.array([tp]))
        who = int(who_all[p])
        jumps = np.array([J[0, who] - S[0] for S, J in curves])
        Bt = float(env.savings(tp))
        v_after = v_before + float(phi[0] @ jumps) / Bt
        c_after = float(J_t[0, who]) / Bt + float(_accrued(env, tgt.rate, 0.0, tp))
        V[p, k + 1:] = v_after
        C[p, k + 1:] = c_after
        mismatch[p] = ((v_after - v_before) - (c_after - c_before)) * Bt
    if stats["singular"]:
        raise NonHedgeableError("matching system is singular inside the horizon", residual=stats["resid"])
    rep = replication_error(V, C, env.savings(t), mismatch, stats["resid"])
    return ReplicationResult(rep, V, C, env.savings(t), None, v0)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def cumulative_price_paths(batch: PathBatch, contract, env: MarketEnv, model=None) -> np.ndarray:
    """Discounted cumulative price of one asset on the grid (rolling assets: discounted wealth)."""
    model = batch.model if model is None else model
    asset = make_asset(model, env, contract).prepare(batch)
    P, N = batch.n_paths, batch.n_steps
    out = np.empty((P, N + 1))
    idx = np.nonzero(batch.tau > batch.times[0])[0]
    ev = asset.node(0, idx)
    out[:, 0] = 0.0
    out[idx, 0] = ev.value
    for k in range(N):
        out[:, k + 1] = out[:, k]
        if len(idx) == 0:
            continue
        dflt = batch.tau[idx] <= batch.times[k + 1]
        end, nxt = asset.advance(k, idx, ev, dflt)
        out[idx, k + 1] = out[idx, k] + (end - ev.value)
        idx = idx[~dflt]
        ev = nxt
    return out


@dataclass(frozen=True)
class MartingaleReport:
    z: np.ndarray
    mean: np.ndarray
    standard_error: np.ndarray
    threshold: float

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    @property
    def flagged(self) -> bool:
        return bool(np.any(np.abs(self.z) > self.threshold))


def martingale_test(values, discount=None, threshold: float = 4.0, min_paths: int = 1000) -> MartingaleReport:
    """z-scores of mean(value_k - value_0) at every grid time.

    ``values`` has shape (paths, nodes); ``discount`` (nodes,) multiplies them
    first when the process is given undiscounted.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2 or v.shape[0] < min_paths:
        raise DomainError(f"need a (paths, nodes) array with at least {min_paths} paths")
    if discount is not None:
        v = v * np.asarray(discount, dtype=float)[None, :]
    diff = v - v[:, :1]
    mean = diff.mean(axis=0)
    se = diff.std(axis=0, ddof=1) / math.sqrt(v.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, mean / np.where(se > 0, se, 1.0), np.where(np.abs(mean) > 0, np.inf, 0.0))
    return MartingaleReport(z, v.mean(axis=0), se, threshold)


@dataclass(frozen=True)
class ConvergenceRow:
    step_count: int
    rmse: float
    mean_error: float
    max_abs_error: float


def convergence_study(model, env: MarketEnv, instruments: Sequence, target, cfg: SimConfig,
                      step_counts: Sequence[int], mode: str = "grid") -> list[ConvergenceRow]:
    """Replication error for several step counts on coupled Brownian paths.

    All runs draw their Brownian motion on the finest grid and aggregate it, so
    the paths and default thresholds are shared across step counts.
    """
    finest = int(np.lcm.reduce([int(s) for s in step_counts]))
    rows = []
    for n in step_counts:
        c = SimConfig(cfg.path_count, int(n), cfg.horizon, cfg.seed, cfg.antithetic, finest, cfg.block_size)
        batch = simulate_paths(model, c)
        res = replicate(batch, instruments, target, env, mode=mode)
        rows.append(ConvergenceRow(int(n), res.report.rmse, res.report.mean_error, res.report.max_abs_error))
    return rows


def convergence_ratios(rows: Sequence[ConvergenceRow]) -> list[float]:
    return [a.rmse / b.rmse if b.rmse > 0 else math.inf for a, b in zip(rows, rows[1:])]

"""Copula-coupled default times, first-to-default pricing and basket hedges.

Marginal hazards are deterministic.  Name i survives to t with probability
K_i(t) = exp(-Gamma_i(t)); joint survival of all names is C(K_1(t), ..., K_n(t)).
An optional common square-root factor multiplies constant hazards; it is
supported with the independence copula, where every basket quantity reduces to
a single-name affine computation.

Conditional laws used for CDSs on basket names at a time t with all names alive
(see docs/contagion.md):

* pre-default, name i survives to u with probability C(v(u)) / C(v(t)),
* after name j defaults first at t, with probability
  dC/dv_j(v(u)) / dC/dv_j(v(t)),

where v(u) is the vector of marginals at t with entry i moved to K_i(u).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .claims_contracts import CdsSpec, DefaultableClaim, FtdClaim, evaluate_time_fn
from .errors import DomainError, NonHedgeableError
from .hedge_engine import HedgeInstrument, HedgePlan, HedgeTarget, solve_matching
from .market_model import (
    ConstantIntensity,
    DeterministicIntensity,
    HazardCurve,
    MarketEnv,
    SquareRootIntensity,
    state_gradient,
)
from .quadrature import integrate
from .single_name_pricer import cds_ex_dividend_price, claim_ex_dividend_price, claim_price_gradient


# --------------------------------------------------------------------------
# copulas
# --------------------------------------------------------------------------

class Copula:
    name = ""

    def value(self, v):
        raise NotImplementedError

    def partial(self, v, j: int):
        raise NotImplementedError

    def mixed(self, v, i: int, j: int):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int, n: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Independence(Copula):
    name = "independence"

    def value(self, v):
        return np.prod(np.asarray(v, dtype=float), axis=-1)

    def partial(self, v, j):
        v = np.asarray(v, dtype=float)
        return np.prod(np.delete(v, j, axis=-1), axis=-1)

    def mixed(self, v, i, j):
        v = np.asarray(v, dtype=float)
        return np.prod(np.delete(v, [i, j], axis=-1), axis=-1)

    def sample(self, rng, size, n):
        return rng.random((size, n))


@dataclass(frozen=True)
class Clayton(Copula):
    theta: float
    name = "clayton"

    def __post_init__(self):
        if not (math.isfinite(self.theta) and self.theta > 0):
            raise DomainError("Clayton parameter must be positive")

    def _log_s(self, v):
        # log of sum(v^-theta) - n + 1, stable for small theta
        logv = np.log(np.asarray(v, dtype=float))
        return np.log1p(np.sum(np.expm1(-self.theta * logv), axis=-1))

    def value(self, v):
        return np.exp(-self._log_s(v) / self.theta)

    def partial(self, v, j):
        v = np.asarray(v, dtype=float)
        th = self.theta
        return np.exp(-(th + 1.0) * np.log(v[..., j]) - (1.0 / th + 1.0) * self._log_s(v))

    def mixed(self, v, i, j):
        v = np.asarray(v, dtype=float)
        th = self.theta
        return (1.0 + th) * np.exp(-(th + 1.0) * (np.log(v[..., i]) + np.log(v[..., j]))
                                   - (1.0 / th + 2.0) * self._log_s(v))

    def sample(self, rng, size, n):
        # gamma frailty: U = (1 + E / V)^(-1/theta), V ~ Gamma(1/theta)
        V = rng.gamma(1.0 / self.theta, 1.0, size=(size, 1))
        E = rng.exponential(1.0, size=(size, n))
        return np.exp(-np.log1p(E / V) / self.theta)


def copula_value(copula: Copula, u) -> float | np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(u > 1):
        raise DomainError("copula arguments must lie in (0, 1]")
    out = copula.value(u)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiNameModel:
    hazards: tuple
    copula: Copula = field(default_factory=Independence)
    factor: SquareRootIntensity | None = None

    def __post_init__(self):
        hazards = tuple(ConstantIntensity(h) if isinstance(h, (int, float)) else h for h in self.hazards)
        if not hazards:
            raise DomainError("need at least one name")
        if not all(isinstance(h, DeterministicIntensity) for h in hazards):
            raise DomainError("marginal hazards must be deterministic")
        if self.factor is not None:
            if not isinstance(self.copula, Independence):
                raise DomainError("the common factor is supported with the independence copula only")
            if not all(isinstance(h, ConstantIntensity) for h in hazards):
                raise DomainError("the common factor scales constant hazards only")
        object.__setattr__(self, "hazards", hazards)

    @property
    def n(self) -> int:
        return len(self.hazards)

    @property
    def deterministic(self) -> bool:
        return self.factor is None

    @property
    def driver_dim(self) -> int:
        return 0 if self.factor is None else 1

    def gammas(self, t):
        return np.stack([np.broadcast_to(h.hazard(t), np.shape(t)) for h in self.hazards], axis=-1)

    def cumulative_hazards(self, t):
        return np.stack([h.cumulative_hazard(t) for h in self.hazards], axis=-1)

    def marginal_survival(self, t):
        return np.exp(-self.cumulative_hazards(t))

    def joint_survival(self, t):
        return self.copula.value(self.marginal_survival(t))

    def breakpoints(self, a, b):
        return tuple(sorted({k for h in self.hazards for k in h.breakpoints(a, b)}))

    def name_model(self, i: int) -> SquareRootIntensity:
        """Single-name model of name i (0-based) under the common factor."""
        f = self.factor
        return SquareRootIntensity(f.a, f.b, f.sigma, f.x0, f.scale * self.hazards[i].rate)

    def total_model(self) -> SquareRootIntensity:
        f = self.factor
        return SquareRootIntensity(f.a, f.b, f.sigma, f.x0, f.scale * sum(h.rate for h in self.hazards))

    def initial_state(self):
        return None if self.factor is None else self.factor.x0


@dataclass(frozen=True)
class FtdIntensities:
    per_name: np.ndarray
    total: np.ndarray | float


def ftd_intensities(mnm: MultiNameModel, t, state=None) -> FtdIntensities:
    """Intensity of each name defaulting first, given all names alive at t."""
    if mnm.factor is not None:
        x = mnm.factor.x0 if state is None else state
        lam = np.asarray([h.rate for h in mnm.hazards]) * mnm.factor.scale * np.maximum(np.asarray(x), 0.0)[..., None]
        return FtdIntensities(lam, lam.sum(axis=-1))
    K = mnm.marginal_survival(t)
    g = mnm.gammas(t)
    C = mnm.copula.value(K)
    parts = np.stack([g[..., i] * K[..., i] * mnm.copula.partial(K, i) for i in range(mnm.n)], axis=-1)
    lam = parts / C[..., None]
    return FtdIntensities(lam, lam.sum(axis=-1))


def sample_joint_defaults(mnm: MultiNameModel, uniforms) -> tuple[np.ndarray, np.ndarray]:
    """Default times from copula-distributed uniforms by threshold inversion.

    ``uniforms`` has shape (n,) or (m, n); returns (taus, first default time).
    """
    U = np.asarray(uniforms, dtype=float)
    if U.shape[-1] != mnm.n:
        raise DomainError("need one uniform per name")
    levels = -np.log(U)
    taus = np.stack([mnm.hazards[i].inverse_cumulative_hazard(levels[..., i]) for i in range(mnm.n)], axis=-1)
    return taus, taus.min(axis=-1)


def first_defaulter(taus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the first defaulter (ties go to the lowest index) and a tie flag."""
    taus = np.asarray(taus, dtype=float)
    first = np.argmin(taus, axis=-1)
    tmin = np.take_along_axis(taus, first[..., None], axis=-1)[..., 0]
    ties = (np.sum(taus == tmin[..., None], axis=-1) > 1) & np.isfinite(tmin)
    return np.where(np.isfinite(tmin), first, -1), ties


# --------------------------------------------------------------------------
# pricing
# --------------------------------------------------------------------------

def _ftd_single_name_claim(mnm: MultiNameModel, claim: FtdClaim) -> DefaultableClaim:
    rates = np.array([h.rate for h in mnm.hazards])
    w = rates / rates.sum() if rates.sum() > 0 else np.full(mnm.n, 1.0 / mnm.n)
    zs = claim.recoveries

    def recovery(u):
        return sum(wi * evaluate_time_fn(z, u) for wi, z in zip(w, zs))
    return DefaultableClaim(claim.maturity, claim.payoff, claim.dividend_rate, recovery)


def ftd_price(mnm: MultiNameModel, env: MarketEnv, claim: FtdClaim, t: float,
              first_default_has_occurred=False, state=None):
    """Ex-dividend first-to-default price (zero once the first default has happened)."""
    if claim.n != mnm.n:
        raise DomainError("claim and model disagree on the number of names")
    if t > claim.maturity + 1e-12:
        raise DomainError("time after maturity")
    if mnm.factor is not None:
        x = mnm.factor.x0 if state is None else state
        return claim_ex_dividend_price(mnm.total_model(), env, _ftd_single_name_claim(mnm, claim), t, x,
                                       first_default_has_occurred)
    if first_default_has_occurred or t >= claim.maturity - 1e-12:
        return 0.0
    if claim.recovery_uses_state or callable(claim.payoff):
        raise TypeError("deterministic baskets take payoffs and recoveries as functions of time")
    T = claim.maturity
    G_t = mnm.joint_survival(t)

    def fn(u):
        K = mnm.marginal_survival(u)
        g = mnm.gammas(u)
        disc = env.discount(t, u)
        flow = claim.dividend_rate_at(u) * mnm.copula.value(K)
        for i in range(mnm.n):
            flow = flow + claim.recovery_at(i, u) * g[..., i] * K[..., i] * mnm.copula.partial(K, i)
        return disc * flow / G_t

    value = integrate(fn, t, T, env.breakpoints(t, T) + mnm.breakpoints(t, T))
    X = float(claim.payoff)
    if X != 0:
        value = value + X * env.discount(t, T) * mnm.joint_survival(T) / G_t
    return float(value)


def _shifted(K_t: np.ndarray, i: int, K_i_u: np.ndarray) -> np.ndarray:
    v = np.broadcast_to(K_t, np.shape(K_i_u) + K_t.shape).copy()
    v[..., i] = K_i_u
    return v


def survivor_curve(mnm: MultiNameModel, i: int, t: float, defaulted: int | None = None) -> HazardCurve:
    """Conditional hazard curve of name i (0-based) seen from t.

    With ``defaulted=None`` all names are alive at t; otherwise name
    ``defaulted`` (0-based) has just defaulted at t and the rest are alive.
    """
    h = mnm.hazards[i]
    K_t = mnm.marginal_survival(t)
    cop = mnm.copula

    if defaulted is None:
        def level(u):
            return cop.value(_shifted(K_t, i, np.exp(-h.cumulative_hazard(u))))

        def rate(u):
            Ki = np.exp(-h.cumulative_hazard(u))
            v = _shifted(K_t, i, Ki)
            return h.hazard(u) * Ki * cop.partial(v, i) / cop.value(v)
    else:
        j = defaulted
        if j == i:
            raise DomainError("the surviving name must differ from the defaulter")

        def level(u):
            return cop.partial(_shifted(K_t, i, np.exp(-h.cumulative_hazard(u))), j)

        def rate(u):
            Ki = np.exp(-h.cumulative_hazard(u))
            v = _shifted(K_t, i, Ki)
            return h.hazard(u) * Ki * cop.mixed(v, i, j) / cop.partial(v, j)

    return HazardCurve(lambda u: -np.log(level(u)), rate, knots=h.breakpoints(0.0, np.inf))


def basket_cds_price(mnm: MultiNameModel, env: MarketEnv, cds: CdsSpec, t: float, state=None):
    """Pre-default value of a CDS on a basket name while every name is alive."""
    i = cds.reference_name - 1
    if mnm.factor is not None:
        return cds_ex_dividend_price(mnm.name_model(i), env, cds, t, mnm.factor.x0 if state is None else state)
    return cds_ex_dividend_price(survivor_curve(mnm, i, t), env, cds, t)


def contagion_cds_value(mnm: MultiNameModel, env: MarketEnv, cds: CdsSpec, t: float, first_defaulter: int,
                        state=None):
    """Value of the CDS on name i right after name ``first_defaulter`` (1-based) defaults at t."""
    i = cds.reference_name - 1
    j = first_defaulter - 1
    if i == j:
        raise DomainError("contagion value needs a different defaulting name")
    if t > cds.maturity + 1e-12:
        raise DomainError("time after maturity")
    if mnm.factor is not None:
        return cds_ex_dividend_price(mnm.name_model(i), env, cds, t, mnm.factor.x0 if state is None else state)
    if t >= cds.maturity - 1e-12:
        return 0.0
    return cds_ex_dividend_price(survivor_curve(mnm, i, t, defaulted=j), env, cds, t)


# --------------------------------------------------------------------------
# hedging
# --------------------------------------------------------------------------

def basket_cds_exposure(mnm: MultiNameModel, env: MarketEnv, cds: CdsSpec, t: float, state=None):
    """Pre-default price and the vector of values received if name k defaults first."""
    price = basket_cds_price(mnm, env, cds, t, state)
    i = cds.reference_name - 1
    jumps = []
    for k in range(mnm.n):
        if k == i:
            jumps.append(np.broadcast_to(cds.protection_at(t), np.shape(price)))
        else:
            jumps.append(np.asarray(contagion_cds_value(mnm, env, cds, t, k + 1, state)))
    return price, np.stack(np.broadcast_arrays(*jumps), axis=-1)


def _factor_diffusion(mnm, env, fn, t, state, survival):
    grad = state_gradient(lambda tt, s: fn(s), t, state)
    return mnm.factor.apply_loading(state, grad) * (np.asarray(survival) / env.savings(t))[..., None]


def ftd_hedge_solve(instruments: Sequence[CdsSpec], mnm: MultiNameModel, env: MarketEnv, claim: FtdClaim,
                    t: float, state=None, survival=1.0, raise_on_singular: bool = True) -> HedgePlan:
    """Hedge an FtD claim with single-name CDSs on basket names.

    One jump row per possible first defaulter; with the common factor one
    diffusion row is added, its entries obtained by bumping the factor state.
    """
    if mnm.factor is not None and state is None:
        state = mnm.factor.x0
    price = ftd_price(mnm, env, claim, t, state=state)
    target_jump = np.stack(np.broadcast_arrays(*[claim.recovery_at(k, t) - np.asarray(price)
                                                 for k in range(mnm.n)]), axis=-1)
    insts = []
    for cds in instruments:
        p, J = basket_cds_exposure(mnm, env, cds, t, state)
        jump = J - np.asarray(p)[..., None]
        if mnm.factor is None:
            diff = np.zeros(jump.shape[:-1] + (0,))
        else:
            diff = _factor_diffusion(mnm, env, lambda s, c=cds: basket_cds_price(mnm, env, c, t, s), t, state,
                                     survival)
        insts.append(HedgeInstrument(cds, jump, diff))
    if mnm.factor is None:
        target_diff = np.zeros(target_jump.shape[:-1] + (0,))
    else:
        target_diff = _factor_diffusion(mnm, env, lambda s: ftd_price(mnm, env, claim, t, state=s), t, state,
                                        survival)
    return solve_matching(insts, HedgeTarget(target_jump, target_diff), raise_on_singular)


# --------------------------------------------------------------------------
# immersion diagnostic
# --------------------------------------------------------------------------

def pair_survival(mnm: MultiNameModel):
    """G(u, v) = P(tau_1 > u, tau_2 > v) for a two-name model."""
    if mnm.n != 2 or mnm.factor is not None:
        raise DomainError("needs a deterministic two-name model")
    h1, h2 = mnm.hazards

    def G(u, v):
        K = np.stack(np.broadcast_arrays(np.exp(-h1.cumulative_hazard(u)), np.exp(-h2.cumulative_hazard(v))),
                     axis=-1)
        return mnm.copula.value(K)
    return G


def immersion_coefficient(G, t, step: float = 1e-5):
    """d2G(t,t)/d2G(0,t) - G(t,t)/G(0,t) with central differences in the second argument."""
    def d2(u, v):
        return (G(u, v + step) - G(u, v - step)) / (2.0 * step)
    return d2(t, t) / d2(0.0, t) - G(t, t) / G(0.0, t)


def immersion_diagnostic(mnm: MultiNameModel, t, method: str = "analytic"):
    """Coefficient of the martingale part of name 2's conditional survival process.

    Zero whenever the default-free information of name 1 leaves name 2's
    marginal law unchanged.  ``method="analytic"`` uses the closed-form copula
    partial; ``method="fd"`` uses central differences of the joint survival.
    """
    if method == "fd":
        return immersion_coefficient(pair_survival(mnm), t)
    if mnm.n != 2 or mnm.factor is not None:
        raise DomainError("needs a deterministic two-name model")
    t = np.asarray(t, dtype=float)
    K = mnm.marginal_survival(t)
    at_zero = np.stack(np.broadcast_arrays(np.ones_like(t), K[..., 1]), axis=-1)
    return mnm.copula.partial(K, 1) / mnm.copula.partial(at_zero, 1) - mnm.copula.value(K) / K[..., 1]

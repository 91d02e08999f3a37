"""Rolling CDS wealth and hedges built from families of rolling contracts.

A rolling CDS keeps entering a fresh at-market CDS with a fixed expiry and
unwinding it an instant later.  Its ex-dividend value is always zero, so its
jump exposure is the protection payment itself.  Contract families follow a
tenor schedule: the contract used on ``[k L, (k + 1) L)`` expires at
``(k + 1) L + duration``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .claims_contracts import Amount, CdsSpec, evaluate_time_fn
from .errors import DomainError, NonHedgeableError
from .hedge_engine import HedgeInstrument, HedgePlan, HedgeTarget, _diffusion_scale, _scaled, solve_matching
from .market_model import IntensityModel, MarketEnv, SquareRootIntensity, repr_coefficient
from .single_name_pricer import cds_legs, cds_legs_gradient, market_spread

DEFAULT_LIFESPAN = 0.25


@dataclass(frozen=True)
class RollingCdsSpec:
    """Rolling CDS started at ``start`` on contracts expiring at ``expiry``, used for ``lifespan``."""

    start: float
    expiry: float
    lifespan: float = DEFAULT_LIFESPAN
    protection: Amount = 1.0

    def __post_init__(self):
        if not self.start < self.expiry:
            raise DomainError("need start < expiry")
        if not self.lifespan > 0:
            raise DomainError("lifespan must be positive")

    def active(self, t: float) -> bool:
        return self.start <= t < self.start + self.lifespan

    def unit_cds(self, spread: float = 0.0) -> CdsSpec:
        return CdsSpec(spread, self.protection, self.expiry)

    def protection_at(self, t):
        return evaluate_time_fn(self.protection, t)


@dataclass(frozen=True)
class RollingFamily:
    """Tenor-scheduled family: the k-th member starts at k * lifespan."""

    duration: float
    lifespan: float = DEFAULT_LIFESPAN
    protection: Amount = 1.0

    def __post_init__(self):
        if not self.duration > 0 or not self.lifespan > 0:
            raise DomainError("duration and lifespan must be positive")

    def window(self, t: float) -> int:
        return int(math.floor(t / self.lifespan + 1e-12))

    def member(self, k: int) -> RollingCdsSpec:
        start = k * self.lifespan
        return RollingCdsSpec(start, start + self.lifespan + self.duration, self.lifespan, self.protection)

    def contract_at(self, t: float) -> RollingCdsSpec:
        return self.member(self.window(t))

    def schedule(self, horizon: float) -> list[RollingCdsSpec]:
        n = int(math.ceil(horizon / self.lifespan - 1e-12))
        return [self.member(k) for k in range(n)]


def rolling_diffusion_gradient(model, env, spec: RollingCdsSpec, t: float, state, spread=None):
    """State derivative of protection - spread * annuity at a frozen spread."""
    if spread is None:
        spread = market_spread(model, env, spec.protection, spec.expiry, t, state)
    if isinstance(model, SquareRootIntensity):
        g = cds_legs_gradient(model, env, spec.unit_cds(), t, state)
        return np.asarray(g.protection_value) - spread * np.asarray(g.annuity_value)
    return np.zeros(np.shape(spread))


def rolling_wealth_step(model: IntensityModel, env: MarketEnv, spec: RollingCdsSpec, t: float, state, wealth,
                        dt: float, dW, default_in_step=False, default_time=None):
    """One Euler step of the rolling-CDS wealth.

    Rate accrual, compensator drift -delta * lambda over the alive part of the
    step, the protection lump on a default step and the diffusion term
    (protection - spread annuity) gradient times the loading times dW, all with
    coefficients frozen at the left node.  ``default_time`` (when known) stops
    the compensator at the default instant.
    """
    if t >= spec.expiry:
        raise DomainError("rolling CDS has expired")
    wealth = np.asarray(wealth, dtype=float)
    defaulted = np.asarray(default_in_step, dtype=bool)
    delta = spec.protection_at(t)
    lam = model.intensity(t, state)
    growth = env.savings(t + dt) / env.savings(t)
    alive_dt = dt if default_time is None else np.where(defaulted, np.asarray(default_time) - t, dt)
    if isinstance(model, SquareRootIntensity):
        spread = market_spread(model, env, spec.protection, spec.expiry, t, state)
        grad = rolling_diffusion_gradient(model, env, spec, t, state, spread)
        diffusion = model.apply_loading(state, grad)[..., 0] * np.asarray(dW, dtype=float).reshape(np.shape(grad))
    else:
        diffusion = 0.0
    increment = delta * (defaulted.astype(float) - lam * alive_dt) + diffusion
    return wealth * growth + increment


def build_rolling_instrument(model: IntensityModel, env: MarketEnv, spec: RollingCdsSpec, t: float, state=None,
                             survival=1.0, method: str = "analytic") -> HedgeInstrument:
    """Exposures of an active rolling CDS: jump = protection, diffusion from the frozen-spread legs."""
    if state is None:
        state = model.initial_state()
    spread = market_spread(model, env, spec.protection, spec.expiry, t, state)
    jump = np.asarray(np.broadcast_to(spec.protection_at(t), np.shape(spread)), dtype=float)[..., None]
    if method == "analytic":
        diff = model.apply_loading(state, rolling_diffusion_gradient(model, env, spec, t, state, spread))
    else:
        def frozen(tt, s):
            legs = cds_legs(model, env, spec.unit_cds(), tt, s)
            return legs.protection_value - spread * np.asarray(legs.annuity_value)
        diff = repr_coefficient(model, frozen, t, state).value
    return HedgeInstrument(spec, jump, _scaled(diff, _diffusion_scale(env, t, survival)))


def rolling_hedge_solve(instruments: Sequence[HedgeInstrument], target: HedgeTarget, t: float,
                        raise_on_singular: bool = True) -> HedgePlan:
    """Solve the matching conditions over the rolling instruments active at t.

    Inactive instruments receive a zero position.
    """
    active = [i for i, inst in enumerate(instruments)
              if not isinstance(inst.cds, RollingCdsSpec) or inst.cds.active(t)]
    if not active:
        raise NonHedgeableError(f"no rolling instrument is active at t={t}")
    plan = solve_matching([instruments[i] for i in active], target, raise_on_singular)
    batch = np.shape(plan.positions)[:-1]
    full = np.zeros(batch + (len(instruments),))
    full[..., active] = plan.positions
    return HedgePlan(full, plan.bank, plan.condition_number, plan.singular, plan.residual)

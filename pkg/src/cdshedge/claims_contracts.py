"""Defaultable claims, CDS contracts and realised dividend streams."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DomainError
from .market_model import MarketEnv

Amount = Union[float, Callable]


def evaluate_time_fn(fn: Amount, t):
    """Evaluate a number-or-function-of-time on t (vectorised)."""
    if callable(fn):
        return np.asarray(fn(np.asarray(t, dtype=float)), dtype=float)
    return np.full(np.shape(t), float(fn)) if np.ndim(t) else float(fn)


@dataclass(frozen=True)
class AffinePayoff:
    """Payoff level + slope * state, with state the model's scalar state."""

    level: float = 0.0
    slope: float = 0.0

    def __call__(self, state):
        return self.level + self.slope * np.asarray(state, dtype=float)


@dataclass(frozen=True)
class DefaultableClaim:
    """Claim paying X at maturity if alive, dividends at rate a, and Z at default.

    ``payoff`` is a number or a function of the terminal state; ``dividend_rate``
    a number or a function of time; ``recovery`` a number, a function of time, or
    (with ``recovery_uses_state``) a function of (time, state).
    """

    maturity: float
    payoff: Amount = 0.0
    dividend_rate: Amount = 0.0
    recovery: Amount = 0.0
    recovery_uses_state: bool = False

    def __post_init__(self):
        if not self.maturity > 0:
            raise DomainError("maturity must be positive")

    def payoff_at(self, state):
        if callable(self.payoff):
            return np.asarray(self.payoff(state), dtype=float)
        return self.payoff

    def recovery_at(self, t, state=None):
        if self.recovery_uses_state:
            return np.asarray(self.recovery(t, state), dtype=float)
        return evaluate_time_fn(self.recovery, t)

    def dividend_rate_at(self, t):
        return evaluate_time_fn(self.dividend_rate, t)


@dataclass(frozen=True)
class CdsSpec:
    """Stylised CDS: premium at rate ``spread``, protection paid at default."""

    spread: float
    protection: Amount = 1.0
    maturity: float = 5.0
    reference_name: int = 1

    def __post_init__(self):
        if not self.maturity > 0:
            raise DomainError("maturity must be positive")
        if self.reference_name < 1:
            raise DomainError("reference_name is 1-based")

    def protection_at(self, t):
        return evaluate_time_fn(self.protection, t)

    def with_spread(self, spread: float) -> "CdsSpec":
        return CdsSpec(spread, self.protection, self.maturity, self.reference_name)

    def as_claim(self) -> DefaultableClaim:
        return DefaultableClaim(self.maturity, 0.0, -self.spread, self.protection)


@dataclass(frozen=True)
class FtdClaim:
    """First-to-default claim: recovery Z^i is paid if name i defaults first."""

    maturity: float
    payoff: Amount = 0.0
    dividend_rate: Amount = 0.0
    recoveries: tuple = (0.0,)
    recovery_uses_state: bool = False

    def __post_init__(self):
        if not self.maturity > 0:
            raise DomainError("maturity must be positive")
        object.__setattr__(self, "recoveries", tuple(self.recoveries))
        if len(self.recoveries) < 1:
            raise DomainError("need at least one name")

    @property
    def n(self) -> int:
        return len(self.recoveries)

    def recovery_at(self, i: int, t, state=None):
        z = self.recoveries[i]
        if self.recovery_uses_state:
            return np.asarray(z(t, state), dtype=float)
        return evaluate_time_fn(z, t)

    def dividend_rate_at(self, t):
        return evaluate_time_fn(self.dividend_rate, t)

    def as_single_name(self) -> DefaultableClaim:
        if self.n != 1:
            raise DomainError("only a one-name basket reduces to a single-name claim")
        return DefaultableClaim(self.maturity, self.payoff, self.dividend_rate, self.recoveries[0],
                                self.recovery_uses_state)


@dataclass(frozen=True)
class DividendLedger:
    """Cash events (time, amount) plus accrual segments (start, end, rate)."""

    events: tuple = ()
    accruals: tuple = ()

    def amount(self) -> float:
        """Undiscounted total (zero-rate value)."""
        return DividendLedger.value(self, MarketEnv.flat(0.0), self.end_time())

    def end_time(self) -> float:
        times = [t for t, _ in self.events] + [e for _, e, _ in self.accruals]
        return max(times, default=0.0)

    def value(self, env: MarketEnv, t: float) -> float:
        total = sum(float(amt) * float(env.discount(t, u)) for u, amt in self.events)
        for s0, s1, rate in self.accruals:
            total += float(env.accrual_value(rate, s0, s1)) * float(env.savings(t))
        return total


def dividend_stop(maturity: float, default_time: float, t: float) -> float:
    return min(t, maturity, default_time)


def realized_dividends(contract, default_time, horizon: float, state=None) -> DividendLedger:
    """Pathwise dividend ledger of a claim, CDS or FtD claim up to ``horizon``.

    ``default_time`` is a number (or a per-name sequence for an FtD claim);
    ``state`` is the state's left limit at default or the terminal state, used
    by state-dependent recoveries and payoffs.
    """
    if isinstance(contract, CdsSpec):
        contract = contract.as_claim()
    if isinstance(contract, FtdClaim):
        taus = np.atleast_1d(np.asarray(default_time, dtype=float))
        if taus.size != contract.n:
            raise DomainError("need one default time per name")
        first = int(np.argmin(taus))  # ties go to the lowest index
        tau = float(taus[first])
        recovery = lambda u: contract.recovery_at(first, u, state)
    else:
        tau = float(default_time)
        recovery = lambda u: contract.recovery_at(u, state)
    if not tau > 0:
        raise DomainError("default time must be positive")
    T = contract.maturity
    stop = dividend_stop(T, tau, horizon)
    accruals = ()
    if stop > 0 and (callable(contract.dividend_rate) or contract.dividend_rate != 0):
        accruals = ((0.0, stop, contract.dividend_rate),)
    events = []
    if tau <= min(horizon, T):
        events.append((tau, float(recovery(tau))))
    if tau > T and horizon >= T:
        x = contract.payoff(state) if callable(contract.payoff) else contract.payoff
        if callable(contract.payoff) or x != 0:
            events.append((T, float(x)))
    return DividendLedger(tuple(events), accruals)


def discounted_dividend_value(ledger: DividendLedger, env: MarketEnv, t: float) -> float:
    """B(t) times the B-discounted sum of ledger cash flows."""
    return ledger.value(env, t)

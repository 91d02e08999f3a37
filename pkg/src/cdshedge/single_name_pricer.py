"""Pre-default, ex-dividend and cumulative prices under immersion.

Every price here is a Markovian function of (t, state); arrays of states are
priced in one call.  Outer time integrals use composite Gauss-Legendre
quadrature split at the knots of the rate and intensity curves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .claims_contracts import (
    AffinePayoff,
    CdsSpec,
    DefaultableClaim,
    DividendLedger,
    discounted_dividend_value,
    evaluate_time_fn,
)
from .errors import DegenerateTenorError, DomainError
from .market_model import (
    DeterministicIntensity,
    IntensityModel,
    MarketEnv,
    SquareRootIntensity,
    state_gradient,
)
from .quadrature import integrate

_EPS_T = 1e-12


@dataclass(frozen=True)
class CdsLegs:
    protection_value: np.ndarray | float
    annuity_value: np.ndarray | float


def _state(model, state):
    return model.initial_state() if state is None else state


def _finish(x, batch):
    x = np.asarray(x, dtype=float)
    if not batch:
        return float(x)
    return np.broadcast_to(x, batch).copy()


def _breaks(model, env, t, T):
    return env.breakpoints(t, T) + model.breakpoints(t, T)


def _check_time(t, T):
    if t > T + _EPS_T:
        raise DomainError(f"time {t} is after maturity {T}")


def _leg_integrals(model, env, protection, t, T, state, gradients=False):
    """Protection and annuity integrals (and optionally their state derivatives)."""
    batch = model.batch_shape(state)
    if t >= T:
        z = np.zeros(batch)
        return (z, z, z, z) if gradients else (z, z)
    prot_const = not callable(protection)

    if isinstance(model, SquareRootIntensity):
        def fn(u):
            disc = env.discount(t, u)
            res = model.transforms(t, u, state, gradients=gradients)
            dw = disc * (float(protection) if prot_const else evaluate_time_fn(protection, u))
            if gradients:
                P, dens, dP, ddens = res
                return np.stack(np.broadcast_arrays(dens * dw, P * disc, ddens * dw, dP * disc))
            P, dens = res
            return np.stack(np.broadcast_arrays(dens * dw, P * disc))
    else:
        def fn(u):
            disc = env.discount(t, u)
            P = model.survival(t, u)
            dens = model.hazard(u) * P
            dw = disc * (float(protection) if prot_const else evaluate_time_fn(protection, u))
            return np.stack([dens * dw, P * disc])

    out = integrate(fn, t, T, _breaks(model, env, t, T))
    if gradients and not isinstance(model, SquareRootIntensity):
        z = np.zeros(batch)
        return _finish(out[0], batch), _finish(out[1], batch), z, z
    return tuple(_finish(o, batch) for o in out)


def cds_legs(model: IntensityModel, env: MarketEnv, cds: CdsSpec, t: float, state=None) -> CdsLegs:
    """Pre-default protection leg and risky annuity of a CDS at time t."""
    _check_time(t, cds.maturity)
    state = _state(model, state)
    prot, ann = _leg_integrals(model, env, cds.protection, t, cds.maturity, state)
    return CdsLegs(prot, ann)


def cds_legs_gradient(model: IntensityModel, env: MarketEnv, cds: CdsSpec, t: float, state=None) -> CdsLegs:
    """State derivatives of both legs (analytic for the square-root model)."""
    _check_time(t, cds.maturity)
    state = _state(model, state)
    if isinstance(model, SquareRootIntensity):
        _, _, dprot, dann = _leg_integrals(model, env, cds.protection, t, cds.maturity, state, True)
        return CdsLegs(dprot, dann)
    z = _finish(np.zeros(()), model.batch_shape(state))
    return CdsLegs(z, z)


def _defaulted_mask(value, defaulted):
    if np.ndim(defaulted) == 0:
        return 0.0 * value if defaulted else value
    return np.where(np.asarray(defaulted, bool), 0.0, value)


def cds_ex_dividend_price(model, env, cds: CdsSpec, t: float, state=None, defaulted=False):
    """Ex-dividend CDS value: zero after default, protection - spread * annuity before."""
    legs = cds_legs(model, env, cds, t, state)
    return _defaulted_mask(legs.protection_value - cds.spread * np.asarray(legs.annuity_value), defaulted)


def market_spread(model, env, protection, T: float, t: float = 0.0, state=None):
    """Spread that makes a fresh CDS with the given protection worthless."""
    if t >= T:
        raise DegenerateTenorError(f"zero tenor at t={t}, T={T}")
    legs = cds_legs(model, env, CdsSpec(0.0, protection, T), t, state)
    return legs.protection_value / np.asarray(legs.annuity_value)


def seasoned_cds_value(model, env, protection, T: float, inception_spread: float, t: float, state=None,
                       defaulted=False):
    """Value of a CDS written earlier at ``inception_spread``: (current - inception) * annuity."""
    if t >= T:
        raise DegenerateTenorError(f"zero tenor at t={t}, T={T}")
    legs = cds_legs(model, env, CdsSpec(0.0, protection, T), t, state)
    kappa_t = legs.protection_value / np.asarray(legs.annuity_value)
    return _defaulted_mask((kappa_t - inception_spread) * legs.annuity_value, defaulted)


# --------------------------------------------------------------------------
# general claims
# --------------------------------------------------------------------------

def _payoff_term(model, env, claim, t, state):
    T = claim.maturity
    disc = env.discount(t, T)
    X = claim.payoff
    if not callable(X):
        if X == 0:
            return 0.0
        return disc * X * np.asarray(model.survival(t, T, state))
    if isinstance(model, DeterministicIntensity):
        return disc * model.survival(t, T) * model.expect(X, t, T, state)
    if isinstance(model, SquareRootIntensity):
        if isinstance(X, AffinePayoff):
            P, dens = model.transforms(t, T, state)
            # E[x_T exp(-int lambda)] = density / scale
            return disc * (X.level * P + X.slope * dens / model.scale)
        raise TypeError("the square-root model prices payoffs affine in the terminal state (AffinePayoff)")
    raise TypeError(f"unsupported model {type(model).__name__}")


def _flow_integrand(model, env, claim, t, state):
    a, Z = claim.dividend_rate, claim.recovery
    a_zero = not callable(a) and a == 0
    z_zero = not callable(Z) and Z == 0 and not claim.recovery_uses_state
    if a_zero and z_zero:
        return None
    if claim.recovery_uses_state:
        if not isinstance(model, DeterministicIntensity):
            raise TypeError("state-dependent recoveries need a deterministic intensity model")

        def fn(u):
            disc = env.discount(t, u)
            P = model.survival(t, u)
            ez = model.expect(Z, t, u, state, with_time=True)
            out = disc * P * model.hazard(u) * ez
            if not a_zero:
                out = out + disc * P * evaluate_time_fn(a, u)
            return out
        return fn

    def fn(u):
        disc = env.discount(t, u)
        if isinstance(model, SquareRootIntensity):
            P, dens = model.transforms(t, u, state)
        else:
            P = model.survival(t, u)
            dens = model.hazard(u) * P
        out = 0.0
        if not z_zero:
            out = out + disc * dens * evaluate_time_fn(Z, u)
        if not a_zero:
            out = out + disc * P * evaluate_time_fn(a, u)
        return out
    return fn


def claim_ex_dividend_price(model, env, claim: DefaultableClaim, t: float, state=None, defaulted=False):
    """Ex-dividend price; zero after default and at (or after) maturity."""
    _check_time(t, claim.maturity)
    state = _state(model, state)
    batch = model.batch_shape(state)
    if t >= claim.maturity - _EPS_T:
        return _finish(0.0, batch)
    value = _payoff_term(model, env, claim, t, state)
    fn = _flow_integrand(model, env, claim, t, state)
    if fn is not None:
        value = value + integrate(fn, t, claim.maturity, _breaks(model, env, t, claim.maturity))
    return _defaulted_mask(_finish(value, batch), defaulted)


def claim_price_gradient(model, env, claim: DefaultableClaim, t: float, state=None):
    """State derivative of the pre-default price (analytic where available)."""
    state = _state(model, state)
    batch = model.batch_shape(state)
    if t >= claim.maturity - _EPS_T:
        return _finish(0.0, batch) if model.driver_dim == 1 else np.zeros(batch + (model.driver_dim,))
    affine_ok = not callable(claim.payoff) or isinstance(claim.payoff, AffinePayoff)
    if isinstance(model, SquareRootIntensity) and affine_ok and not claim.recovery_uses_state:
        return _finish(_analytic_gradient(model, env, claim, t, state), batch)
    if isinstance(model, DeterministicIntensity) and not callable(claim.payoff) and not claim.recovery_uses_state:
        return _finish(0.0, batch) if model.driver_dim == 1 else np.zeros(batch + (model.driver_dim,))
    return state_gradient(lambda tt, s: claim_ex_dividend_price(model, env, claim, tt, s), t, state,
                          model.driver_dim)


def _analytic_gradient(model: SquareRootIntensity, env, claim, t, state):
    T = claim.maturity
    disc = env.discount(t, T)
    X = claim.payoff
    P, dens, dP, ddens = model.transforms(t, T, state, gradients=True)
    if isinstance(X, AffinePayoff):
        g = disc * (X.level * dP + X.slope * ddens / model.scale)
    else:
        g = disc * float(X) * dP
    a, Z = claim.dividend_rate, claim.recovery
    if (callable(a) or a != 0) or (callable(Z) or Z != 0):
        def fn(u):
            d = env.discount(t, u)
            _, _, gP, gdens = model.transforms(t, u, state, gradients=True)
            return d * (gdens * evaluate_time_fn(Z, u) + gP * evaluate_time_fn(a, u))
        g = g + integrate(fn, t, T, _breaks(model, env, t, T))
    return g


def claim_cumulative_price(model, env, claim: DefaultableClaim, t: float, state=None,
                           ledger: DividendLedger | None = None, defaulted=False):
    """Ex-dividend price plus reinvested realised dividends."""
    price = claim_ex_dividend_price(model, env, claim, t, state, defaulted)
    if ledger is None:
        return price
    return price + discounted_dividend_value(ledger, env, t)


# --------------------------------------------------------------------------
# batched fixed-rule pricing for simulation loops
# --------------------------------------------------------------------------

KERNEL_PANEL = 1.0
KERNEL_NODES = 20


def _kernel_nodes(env, t, T, panel=KERNEL_PANEL, nodes=KERNEL_NODES):
    from .quadrature import panel_nodes

    cuts = [t, *env.breakpoints(t, T), T]
    edges = [t]
    for lo, hi in zip(cuts, cuts[1:]):
        m = max(1, int(np.ceil((hi - lo) / panel - 1e-12)))
        edges.extend(np.linspace(lo, hi, m + 1)[1:])
    return panel_nodes(np.asarray(edges), nodes)


class AffineClaimKernel:
    """Prices several claims with a common maturity at one time t for many states.

    Square-root model only.  Payoffs are constants or :class:`AffinePayoff`;
    recoveries and dividend rates are functions of time.  The exponential
    matrix exp(log A - B x) over the quadrature nodes is shared by all claims.
    """

    def __init__(self, model: SquareRootIntensity, env: MarketEnv, t: float, maturity: float, claims):
        self.model = model
        self.t = float(t)
        self.maturity = float(maturity)
        self.count = len(claims)
        self.expired = t >= maturity - _EPS_T
        if self.expired:
            return
        level = np.zeros(self.count)
        slope = np.zeros(self.count)
        for i, c in enumerate(claims):
            if c.recovery_uses_state:
                raise TypeError("kernel needs recoveries that depend on time only")
            X = c.payoff
            if isinstance(X, AffinePayoff):
                level[i], slope[i] = X.level, X.slope / model.scale
            elif callable(X):
                raise TypeError("kernel needs constant or affine payoffs")
            else:
                level[i] = float(X)
        u, w = _kernel_nodes(env, t, maturity)
        B, logA, dB, dlogA = model.riccati(u - t)
        disc = env.discount(t, u) * w
        cZ = np.stack([disc * evaluate_time_fn(c.recovery, u) for c in claims], axis=1)
        ca = np.stack([disc * evaluate_time_fn(c.dividend_rate, u) for c in claims], axis=1)
        alpha, beta = (-dlogA)[:, None], dB[:, None]
        const = cZ * alpha + ca
        self._B, self._logA = B, logA
        # price = E @ c0 + x E @ c1 ; gradient = E @ g0 + x E @ g1
        self._M = np.concatenate([const, cZ * beta, -B[:, None] * const + cZ * beta, -B[:, None] * cZ * beta],
                                 axis=1)
        BT, logAT, dBT, dlogAT = model.riccati(np.array([maturity - t]))
        self._term = (BT[0], logAT[0], -dlogAT[0], dBT[0], float(env.discount(t, maturity)), level, slope)

    def evaluate(self, x):
        """Prices and state derivatives, each of shape (claims, len(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.expired:
            z = np.zeros((self.count, x.size))
            return z, z.copy()
        E = np.exp(self._logA[None, :] - x[:, None] * self._B[None, :])
        R = E @ self._M
        k = self.count
        price = R[:, :k] + x[:, None] * R[:, k:2 * k]
        grad = R[:, 2 * k:3 * k] + x[:, None] * R[:, 3 * k:]
        BT, logAT, alphaT, betaT, discT, level, slope = self._term
        PT = np.exp(logAT - BT * x)[:, None]
        densT = PT * (alphaT + betaT * x[:, None])
        price = price + discT * (level * PT + slope * densT)
        grad = grad + discT * (level * (-BT * PT) + slope * (-BT * densT + PT * betaT))
        return price.T, grad.T

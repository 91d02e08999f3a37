"""Matching conditions for hedge ratios and the bank-account position.

A hedge instrument is described by its jump exposure (value received at default
minus the pre-default price) and its diffusion exposure (integrand of its
martingale part against W).  The hedge solves

    sum_i phi_i * jump_i      = jump target
    sum_i phi_i * diffusion_i = diffusion target

stacked into an (n + d) x k system.  All arrays may carry leading batch axes
(paths, nodes) and are solved in one batched SVD.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .claims_contracts import CdsSpec, DefaultableClaim
from .errors import NonHedgeableError
from .market_model import IntensityModel, MarketEnv, SquareRootIntensity, repr_coefficient
from .single_name_pricer import (
    cds_ex_dividend_price,
    cds_legs,
    cds_legs_gradient,
    claim_ex_dividend_price,
    claim_price_gradient,
)

SINGULAR_RTOL = 1e-10
RESIDUAL_TOL = 1e-8


def _rows(x):
    x = np.asarray(x, dtype=float)
    return x[None] if x.ndim == 0 else x


@dataclass(frozen=True)
class HedgeInstrument:
    """Exposures of one traded asset; jump has trailing axis n, diffusion trailing axis d."""

    cds: object
    jump_exposure: np.ndarray
    diffusion_exposure: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "jump_exposure", _rows(self.jump_exposure))
        object.__setattr__(self, "diffusion_exposure", np.asarray(self.diffusion_exposure, dtype=float))


@dataclass(frozen=True)
class HedgeTarget:
    jump_target: np.ndarray
    diffusion_target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "jump_target", _rows(self.jump_target))
        object.__setattr__(self, "diffusion_target", np.asarray(self.diffusion_target, dtype=float))


@dataclass(frozen=True)
class HedgePlan:
    positions: np.ndarray
    bank: np.ndarray | float
    condition_number: np.ndarray | float
    singular: np.ndarray | bool
    residual: np.ndarray | float = 0.0

    def with_bank(self, bank) -> "HedgePlan":
        return HedgePlan(self.positions, bank, self.condition_number, self.singular, self.residual)


def exposure_system(instruments: Sequence[HedgeInstrument], target: HedgeTarget):
    """Stack exposures into the batched matrix (..., n + d, k) and right-hand side."""
    cols = [np.concatenate(_pad(i.jump_exposure, i.diffusion_exposure), axis=-1)
            for i in instruments]
    cols = np.broadcast_arrays(*cols)
    N = np.stack(cols, axis=-1)
    rhs = np.concatenate(_pad(target.jump_target, target.diffusion_target), axis=-1)
    N, rhs = _broadcast_system(N, rhs)
    return N, rhs


def _pad(jump, diff):
    """Broadcast batch axes of jump (…, n) and diffusion (…, d) against each other."""
    jb, db = jump.shape[:-1], diff.shape[:-1]
    batch = np.broadcast_shapes(jb, db)
    return (np.broadcast_to(jump, batch + jump.shape[-1:]), np.broadcast_to(diff, batch + diff.shape[-1:]))


def _broadcast_system(N, rhs):
    batch = np.broadcast_shapes(N.shape[:-2], rhs.shape[:-1])
    return np.broadcast_to(N, batch + N.shape[-2:]), np.broadcast_to(rhs, batch + rhs.shape[-1:])


def solve_system(N: np.ndarray, rhs: np.ndarray, singular_rtol: float = SINGULAR_RTOL,
                 residual_tol: float = RESIDUAL_TOL):
    """Batched solve; returns positions, condition numbers, singular flags, residuals."""
    m, k = N.shape[-2:]
    U, s, Vh = np.linalg.svd(N, full_matrices=False)
    smax = s[..., :1]
    keep = s > singular_rtol * smax
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        cond = np.where(s[..., -1] > 0, s[..., 0] / s[..., -1], np.inf)
    coef = np.einsum("...ji,...j->...i", U, rhs) * inv
    phi = np.einsum("...ij,...i->...j", Vh, coef)
    resid = np.linalg.norm(np.einsum("...ij,...j->...i", N, phi) - rhs, axis=-1)
    scale = np.maximum(1.0, np.linalg.norm(rhs, axis=-1))
    if m == k:
        singular = ~np.all(keep, axis=-1)
    else:
        singular = resid > residual_tol * scale
    return phi, cond, singular, resid


def solve_matching(instruments: Sequence[HedgeInstrument], target: HedgeTarget,
                   raise_on_singular: bool = True, singular_rtol: float = SINGULAR_RTOL,
                   residual_tol: float = RESIDUAL_TOL) -> HedgePlan:
    """Solve the jump and diffusion matching conditions for k instruments.

    Square systems are singular when the smallest singular value falls below
    ``singular_rtol`` times the largest.  Rectangular systems use the
    minimum-norm least-squares solution and are rejected when the residual
    exceeds ``residual_tol``.
    """
    if len(instruments) < 1:
        raise ValueError("need at least one instrument")
    N, rhs = exposure_system(instruments, target)
    phi, cond, singular, resid = solve_system(N, rhs, singular_rtol, residual_tol)
    if raise_on_singular and np.any(singular):
        bad = np.argwhere(np.atleast_1d(singular))
        raise NonHedgeableError(
            "matching system is singular or inconsistent",
            residual=np.atleast_1d(resid)[np.atleast_1d(singular)],
            condition_number=float(np.max(np.atleast_1d(cond))),
            where=bad[:5].tolist(),
        )
    return HedgePlan(phi, np.nan if np.ndim(cond) == 0 else np.full(np.shape(cond), np.nan),
                     cond if np.ndim(cond) else float(cond),
                     singular if np.ndim(singular) else bool(singular),
                     resid if np.ndim(resid) else float(resid))


def bank_position(wealth, positions, prices, env: MarketEnv, t: float):
    """Units of the savings account completing a self-financing portfolio."""
    positions = np.asarray(positions, dtype=float)
    prices = np.asarray(prices, dtype=float)
    return (np.asarray(wealth, dtype=float) - np.sum(positions * prices, axis=-1)) / env.savings(t)


# --------------------------------------------------------------------------
# single-name CDS exposures
# --------------------------------------------------------------------------

def _diffusion_scale(env, t, survival):
    return np.asarray(survival, dtype=float) / env.savings(t)


def _scaled(diff, scale):
    return diff * (scale[..., None] if np.ndim(scale) else float(scale))


def build_instrument(model: IntensityModel, env: MarketEnv, cds: CdsSpec, t: float, state=None,
                     survival=1.0, method: str = "fd") -> HedgeInstrument:
    """Exposures of a CDS at (t, state).

    ``survival`` is the path's current survival process value; the diffusion
    exposure is the integrand of the CDS's martingale part, which carries the
    factor survival / B(t).  ``method`` selects finite differences through
    :func:`repr_coefficient` or the closed-form Riccati derivatives.
    """
    if state is None:
        state = model.initial_state()
    price = cds_ex_dividend_price(model, env, cds, t, state)
    jump = np.asarray(cds.protection_at(t) - price, dtype=float)[..., None]
    if method == "analytic":
        g = cds_legs_gradient(model, env, cds, t, state)
        grad = np.asarray(g.protection_value) - cds.spread * np.asarray(g.annuity_value)
        diff = model.apply_loading(state, grad)
    else:
        diff = repr_coefficient(model, lambda tt, s: cds_ex_dividend_price(model, env, cds, tt, s), t, state).value
    return HedgeInstrument(cds, jump, _scaled(diff, _diffusion_scale(env, t, survival)))


def build_target(model: IntensityModel, env: MarketEnv, claim: DefaultableClaim, t: float, state=None,
                 survival=1.0, method: str = "fd") -> HedgeTarget:
    """Jump target Z - pre-default price and the claim's diffusion integrand."""
    if state is None:
        state = model.initial_state()
    price = claim_ex_dividend_price(model, env, claim, t, state)
    jump = np.asarray(claim.recovery_at(t, state) - price, dtype=float)[..., None]
    if method == "analytic":
        diff = model.apply_loading(state, claim_price_gradient(model, env, claim, t, state))
    else:
        diff = repr_coefficient(model, lambda tt, s: claim_ex_dividend_price(model, env, claim, tt, s), t,
                                state).value
    return HedgeTarget(jump, _scaled(diff, _diffusion_scale(env, t, survival)))


# --------------------------------------------------------------------------
# two-CDS determinant identities
# --------------------------------------------------------------------------

def prop24_determinant(delta1, kappa1, delta2, kappa2, p_hat, annuity, psi1, psi2):
    """(delta2 kappa1 - delta1 kappa2)(p_hat psi2 - annuity psi1)."""
    return (delta2 * kappa1 - delta1 * kappa2) * (p_hat * psi2 - annuity * psi1)


def prop24_matrix(delta1, kappa1, delta2, kappa2, p_hat, annuity, psi1, psi2):
    """Matrix whose determinant is :func:`prop24_determinant`.

    Columns are instruments; the first row is delta * p_hat - kappa * annuity,
    the second delta * psi1 - kappa * psi2.
    """
    return np.array([
        [delta1 * p_hat - kappa1 * annuity, delta2 * p_hat - kappa2 * annuity],
        [delta1 * psi1 - kappa1 * psi2, delta2 * psi1 - kappa2 * psi2],
    ])


def exposure_matrix(delta1, kappa1, delta2, kappa2, p_hat, annuity, psi1, psi2):
    """Matching matrix of two CDSs with a common maturity.

    With protection per unit notional P and p_hat = 1 - P, the jump exposure
    delta - (delta P - kappa annuity) equals delta * p_hat + kappa * annuity.
    """
    return np.array([
        [delta1 * p_hat + kappa1 * annuity, delta2 * p_hat + kappa2 * annuity],
        [delta1 * psi1 - kappa1 * psi2, delta2 * psi1 - kappa2 * psi2],
    ])


def exposure_determinant(delta1, kappa1, delta2, kappa2, p_hat, annuity, psi1, psi2):
    """Determinant of :func:`exposure_matrix`: (delta2 kappa1 - delta1 kappa2)(p_hat psi2 + annuity psi1)."""
    return (delta2 * kappa1 - delta1 * kappa2) * (p_hat * psi2 + annuity * psi1)


def unit_cds_quantities(model, env, maturity: float, t: float, state=None, survival=1.0):
    """p_hat, annuity, psi1, psi2 for unit-protection legs at (t, state)."""
    if state is None:
        state = model.initial_state()
    unit = CdsSpec(0.0, 1.0, maturity)
    legs = cds_legs(model, env, unit, t, state)
    scale = _diffusion_scale(env, t, survival)
    if isinstance(model, SquareRootIntensity):
        g = cds_legs_gradient(model, env, unit, t, state)
        psi1 = model.apply_loading(state, g.protection_value)[..., 0] * scale
        psi2 = model.apply_loading(state, g.annuity_value)[..., 0] * scale
    else:
        psi1 = psi2 = np.zeros(np.shape(legs.protection_value))
    return 1.0 - np.asarray(legs.protection_value), np.asarray(legs.annuity_value), psi1, psi2

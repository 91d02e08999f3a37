"""Rate environment, default-intensity models and default-time sampling.

Model states
------------
The square-root model carries its factor level ``x`` (intensity ``scale * x``)
as state, one scalar per path.  Deterministic intensity models carry the level
of the Brownian driver ``W`` instead: the intensity ignores it, but claims may
pay functions of it, which is how a deterministic-hazard market can still have
nonzero diffusion risk.  A state array has shape ``batch`` when the driver is
one dimensional and ``batch + (d,)`` otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError
from .quadrature import panel_nodes

FD_REL_BUMP = 1e-5
FD_ABS_BUMP = 1e-8


# --------------------------------------------------------------------------
# rates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MarketEnv:
    """Piecewise-constant deterministic short rate.

    ``rates[j]`` applies between ``knots[j-1]`` and ``knots[j]`` (with
    ``knots[-1]`` read as 0 and the last rate extending to the horizon).
    """

    rates: tuple[float, ...] = (0.0,)
    knots: tuple[float, ...] = ()
    horizon: float = 100.0
    _edges: np.ndarray = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)
    _ann: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rates = tuple(float(r) for r in np.atleast_1d(self.rates))
        knots = tuple(float(k) for k in np.atleast_1d(self.knots)) if len(np.atleast_1d(self.knots)) else ()
        if len(rates) != len(knots) + 1:
            raise DomainError("need exactly one more rate than knots")
        if not all(math.isfinite(r) for r in rates):
            raise DomainError("short rate must be finite")
        if any(k <= 0 for k in knots) or any(b <= a for a, b in zip(knots, knots[1:])):
            raise DomainError("rate knots must be positive and strictly increasing")
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")
        edges = np.array((0.0, *knots))
        r = np.array(rates)
        widths = np.diff(edges)
        cum = np.concatenate(([0.0], np.cumsum(widths * r[:-1])))
        # integral of 1/B over each finished piece
        piece = _exp_integral(r[:-1], widths) * np.exp(-cum[:-1])
        ann = np.concatenate(([0.0], np.cumsum(piece)))
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "_edges", edges)
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(self, "_ann", ann)

    @classmethod
    def flat(cls, rate: float = 0.0, horizon: float = 100.0) -> "MarketEnv":
        return cls(rates=(rate,), horizon=horizon)

    def _piece(self, t):
        return np.searchsorted(self._edges, t, side="right") - 1

    def short_rate(self, t):
        j = np.clip(np.searchsorted(self._edges, t, side="right") - 1, 0, len(self.rates) - 1)
        return np.asarray(self.rates)[j]

    def integrated_rate(self, t):
        """Integral of r from 0 to t."""
        t = np.asarray(t, dtype=float)
        j = np.clip(self._piece(t), 0, len(self.rates) - 1)
        return self._cum[j] + np.asarray(self.rates)[j] * (t - self._edges[j])

    def savings(self, t):
        """Savings account B(t)."""
        return np.exp(self.integrated_rate(t))

    def discount(self, t, T):
        """B(t)/B(T), vectorised in both arguments."""
        return np.exp(self.integrated_rate(t) - self.integrated_rate(T))

    def annuity_from_zero(self, s):
        """Integral of 1/B(u) over [0, s]."""
        s = np.asarray(s, dtype=float)
        j = np.clip(self._piece(s), 0, len(self.rates) - 1)
        r = np.asarray(self.rates)[j]
        return self._ann[j] + np.exp(-self._cum[j]) * _exp_integral(r, s - self._edges[j])

    def annuity(self, s0, s1):
        """Integral of 1/B(u) over [s0, s1] (not rebased)."""
        return self.annuity_from_zero(s1) - self.annuity_from_zero(s0)

    def accrual_value(self, rate, s0, s1, nodes: int = 32):
        """Integral of rate(u)/B(u) over [s0, s1]; rate is a number or a function of time."""
        if not callable(rate):
            return float(rate) * self.annuity(s0, s1)
        s0 = np.asarray(s0, dtype=float)
        s1 = np.asarray(s1, dtype=float)
        s0, s1 = np.broadcast_arrays(s0, s1)
        edges = self._edges
        out = np.zeros(s0.shape)
        x, w = np.polynomial.legendre.leggauss(nodes)
        uppers = np.append(edges[1:], np.inf)
        for lo_e, hi_e in zip(edges, uppers):
            lo = np.clip(s0, lo_e, hi_e)
            hi = np.clip(s1, lo_e, hi_e)
            half = 0.5 * (hi - lo)
            if not np.any(half > 0):
                continue
            u = lo[..., None] + half[..., None] * (x + 1.0)
            vals = np.asarray(rate(u), dtype=float) * np.exp(-self.integrated_rate(u))
            out = out + half * (vals @ w)
        return out

    def breakpoints(self, a: float, b: float) -> tuple[float, ...]:
        return tuple(k for k in self.knots if a < k < b)


def _exp_integral(r, width):
    """Integral of exp(-r s) over [0, width], stable at r = 0."""
    r = np.asarray(r, dtype=float)
    width = np.asarray(width, dtype=float)
    rw = r * width
    small = np.abs(rw) < 1e-12
    safe_r = np.where(small, 1.0, r)
    return np.where(small, width * (1.0 - 0.5 * rw), -np.expm1(-rw) / safe_r)


def discount(env: MarketEnv, t: float, T: float) -> float:
    """B(t)/B(T) = exp(-integral of r over [t, T])."""
    if not (0.0 <= t <= T <= env.horizon):
        raise DomainError(f"need 0 <= t <= T <= horizon, got t={t}, T={T}, horizon={env.horizon}")
    return float(env.discount(t, T))


# --------------------------------------------------------------------------
# intensity models
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _hermite_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = np.polynomial.hermite_e.hermegauss(n)
    return z, w / math.sqrt(2.0 * math.pi)


@lru_cache(maxsize=None)
def _hermite_grid(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = _hermite_rule(n)
    pts = np.stack(np.meshgrid(*([z] * d), indexing="ij"), axis=-1).reshape(-1, d)
    wts = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=-1)
    return pts, wts


class IntensityModel:
    """Common interface of the single-name intensity models."""

    driver_dim: int = 1
    deterministic: bool = True
    kind: str = ""

    def initial_state(self):
        raise NotImplementedError

    def batch_shape(self, state) -> tuple[int, ...]:
        s = np.shape(state)
        return s if self.driver_dim == 1 else s[:-1]

    def intensity(self, t, state=None):
        raise NotImplementedError

    def survival(self, t, u, state):
        """E[exp(-int_t^u lambda) | state]; trailing axes follow ``u``."""
        raise NotImplementedError

    def density(self, t, u, state):
        """E[lambda_u exp(-int_t^u lambda) | state] = -d/du survival."""
        raise NotImplementedError

    def apply_loading(self, state, grad):
        """Turn a state gradient into the integrand against W (trailing axis d)."""
        raise NotImplementedError

    def breakpoints(self, a: float, b: float) -> tuple[float, ...]:
        return ()


class DeterministicIntensity(IntensityModel):
    """Intensity depending on time only; state is the Brownian driver level."""

    deterministic = True

    def initial_state(self):
        return 0.0 if self.driver_dim == 1 else np.zeros(self.driver_dim)

    def hazard(self, t):
        raise NotImplementedError

    def cumulative_hazard(self, t):
        raise NotImplementedError

    def inverse_cumulative_hazard(self, level):
        raise NotImplementedError

    def intensity(self, t, state=None):
        return self.hazard(t)

    def survival(self, t, u, state=None):
        return np.exp(self.cumulative_hazard(t) - self.cumulative_hazard(u))

    def density(self, t, u, state=None):
        return self.hazard(u) * self.survival(t, u)

    def apply_loading(self, state, grad):
        grad = np.asarray(grad, dtype=float)
        return grad[..., None] if self.driver_dim == 1 else grad

    def expect(self, fn: Callable, t: float, u, state, with_time: bool = False, nodes: int = 40):
        """E[fn(W_u) | W_t = state] by Gauss-Hermite quadrature.

        With ``with_time`` the function is called as fn(u, W_u).  The result has
        shape ``batch + shape(u)``.
        """
        s = np.asarray(state, dtype=float)
        u_arr = np.atleast_1d(np.asarray(u, dtype=float))
        sd = np.sqrt(np.maximum(u_arr - t, 0.0))
        d = self.driver_dim
        if d == 1:
            z, w = _hermite_rule(nodes)
            pts = s[..., None, None] + sd[:, None] * z
            uu = u_arr[:, None]
        else:
            z, w = _hermite_grid(min(nodes, 16), d)
            pts = s[..., None, None, :] + sd[:, None, None] * z
            uu = u_arr[:, None]
        vals = np.asarray(fn(uu, pts) if with_time else fn(pts), dtype=float)
        vals = np.broadcast_to(vals, pts.shape if d == 1 else pts.shape[:-1])
        out = vals @ w
        return out if np.ndim(u) else out[..., 0]


@dataclass(frozen=True)
class ConstantIntensity(DeterministicIntensity):
    rate: float
    driver_dim: int = 1
    kind = "constant"

    def __post_init__(self):
        if not (math.isfinite(self.rate) and self.rate >= 0):
            raise DomainError("intensity must be finite and nonnegative")
        if self.driver_dim < 1:
            raise DomainError("driver_dim must be at least 1")

    def hazard(self, t):
        return np.full(np.shape(t), self.rate) if np.ndim(t) else self.rate

    def cumulative_hazard(self, t):
        return self.rate * np.asarray(t, dtype=float)

    def inverse_cumulative_hazard(self, level):
        level = np.asarray(level, dtype=float)
        if self.rate == 0.0:
            return np.full(level.shape, np.inf)
        return level / self.rate


@dataclass(frozen=True)
class PiecewiseIntensity(DeterministicIntensity):
    """Left-continuous step intensity: values[j] on (knots[j-1], knots[j]]."""

    knots: tuple[float, ...]
    values: tuple[float, ...]
    driver_dim: int = 1
    kind = "piecewise"
    _edges: np.ndarray = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        values = tuple(float(v) for v in self.values)
        if len(values) != len(knots) + 1:
            raise DomainError("need exactly one more value than knots")
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise DomainError("intensity values must be finite and nonnegative")
        if any(k <= 0 for k in knots) or any(b <= a for a, b in zip(knots, knots[1:])):
            raise DomainError("knots must be positive and strictly increasing")
        edges = np.array((0.0, *knots))
        cum = np.concatenate(([0.0], np.cumsum(np.diff(edges) * np.array(values[:-1]))))
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_edges", edges)
        object.__setattr__(self, "_cum", cum)

    def hazard(self, t):
        j = np.searchsorted(np.asarray(self.knots), t, side="left")
        return np.asarray(self.values)[j]

    def cumulative_hazard(self, t):
        t = np.asarray(t, dtype=float)
        j = np.clip(np.searchsorted(self._edges, t, side="right") - 1, 0, len(self.values) - 1)
        return self._cum[j] + np.asarray(self.values)[j] * (t - self._edges[j])

    def inverse_cumulative_hazard(self, level):
        level = np.asarray(level, dtype=float)
        vals = np.asarray(self.values)
        j = np.clip(np.searchsorted(self._cum, level, side="right") - 1, 0, len(vals) - 1)
        # skip flat pieces sitting exactly on the level
        rate = vals[j]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self._edges[j] + (level - self._cum[j]) / rate
        return np.where(rate > 0, t, np.where(level <= self._cum[j], self._edges[j], np.inf))

    def breakpoints(self, a: float, b: float) -> tuple[float, ...]:
        return tuple(k for k in self.knots if a < k < b)


@dataclass(frozen=True)
class HazardCurve(DeterministicIntensity):
    """Deterministic intensity given by callables, e.g. a conditional survivor hazard."""

    cumulative: Callable = field(compare=False)
    rate_fn: Callable = field(compare=False)
    knots: tuple[float, ...] = ()
    driver_dim: int = 1
    kind = "curve"

    def hazard(self, t):
        return self.rate_fn(np.asarray(t, dtype=float))

    def cumulative_hazard(self, t):
        return self.cumulative(np.asarray(t, dtype=float))

    def inverse_cumulative_hazard(self, level, upper: float = 1e3):
        level = np.asarray(level, dtype=float)
        lo = np.zeros(level.shape)
        hi = np.full(level.shape, upper)
        reach = self.cumulative_hazard(hi) >= level
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            above = self.cumulative_hazard(mid) >= level
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        return np.where(reach, hi, np.inf)

    def breakpoints(self, a: float, b: float) -> tuple[float, ...]:
        return tuple(k for k in self.knots if a < k < b)


@dataclass(frozen=True)
class SquareRootIntensity(IntensityModel):
    """Intensity scale * x with dx = a(b - x)dt + sigma sqrt(x) dW."""

    a: float
    b: float
    sigma: float
    x0: float
    scale: float = 1.0
    driver_dim: int = field(default=1, init=False)
    deterministic = False
    kind = "square_root"

    def __post_init__(self):
        for name in ("a", "b", "sigma", "x0", "scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and nonnegative")

    def initial_state(self):
        return self.x0

    def intensity(self, t, state):
        return self.scale * np.maximum(np.asarray(state, dtype=float), 0.0)

    def drift(self, state):
        return self.a * (self.b - np.maximum(state, 0.0))

    def volatility(self, state):
        return self.sigma * np.sqrt(np.maximum(state, 0.0))

    def apply_loading(self, state, grad):
        return (self.volatility(state) * np.asarray(grad, dtype=float))[..., None]

    def riccati(self, tau):
        """B, log A and their tau-derivatives, so survival = exp(logA - B x)."""
        tau = np.asarray(tau, dtype=float)
        a, b, s, c = self.a, self.b, self.sigma, self.scale
        if s * s < 1e-14:
            if a > 0:
                B = c * (-np.expm1(-a * tau)) / a
                logA = -b * (c * tau - B)
            else:
                B = c * tau
                logA = np.zeros_like(tau)
        else:
            h = math.sqrt(a * a + 2.0 * c * s * s)
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                e = np.exp(-h * tau)
                em1 = -np.expm1(-h * tau)
                D = (h + a) * em1 + 2.0 * h * e
                B = 2.0 * c * em1 / D
                logA = (2.0 * a * b / (s * s)) * (math.log(2.0 * h) + 0.5 * (a - h) * tau - np.log(D))
        with np.errstate(over="ignore", invalid="ignore"):
            dB = c - a * B - 0.5 * s * s * B * B
            dlogA = -a * b * B
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(logA))):
            raise DomainError("Riccati coefficients overflow for these parameters")
        return B, logA, dB, dlogA

    def transforms(self, t, u, state, gradients: bool = False):
        """Survival and density (and their state derivatives) on the grid u."""
        x = np.asarray(state, dtype=float)
        B, logA, dB, dlogA = self.riccati(np.asarray(u, dtype=float) - t)
        xb = x[..., None] if np.ndim(B) else x
        P = np.exp(logA - B * xb)
        slope = -dlogA + dB * xb
        dens = P * slope
        if not gradients:
            return P, dens
        dP = -B * P
        ddens = dP * slope + P * dB
        return P, dens, dP, ddens

    def survival(self, t, u, state):
        return self.transforms(t, u, state)[0]

    def density(self, t, u, state):
        return self.transforms(t, u, state)[1]

    def mean(self, t, state=None):
        x = self.x0 if state is None else state
        return self.b + (x - self.b) * np.exp(-self.a * t)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def survival_probability(model: IntensityModel, t: float, state, T: float):
    """Conditional survival factor E[exp(-int_t^T lambda) | state]."""
    if T < t:
        raise DomainError("need t <= T")
    if state is None:
        state = model.initial_state()
    out = np.asarray(model.survival(t, T, state), dtype=float)
    batch = model.batch_shape(state)
    if not batch:
        return float(out)
    return np.broadcast_to(out, batch).copy()


@dataclass(frozen=True)
class ReprCoefficient:
    t: float
    value: np.ndarray


def state_gradient(fn: Callable, t: float, state, driver_dim: int = 1) -> np.ndarray:
    """Central finite-difference gradient of fn(t, state) in the state."""
    s = np.asarray(state, dtype=float)
    if driver_dim == 1:
        h = np.maximum(FD_REL_BUMP * np.abs(s), FD_ABS_BUMP)
        grad = (np.asarray(fn(t, s + h)) - np.asarray(fn(t, s - h))) / (2.0 * h)
    else:
        cols = []
        for j in range(driver_dim):
            h = np.maximum(FD_REL_BUMP * np.abs(s[..., j]), FD_ABS_BUMP)
            bump = np.zeros(s.shape)
            bump[..., j] = h
            cols.append((np.asarray(fn(t, s + bump)) - np.asarray(fn(t, s - bump))) / (2.0 * h))
        grad = np.stack(cols, axis=-1)
    if not np.all(np.isfinite(grad)):
        raise DomainError("non-finite finite-difference quotient")
    return grad


def repr_coefficient(model: IntensityModel, pricing_fn: Callable, t: float, state=None) -> ReprCoefficient:
    """Integrand against W of the martingale f(t, state): loading times gradient."""
    if state is None:
        state = model.initial_state()
    grad = state_gradient(pricing_fn, t, state, model.driver_dim)
    return ReprCoefficient(t, model.apply_loading(state, grad))


def sample_default_time(times: Sequence[float], cumulative_hazard: Sequence[float], uniform_draw: float) -> float:
    """First time the grid-interpolated cumulative hazard reaches -ln(u)."""
    if not 0.0 < uniform_draw < 1.0:
        raise DomainError("uniform draw must lie in (0, 1)")
    tau = default_times_on_grid(np.asarray(times, float), np.asarray(cumulative_hazard, float)[None, :],
                                np.array([-math.log(uniform_draw)]))
    return float(tau[0])


def default_times_on_grid(times: np.ndarray, cumhaz: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Vectorised threshold crossing; cumhaz has shape (paths, nodes)."""
    if np.any(np.diff(cumhaz, axis=-1) < 0):
        raise DomainError("cumulative hazard must be nondecreasing")
    e = np.asarray(thresholds, dtype=float)
    hit = cumhaz >= e[:, None]
    crossed = hit[:, -1]
    k = np.argmax(hit, axis=1)  # first node at or above the threshold
    k = np.maximum(k, 1)
    rows = np.arange(len(e))
    lo, hi = cumhaz[rows, k - 1], cumhaz[rows, k]
    t0, t1 = times[k - 1], times[k]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(hi > lo, (e - lo) / (hi - lo), 1.0)
    tau = t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0)
    return np.where(crossed, tau, np.inf)


def panel_grid(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Single-panel Gauss-Legendre nodes on [a, b]."""
    return panel_nodes(np.array([a, b]), n)

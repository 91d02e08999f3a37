import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdshedge import (
    CdsSpec,
    ConstantIntensity,
    DomainError,
    HedgeTarget,
    MarketEnv,
    NonHedgeableError,
    RollingCdsSpec,
    RollingFamily,
    SquareRootIntensity,
    build_rolling_instrument,
    cds_ex_dividend_price,
    market_spread,
    rolling_hedge_solve,
    rolling_wealth_step,
)

ENV = MarketEnv.flat(0.02)
ZERO = MarketEnv.flat(0.0)
CIR = SquareRootIntensity(a=0.5, b=0.03, sigma=0.1, x0=0.03)


def rolling_wealth_paths(model, env, spec, paths, steps, horizon, seed):
    """Discounted rolling wealth by repeated single steps, with exponential default thresholds."""
    rng = np.random.default_rng(seed)
    dt = horizon / steps
    x = np.full(paths, model.initial_state() if not model.deterministic else 0.0, dtype=float)
    thresholds = rng.exponential(size=paths)
    cum = np.zeros(paths)
    R = np.zeros(paths)
    alive = np.ones(paths, bool)
    out = np.zeros((paths, steps + 1))
    for k in range(steps):
        t = k * dt
        i = np.nonzero(alive)[0]
        lam = np.broadcast_to(model.intensity(t, x[i]), i.shape)
        step_hazard = lam * dt
        hit = cum[i] + step_hazard >= thresholds[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            tau = np.where(hit, t + (thresholds[i] - cum[i]) / np.where(lam > 0, lam, 1.0), np.inf)
        dW = rng.standard_normal(i.size) * math.sqrt(dt)
        R[i] = rolling_wealth_step(model, env, spec, t, x[i], R[i], dt, dW, hit, tau)
        cum[i] += step_hazard
        if not model.deterministic:
            xp = np.maximum(x[i], 0.0)
            x[i] = x[i] + model.a * (model.b - xp) * dt + model.sigma * np.sqrt(xp) * dW
        alive[i[hit]] = False
        out[:, k + 1] = R / env.savings((k + 1) * dt)
    return out


def test_zero_protection_wealth_stays_zero():
    spec = RollingCdsSpec(0.0, 3.0, protection=0.0)
    R = rolling_wealth_step(ConstantIntensity(0.05), ENV, spec, 0.0, 0.0, 0.0, 0.01, 0.3, False)
    assert R == 0.0
    assert rolling_wealth_step(ConstantIntensity(0.05), ENV, spec, 0.0, 0.0, 0.0, 0.01, 0.3, True, 0.004) == 0.0


def test_deterministic_wealth_drift_and_jump():
    spec = RollingCdsSpec(0.0, 3.0, protection=1.0)
    m = ConstantIntensity(0.05)
    assert rolling_wealth_step(m, ZERO, spec, 0.0, 0.0, 0.0, 0.1, 0.0, False) == pytest.approx(-0.005, rel=1e-14)
    assert rolling_wealth_step(m, ZERO, spec, 0.0, 0.0, 0.0, 0.1, 0.0, True, 0.04) == pytest.approx(1 - 0.002,
                                                                                                  rel=1e-14)


def test_step_after_expiry_rejected():
    with pytest.raises(DomainError):
        rolling_wealth_step(ConstantIntensity(0.05), ENV, RollingCdsSpec(0.0, 1.0), 1.0, 0.0, 0.0, 0.1, 0.0)


def test_deterministic_wealth_is_a_martingale():
    v = rolling_wealth_paths(ConstantIntensity(0.05), ZERO, RollingCdsSpec(0.0, 4.0, protection=1.0),
                             10**5, 40, 2.0, seed=12)
    se = v.std(axis=0, ddof=1)[1:] / math.sqrt(v.shape[0])
    assert np.all(np.abs(v.mean(axis=0)[1:]) <= 3 * se)


def test_square_root_discounted_wealth_is_flat():
    v = rolling_wealth_paths(CIR, ENV, RollingCdsSpec(0.0, 4.0, protection=0.6), 20000, 20, 1.0, seed=13)
    se = v.std(axis=0, ddof=1)[1:] / math.sqrt(v.shape[0])
    assert np.all(np.abs(v.mean(axis=0)[1:]) <= 3 * se), v.mean(axis=0) / np.r_[1.0, se]


def test_pre_default_increment_converges_at_first_order():
    # dR = r R dt - delta lambda dt before default; exact solution from R_0 = 0.4
    r, lam, delta, h, R0 = 0.05, 0.08, 0.6, 1.0, 0.4
    env = MarketEnv.flat(r)
    spec = RollingCdsSpec(0.0, 5.0, protection=delta)
    exact = R0 * math.exp(r * h) - delta * lam * math.expm1(r * h) / r
    errors = []
    for n in (10, 20, 40, 80):
        R = R0
        for k in range(n):
            R = rolling_wealth_step(ConstantIntensity(lam), env, spec, k * h / n, 0.0, R, h / n, 0.0, False)
        errors.append(abs(float(R) - exact))
    orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    assert min(orders) >= 0.95


def test_family_windows_partition_the_horizon():
    fam = RollingFamily(2.0, lifespan=0.25)
    sched = fam.schedule(5.0)
    for t in np.linspace(0.0, 5.0, 1001, endpoint=False):
        assert sum(s.active(t) for s in sched) == 1
        assert fam.contract_at(t).active(t)


@given(t=st.floats(0.0, 20.0))
def test_family_member_covers_window(t):
    fam = RollingFamily(3.0, lifespan=0.5)
    spec = fam.contract_at(t)
    assert spec.start <= t < spec.start + spec.lifespan + 1e-9
    assert spec.expiry == pytest.approx(spec.start + 0.5 + 3.0)


@pytest.mark.parametrize("model", [ConstantIntensity(0.04), CIR])
def test_fresh_rolling_contract_is_worthless(model):
    fam = RollingFamily(2.0, protection=0.6)
    for spec in fam.schedule(3.0):
        t = spec.start
        state = model.initial_state() if not model.deterministic else 0.0
        k = float(market_spread(model, ENV, 0.6, spec.expiry, t, state))
        assert abs(cds_ex_dividend_price(model, ENV, CdsSpec(k, 0.6, spec.expiry), t, state)) <= 1e-10


def test_self_replication():
    spec = RollingCdsSpec(0.0, 3.0, protection=0.6)
    i = build_rolling_instrument(CIR, ENV, spec, 0.1)
    plan = rolling_hedge_solve([i], HedgeTarget(i.jump_exposure, i.diffusion_exposure), 0.1)
    assert plan.positions == pytest.approx([1.0], abs=1e-12)


def test_jump_only_position_is_ratio():
    spec = RollingCdsSpec(0.0, 3.0, protection=0.6)
    i = build_rolling_instrument(ConstantIntensity(0.05), ENV, spec, 0.1, 0.0)
    plan = rolling_hedge_solve([i], HedgeTarget(np.array([0.3]), np.zeros(1)), 0.1)
    assert plan.positions == pytest.approx([0.5], rel=1e-14)


def test_two_rolling_instruments_hand_inversion():
    t = 0.1
    insts = [build_rolling_instrument(CIR, ENV, RollingCdsSpec(0.0, 2.25, protection=1.0), t),
             build_rolling_instrument(CIR, ENV, RollingCdsSpec(0.0, 5.25, protection=0.6), t)]
    (a, c), (b, d) = [(float(i.jump_exposure[0]), float(i.diffusion_exposure[0])) for i in insts]
    zj, zd = 0.2, -0.01
    det = a * d - b * c
    expected = [(d * zj - b * zd) / det, (a * zd - c * zj) / det]
    plan = rolling_hedge_solve(insts, HedgeTarget(np.array([zj]), np.array([zd])), t)
    assert plan.positions == pytest.approx(expected, rel=1e-12)


def test_inactive_instruments_get_no_position():
    fam = RollingFamily(2.0, lifespan=0.25, protection=0.6)
    m = ConstantIntensity(0.05)
    insts = [build_rolling_instrument(m, ENV, s, 0.3, 0.0) for s in fam.schedule(1.0)]
    plan = rolling_hedge_solve(insts, HedgeTarget(np.array([0.3]), np.zeros(1)), 0.3)
    assert plan.positions == pytest.approx([0.0, 0.5, 0.0, 0.0], abs=1e-14)


def test_no_active_instrument_is_not_hedgeable():
    i = build_rolling_instrument(ConstantIntensity(0.05), ENV, RollingCdsSpec(0.0, 2.0), 0.0, 0.0)
    with pytest.raises(NonHedgeableError):
        rolling_hedge_solve([i], HedgeTarget(np.array([0.3]), np.zeros(1)), 1.0)


def test_analytic_diffusion_matches_finite_difference():
    spec = RollingCdsSpec(0.0, 3.0, protection=0.6)
    a = build_rolling_instrument(CIR, ENV, spec, 0.1, 0.04, method="analytic").diffusion_exposure
    f = build_rolling_instrument(CIR, ENV, spec, 0.1, 0.04, method="fd").diffusion_exposure
    assert float(a[0]) == pytest.approx(float(f[0]), rel=1e-6)


def test_spec_validation():
    with pytest.raises(DomainError):
        RollingCdsSpec(2.0, 1.0)
    with pytest.raises(DomainError):
        RollingCdsSpec(0.0, 1.0, lifespan=0.0)
    with pytest.raises(DomainError):
        RollingFamily(0.0)

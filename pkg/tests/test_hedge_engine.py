import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdshedge import (
    CdsSpec,
    ConstantIntensity,
    DefaultableClaim,
    HedgeInstrument,
    HedgeTarget,
    MarketEnv,
    NonHedgeableError,
    SquareRootIntensity,
    bank_position,
    build_instrument,
    build_target,
    exposure_determinant,
    market_spread,
    prop24_determinant,
    solve_matching,
)
from cdshedge.hedge_engine import exposure_matrix, exposure_system, prop24_matrix, unit_cds_quantities

ENV = MarketEnv.flat(0.02)
CIR = SquareRootIntensity(a=0.5, b=0.03, sigma=0.1, x0=0.03)
finite = st.floats(-10.0, 10.0, allow_nan=False)


def inst(jump, diff):
    return HedgeInstrument(None, np.atleast_1d(jump), np.atleast_1d(diff))


def test_deterministic_intensity_has_no_diffusion_exposure():
    i = build_instrument(ConstantIntensity(0.03), ENV, CdsSpec(0.01, 0.6, 5.0), 1.0, 0.2)
    assert np.all(i.diffusion_exposure == 0.0)


def test_null_contract_has_no_exposure():
    i = build_instrument(CIR, ENV, CdsSpec(0.0, 0.0, 5.0), 1.0, 0.03)
    assert np.all(i.jump_exposure == 0.0) and np.all(i.diffusion_exposure == 0.0)


def test_jump_exposure_is_protection_minus_price():
    cds = CdsSpec(0.02, 0.6, 5.0)
    i = build_instrument(CIR, ENV, cds, 1.0, 0.03)
    from cdshedge import cds_ex_dividend_price
    assert i.jump_exposure[0] == pytest.approx(0.6 - cds_ex_dividend_price(CIR, ENV, cds, 1.0, 0.03), rel=1e-14)


@pytest.mark.parametrize("x", [0.005, 0.03, 0.1])
def test_analytic_diffusion_matches_finite_difference(x):
    cds = CdsSpec(0.015, 0.6, 5.0)
    a = build_instrument(CIR, ENV, cds, 0.8, x, method="analytic").diffusion_exposure
    f = build_instrument(CIR, ENV, cds, 0.8, x, method="fd").diffusion_exposure
    assert float(a[0]) == pytest.approx(float(f[0]), rel=1e-6)


def test_target_analytic_diffusion_matches_finite_difference():
    claim = DefaultableClaim(3.0, payoff=1.0, recovery=0.2)
    a = build_target(CIR, ENV, claim, 0.5, 0.04, method="analytic").diffusion_target
    f = build_target(CIR, ENV, claim, 0.5, 0.04, method="fd").diffusion_target
    assert float(a[0]) == pytest.approx(float(f[0]), rel=1e-6)


def test_self_replication():
    cds = [CdsSpec(0.01, 1.0, 5.0), CdsSpec(0.02, 0.6, 3.0)]
    insts = [build_instrument(CIR, ENV, c, 0.5, 0.03) for c in cds]
    plan = solve_matching(insts, HedgeTarget(insts[0].jump_exposure, insts[0].diffusion_exposure))
    assert plan.positions == pytest.approx([1.0, 0.0], abs=1e-12)
    assert not plan.singular


def test_zero_protection_pair_is_not_hedgeable():
    model = ConstantIntensity(0.03)
    claim = DefaultableClaim(5.0, payoff=lambda w: w)
    insts = [build_instrument(model, ENV, CdsSpec(k, 0.0, 5.0), 1.0, 0.3) for k in (0.01, 0.02)]
    with pytest.raises(NonHedgeableError) as err:
        solve_matching(insts, build_target(model, ENV, claim, 1.0, 0.3))
    assert err.value.residual is not None
    assert "residual" in err.value.record()


def test_two_by_two_hand_inversion():
    plan = solve_matching([inst(2.0, 1.0), inst(1.0, 1.0)], HedgeTarget(np.array([3.0]), np.array([2.0])))
    assert plan.positions == pytest.approx([1.0, 1.0], abs=1e-14)


def test_batched_solve():
    jumps = np.array([[2.0], [4.0]])
    plan = solve_matching([HedgeInstrument(None, jumps, np.array([[1.0], [1.0]])),
                           HedgeInstrument(None, np.array([[1.0], [1.0]]), np.array([[1.0], [2.0]]))],
                          HedgeTarget(np.array([[3.0], [5.0]]), np.array([[2.0], [3.0]])))
    assert plan.positions == pytest.approx(np.array([[1.0, 1.0], [1.0, 1.0]]), abs=1e-13)


@pytest.mark.parametrize("s,singular", [(2e-10, False), (5e-11, True)])
def test_singularity_threshold(s, singular):
    rot = np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
    N = rot @ np.diag([1.0, s]) @ rot.T
    insts = [inst(N[0, j], N[1, j]) for j in range(2)]
    plan = solve_matching(insts, HedgeTarget(np.array([1.0]), np.array([0.0])), raise_on_singular=False)
    assert bool(plan.singular) is singular


def test_overdetermined_consistent_system():
    insts = [inst(1.0, 0.0), inst(0.0, 1.0), inst(1.0, 1.0)]
    plan = solve_matching(insts, HedgeTarget(np.array([2.0]), np.array([3.0])))
    N, rhs = exposure_system(insts, HedgeTarget(np.array([2.0]), np.array([3.0])))
    assert N @ plan.positions == pytest.approx(rhs, abs=1e-12)


def test_underdetermined_inconsistent_system_is_rejected():
    with pytest.raises(NonHedgeableError):
        solve_matching([inst(1.0, 1.0)], HedgeTarget(np.array([1.0]), np.array([2.0])))


@given(c=st.floats(-5.0, 5.0), a=finite, b=finite)
def test_positions_scale_with_target(c, a, b):
    insts = [inst(2.0, 1.0), inst(1.0, 1.0)]
    p1 = solve_matching(insts, HedgeTarget(np.array([a]), np.array([b]))).positions
    p2 = solve_matching(insts, HedgeTarget(np.array([c * a]), np.array([c * b]))).positions
    assert p2 == pytest.approx(c * p1, abs=1e-9)


@given(w1=st.floats(0.5, 3.0), w2=st.floats(0.5, 3.0), a=finite, b=finite)
def test_hedge_exposure_invariant_under_recombination(w1, w2, a, b):
    i1, i2 = inst(2.0, 1.0), inst(1.0, 1.0)
    mix = inst(w1 * 2.0 + w2 * 1.0, w1 * 1.0 + w2 * 1.0)
    target = HedgeTarget(np.array([a]), np.array([b]))
    for pair in ([i1, i2], [mix, i2]):
        N, _ = exposure_system(pair, target)
        assert N @ solve_matching(pair, target).positions == pytest.approx([a, b], abs=1e-9)


def test_determinant_example():
    assert prop24_determinant(1.0, 0.01, 0.5, 0.02, 0.3, 4.0, 0.2, 0.1) == pytest.approx(0.01155, rel=1e-12)


@given(st.lists(finite, min_size=8, max_size=8))
def test_determinant_matches_generic(args):
    assert abs(prop24_determinant(*args) - np.linalg.det(prop24_matrix(*args))) <= 1e-12 * max(
        1.0, np.abs(prop24_matrix(*args)).max() ** 2)
    assert abs(exposure_determinant(*args) - np.linalg.det(exposure_matrix(*args))) <= 1e-12 * max(
        1.0, np.abs(exposure_matrix(*args)).max() ** 2)


def test_degenerate_determinants_vanish():
    assert prop24_determinant(0.5, 0.01, 1.0, 0.02, 0.3, 4.0, 0.2, 0.1) == 0.0
    assert prop24_determinant(1.0, 0.01, 0.5, 0.02, 0.25, 0.5, 0.2, 0.4) == 0.0


def test_exposure_determinant_matches_built_system():
    t, x, T = 0.5, 0.035, 5.0
    k1 = float(market_spread(CIR, ENV, 1.0, T, t, x))
    k2 = 1.5 * float(market_spread(CIR, ENV, 0.6, T, t, x))
    insts = [build_instrument(CIR, ENV, CdsSpec(k1, 1.0, T), t, x, method="analytic"),
             build_instrument(CIR, ENV, CdsSpec(k2, 0.6, T), t, x, method="analytic")]
    N, _ = exposure_system(insts, HedgeTarget(np.zeros(1), np.zeros(1)))
    q = unit_cds_quantities(CIR, ENV, T, t, x)
    assert exposure_determinant(1.0, k1, 0.6, k2, *q) == pytest.approx(np.linalg.det(N), rel=1e-10)


def test_bank_position_without_risky_holdings():
    assert bank_position(2.0, [0.0, 0.0], [0.3, 0.7], ENV, 1.0) == pytest.approx(2.0 / np.exp(0.02), rel=1e-14)


def test_bank_position_fully_invested():
    assert bank_position(0.3 * 2 + 0.7 * -1, [2.0, -1.0], [0.3, 0.7], ENV, 1.0) == pytest.approx(0.0, abs=1e-15)


@given(v=finite, p=st.lists(finite, min_size=3, max_size=3), s=st.lists(finite, min_size=3, max_size=3),
       t=st.floats(0.0, 10.0))
def test_bank_position_reconstructs_wealth(v, p, s, t):
    phi0 = bank_position(v, p, s, ENV, t)
    assert phi0 * ENV.savings(t) + np.dot(p, s) == pytest.approx(v, abs=1e-12 * max(1.0, np.abs(np.multiply(p, s)).sum()))

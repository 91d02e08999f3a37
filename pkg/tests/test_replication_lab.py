import math

import numpy as np
import pytest

from cdshedge import (
    CdsSpec,
    Clayton,
    ConstantIntensity,
    DefaultableClaim,
    DomainError,
    FtdClaim,
    MarketEnv,
    MultiNameModel,
    NonHedgeableError,
    SquareRootIntensity,
    ftd_price,
    market_spread,
)
from cdshedge.replication_lab import (
    MAX_WORKERS_ENV,
    SimConfig,
    convergence_ratios,
    convergence_study,
    cumulative_price_paths,
    make_asset,
    martingale_test,
    matching_provider,
    replicate,
    replication_error,
    simulate_paths,
    wealth_rollforward,
)

ENV = MarketEnv.flat(0.02)
ZERO = MarketEnv.flat(0.0)
CIR = SquareRootIntensity(a=0.5, b=0.03, sigma=0.1, x0=0.03)
DET = ConstantIntensity(0.05)


@pytest.mark.parametrize("kw", [dict(step_count=1), dict(path_count=0), dict(horizon=0.0), dict(seed=-1),
                                dict(block_size=3), dict(brownian_steps=15)])
def test_config_validation(kw):
    args = dict(path_count=10, step_count=10, horizon=1.0) | kw
    with pytest.raises(DomainError):
        SimConfig(**args)


def test_blocks_cover_all_paths():
    cfg = SimConfig(5000, 10, 1.0, block_size=2048)
    assert [b[2] for b in cfg.blocks()] == [2048, 2048, 904]
    assert cfg.with_steps(20).dt == pytest.approx(0.05)


def test_results_do_not_depend_on_worker_count(monkeypatch):
    cfg = SimConfig(5000, 20, 3.0, seed=4)
    monkeypatch.setenv(MAX_WORKERS_ENV, "1")
    a = simulate_paths(CIR, cfg)
    monkeypatch.setenv(MAX_WORKERS_ENV, "3")
    b = simulate_paths(CIR, cfg)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.tau, b.tau)


def test_leading_paths_do_not_depend_on_path_count():
    big = simulate_paths(CIR, SimConfig(3000, 20, 3.0, seed=4))
    small = simulate_paths(CIR, SimConfig(100, 20, 3.0, seed=4))
    assert np.array_equal(small.states, big.states[:100]) and np.array_equal(small.tau, big.tau[:100])


def test_antithetic_increments_are_mirrored():
    b = simulate_paths(CIR, SimConfig(8, 10, 1.0, seed=1, antithetic=True, block_size=8))
    assert np.array_equal(b.dW[4:], -b.dW[:4])


def test_coarse_increments_aggregate_fine_ones():
    fine = simulate_paths(DET, SimConfig(50, 40, 2.0, seed=3))
    coarse = simulate_paths(DET, SimConfig(50, 10, 2.0, seed=3, brownian_steps=40))
    assert coarse.dW == pytest.approx(fine.dW.reshape(50, 10, 4, 1).sum(axis=2), abs=1e-14)
    assert np.array_equal(coarse.tau, fine.tau)


def test_zero_volatility_path_is_euler_recursion():
    m = SquareRootIntensity(a=0.5, b=0.03, sigma=0.0, x0=0.08)
    b = simulate_paths(m, SimConfig(3, 50, 2.0, seed=0))
    k = np.arange(51)
    expected = 0.03 + (0.08 - 0.03) * (1 - 0.5 * 0.04) ** k
    assert b.states == pytest.approx(np.broadcast_to(expected, (3, 51)), rel=1e-12)


def test_square_root_mean_reverts():
    # started at the long-run level the mean stays there
    b = simulate_paths(CIR, SimConfig(20000, 100, 2.0, seed=8))
    xT = b.states[:, -1]
    assert abs(xT.mean() - 0.03) <= 3 * xT.std(ddof=1) / math.sqrt(len(xT))


def test_deterministic_default_frequency():
    b = simulate_paths(DET, SimConfig(20000, 10, 4.0, seed=9))
    p = 1 - math.exp(-0.2)
    assert abs(np.mean(b.tau <= 4.0) - p) <= 3 * math.sqrt(p * (1 - p) / 20000)


def test_indicator_is_flagged_and_compensated_increments_are_not():
    b = simulate_paths(CIR, SimConfig(20000, 20, 5.0, seed=6))
    assert martingale_test(b.H).flagged
    M = np.concatenate([np.zeros((b.n_paths, 1)), np.cumsum(b.dM, axis=1)], axis=1)
    assert not martingale_test(M).flagged


def test_martingale_test_needs_enough_paths():
    with pytest.raises(DomainError):
        martingale_test(np.zeros((10, 3)))


def test_standard_error_shrinks_with_root_of_paths():
    rng = np.random.default_rng(0)
    x = np.cumsum(rng.standard_normal((40000, 5)), axis=1)
    se1 = martingale_test(x[:10000]).standard_error[1:]
    se2 = martingale_test(x[:20000]).standard_error[1:]
    assert se1 / se2 == pytest.approx(np.full(4, math.sqrt(2)), rel=0.03)


def test_replication_error_statistics():
    w = np.array([[1.0, 1.5, 2.0], [1.0, 1.0, 1.0]])
    c = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 4.0]])
    rep = replication_error(w, c, np.array([1.0, 1.0, 2.0]))
    assert rep.mean_error == pytest.approx(-2.0)
    assert rep.rmse == pytest.approx(math.sqrt(20.0))
    assert rep.max_abs_error == 6.0
    assert rep.sup_error_quantiles[1.0] == 6.0
    assert (rep.path_count, rep.step_count) == (2, 2)


def test_replication_error_excludes_singular_paths():
    w = np.array([[0.0, 1.0], [0.0, np.nan]])
    rep = replication_error(w, np.zeros((2, 2)), singular=np.array([False, True]))
    assert rep.singular_paths == 1 and rep.rmse == 1.0


def test_replication_error_shape_mismatch():
    with pytest.raises(DomainError):
        replication_error(np.zeros((2, 3)), np.zeros((2, 4)))


def test_self_replication_is_exact():
    b = simulate_paths(CIR, SimConfig(3000, 50, 3.0, seed=4))
    cds = CdsSpec(float(market_spread(CIR, ENV, 1.0, 5.0)), 1.0, 5.0)
    res = replicate(b, [cds], cds, ENV)
    assert res.report.rmse <= 1e-10 and res.report.max_abs_error <= 1e-10


def test_zero_positions_keep_wealth_constant():
    b = simulate_paths(CIR, SimConfig(200, 20, 2.0, seed=1))
    asset = make_asset(CIR, ENV, CdsSpec(0.01, 0.6, 5.0))
    wp = wealth_rollforward(b, [asset], lambda k, idx, evals, tgt: np.zeros((len(idx), 1)), ENV, 0.7)
    assert np.all(wp.values == 0.7)


def test_buy_and_hold_wealth_is_cumulative_price():
    b = simulate_paths(CIR, SimConfig(500, 20, 2.0, seed=2))
    cds = CdsSpec(0.01, 0.6, 5.0)
    wp = wealth_rollforward(b, [make_asset(CIR, ENV, cds)], lambda k, idx, evals, tgt: np.ones((len(idx), 1)),
                            ENV, 0.0)
    S = cumulative_price_paths(b, cds, ENV)
    assert wp.values == pytest.approx(S - S[:, :1], abs=1e-13)


def test_grid_replication_converges_in_deterministic_market():
    cds = CdsSpec(float(market_spread(DET, ENV, 0.6, 5.0)), 0.6, 5.0)
    rows = convergence_study(DET, ENV, [cds], DefaultableClaim(5.0, recovery=0.3), SimConfig(2000, 25, 5.0, seed=1),
                             [25, 50, 100, 200])
    assert all(r >= 1.5 for r in convergence_ratios(rows))


def test_continuous_mode_is_exact_in_deterministic_market():
    b = simulate_paths(DET, SimConfig(500, 20, 5.0, seed=3))
    cds = CdsSpec(float(market_spread(DET, ENV, 0.6, 5.0)), 0.6, 5.0)
    res = replicate(b, [cds], DefaultableClaim(5.0, recovery=0.3), ENV, mode="continuous")
    assert res.report.max_abs_error <= 1e-8 and res.report.max_default_mismatch <= 1e-8


def test_continuous_mode_rejects_diffusive_market():
    b = simulate_paths(CIR, SimConfig(10, 5, 1.0))
    with pytest.raises(DomainError):
        replicate(b, [CdsSpec(0.01, 0.6, 5.0)], DefaultableClaim(5.0, recovery=0.3), ENV, mode="continuous")


def test_continuous_mode_raises_on_null_instrument():
    b = simulate_paths(DET, SimConfig(10, 5, 1.0))
    with pytest.raises(NonHedgeableError):
        replicate(b, [CdsSpec(0.0, 0.0, 5.0)], DefaultableClaim(5.0, recovery=0.3), ENV, mode="continuous")


def test_grid_mode_counts_singular_paths():
    b = simulate_paths(DET, SimConfig(50, 5, 1.0, seed=1))
    res = replicate(b, [CdsSpec(0.0, 0.0, 5.0)], DefaultableClaim(5.0, recovery=0.3), ENV,
                    hedge_provider=matching_provider())
    assert res.report.singular_paths == 50


def test_unknown_mode_rejected():
    b = simulate_paths(DET, SimConfig(10, 5, 1.0))
    with pytest.raises(ValueError):
        replicate(b, [CdsSpec(0.01, 0.6, 5.0)], CdsSpec(0.01, 0.6, 5.0), ENV, mode="weekly")


def test_basket_first_defaulter_frequency():
    mnm = MultiNameModel((0.05, 0.1), Clayton(2.0))
    b = simulate_paths(mnm, SimConfig(20000, 10, 3.0, seed=12))
    p = float(ftd_price(mnm, ZERO, FtdClaim(3.0, recoveries=(1.0, 0.0)), 0.0))
    hit = np.mean((b.tau <= 3.0) & (b.first == 0))
    assert abs(hit - p) <= 3 * math.sqrt(p * (1 - p) / 20000)


def test_basket_compensated_increments_have_mean_zero():
    mnm = MultiNameModel((0.05, 0.1), Clayton(2.0))
    b = simulate_paths(mnm, SimConfig(20000, 10, 3.0, seed=13))
    for j in range(2):
        M = np.concatenate([np.zeros((b.n_paths, 1)), np.cumsum(b.dM[..., j], axis=1)], axis=1)
        assert not martingale_test(M).flagged


def test_path_record_fields():
    b = simulate_paths(CIR, SimConfig(20, 5, 1.0, seed=1))
    r = b.record(3)
    assert r.tau == b.tau[3] and np.array_equal(r.states, b.states[3])
    assert len(list(b)) == len(b) == 20

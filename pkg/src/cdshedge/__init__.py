"""Hedging of defaultable claims with single-name and rolling CDSs."""

__version__ = "0.1.0"

from .claims_contracts import AffinePayoff, CdsSpec, DefaultableClaim, DividendLedger, FtdClaim, realized_dividends
from .errors import (
    CdsHedgeError,
    ConfigError,
    DegenerateTenorError,
    DomainError,
    NonHedgeableError,
    QuadratureError,
)
from .hedge_engine import (
    HedgeInstrument,
    HedgePlan,
    HedgeTarget,
    bank_position,
    build_instrument,
    build_target,
    exposure_determinant,
    prop24_determinant,
    solve_matching,
)
from .market_model import (
    ConstantIntensity,
    HazardCurve,
    MarketEnv,
    PiecewiseIntensity,
    SquareRootIntensity,
    discount,
    repr_coefficient,
    sample_default_time,
    survival_probability,
)
from .multi_name import (
    Clayton,
    Independence,
    MultiNameModel,
    basket_cds_price,
    contagion_cds_value,
    copula_value,
    ftd_hedge_solve,
    ftd_intensities,
    ftd_price,
    immersion_diagnostic,
    sample_joint_defaults,
)
from .replication_lab import (
    SimConfig,
    convergence_study,
    martingale_test,
    replicate,
    replication_error,
    simulate_paths,
    wealth_rollforward,
)
from .rolling_cds import RollingCdsSpec, RollingFamily, build_rolling_instrument, rolling_hedge_solve, rolling_wealth_step
from .single_name_pricer import (
    cds_ex_dividend_price,
    cds_legs,
    claim_ex_dividend_price,
    market_spread,
    seasoned_cds_value,
)

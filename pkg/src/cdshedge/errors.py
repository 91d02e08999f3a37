"""Exception types shared across the package."""
from __future__ import annotations


class CdsHedgeError(Exception):
    """Base class for library errors."""

    code = "error"

    def record(self) -> dict:
        return {"error": self.code, "message": str(self)}


class DomainError(CdsHedgeError, ValueError):
    """Inputs outside the admissible domain (times, states, parameters)."""

    code = "domain_error"


class QuadratureError(CdsHedgeError, ArithmeticError):
    """Adaptive quadrature failed to reach its tolerance."""

    code = "quadrature_error"


class DegenerateTenorError(DomainError):
    """A spread was requested for a contract with zero remaining tenor."""

    code = "degenerate_tenor"


class NonHedgeableError(CdsHedgeError, ArithmeticError):
    """The matching system has no (unique) solution."""

    code = "non_hedgeable"

    def __init__(self, message: str, residual=None, condition_number=None, where=None):
        super().__init__(message)
        self.residual = residual
        self.condition_number = condition_number
        self.where = where

    def record(self) -> dict:
        rec = super().record()
        if self.residual is not None:
            rec["residual"] = float(max(self.residual) if hasattr(self.residual, "__len__") else self.residual)
        if self.condition_number is not None:
            rec["condition_number"] = float(self.condition_number)
        if self.where is not None:
            rec["where"] = self.where
        return rec


class ConfigError(CdsHedgeError, ValueError):
    """Scenario configuration failed validation."""

    code = "config_error"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field

    def record(self) -> dict:
        rec = super().record()
        if self.field is not None:
            rec["field"] = self.field
        return rec

"""
Exception hierarchy for the survival engine.

Every failure raised by the package derives from ``BayesurvError``. The two
intermediate bases decide how the CLI exits:

- ``UsageError``  → bad input data, formula, config or bundle (exit code 2)
- ``ModelError``  → numerical or model failure at runtime (exit code 1)
"""
from __future__ import annotations

from typing import Any


class BayesurvError(Exception):
    """Root of every error raised by bayesurv."""

    exit_code: int = 1


class UsageError(BayesurvError):
    exit_code = 2


class ModelError(BayesurvError):
    exit_code = 1


# --- data ------------------------------------------------------------------

class MissingColumn(UsageError):
    def __init__(self, column: str, available: list[str] | None = None) -> None:
        self.column = column
        msg = f"Missing column '{column}'"
        if available:
            msg += f" (available: {', '.join(available)})"
        super().__init__(msg)


class ParseFailure(UsageError):
    def __init__(self, row: int, detail: str) -> None:
        self.row = row
        super().__init__(f"Row {row}: could not parse ({detail})")


class InvariantViolation(UsageError):
    def __init__(self, row: int | None, reason: str) -> None:
        self.row = row
        self.reason = reason
        where = f"Row {row}" if row is not None else "Dataset"
        super().__init__(f"{where}: {reason}")


class UnsupportedStatus(UsageError):
    pass


class ConfigError(UsageError):
    pass


# --- splines / quadrature --------------------------------------------------

class EmptyUncensoredSet(UsageError):
    def __init__(self) -> None:
        super().__init__("Internal knots requested but no uncensored event times observed")


class AmbiguousSplineOptions(UsageError):
    def __init__(self) -> None:
        super().__init__("Supply either 'df' or 'knots' for a spline, not both")


class OutOfSupport(ModelError):
    def __init__(self, value: Any, lower: float | None = None, upper: float | None = None) -> None:
        self.value = value
        bounds = f" [{lower}, {upper}]" if lower is not None else ""
        super().__init__(f"Value {value} outside support{bounds}")


class UnsupportedOrder(UsageError):
    def __init__(self, order: int, allowed: tuple[int, ...]) -> None:
        super().__init__(f"Quadrature order {order} not supported; choose one of {allowed}")


class NonFiniteIntegrand(ModelError):
    def __init__(self, node: int) -> None:
        self.node = node
        super().__init__(f"Integrand non-finite at quadrature node {node}")


# --- hazards ---------------------------------------------------------------

class DomainError(ModelError):
    pass


class AnalyticFormUnavailable(ModelError):
    pass


class NonPositiveMass(ModelError):
    pass


class UnsupportedFamily(UsageError):
    pass


class DimensionMismatch(ModelError):
    pass


# --- priors ----------------------------------------------------------------

class InvalidSimplex(ModelError):
    pass


class InvalidCholesky(ModelError):
    pass


# --- posterior engine ------------------------------------------------------

class NonFiniteLogLik(ModelError):
    def __init__(self, record: int, payload: dict[str, Any] | None = None) -> None:
        self.record = record
        self.payload = payload or {}
        super().__init__(f"Non-finite log likelihood for record {record}: {self.payload}")


class NonFiniteGradient(ModelError):
    pass


class NonFiniteInit(ModelError):
    pass


class AllDivergent(ModelError):
    pass


class MaxIterations(ModelError):
    pass


class LineSearchFailure(ModelError):
    pass


# --- prediction / evaluation -----------------------------------------------

class ExtrapolationBeyondTmax(UsageError):
    def __init__(self, time: float, t_max: float) -> None:
        super().__init__(f"Prediction time {time} exceeds the largest observed time {t_max}")


class UnknownQuantity(UsageError):
    pass


class ConditionAfterPredictionTime(UsageError):
    pass


class DegenerateDraws(ModelError):
    pass


class UnitMismatch(UsageError):
    pass


class InsufficientDraws(ModelError):
    pass


# --- simulation ------------------------------------------------------------

class RootNotBracketed(ModelError):
    pass


# --- cli -------------------------------------------------------------------

class FormulaSyntaxError(UsageError):
    def __init__(self, position: int, detail: str, text: str = "") -> None:
        self.position = position
        pointer = f"\n  {text}\n  {' ' * position}^" if text else ""
        super().__init__(f"Formula syntax error at position {position}: {detail}{pointer}")


class UnknownFunction(UsageError):
    pass


class DuplicateResponse(UsageError):
    pass


class BundleVersionMismatch(UsageError):
    pass

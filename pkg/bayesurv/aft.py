"""
Accelerated failure time baselines (exponential and Weibull).

Covariates rescale time inside the baseline survival: S(t) = S0(A(t)) with
A(t) = t exp(-eta) for time-fixed effects and A(t) = integral of exp(-eta(u))
over [0, t] when eta varies with time.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import autograd.numpy as anp
import numpy as np

from .errors import DomainError, UnsupportedFamily
from .hazards import AuxConstraint, HazardKind
from .quadrature import QuadratureRule, integrate


class AftKind(str, Enum):
    EXPONENTIAL_AFT = "exp-aft"
    WEIBULL_AFT = "weibull-aft"


class BaseAftBaseline(ABC):
    kind: AftKind
    label: str = ""
    aux_prefix: str = ""
    constraint: AuxConstraint = AuxConstraint.NONE
    ph_kind: HazardKind
    closed_form: bool = True
    basis_kind = None
    integrated_basis_kind = None

    def n_aux(self, spline=None) -> int:
        return 0

    def aux_names(self, spline=None) -> list[str]:
        return [self.aux_prefix] if self.n_aux() else []

    @abstractmethod
    def H0(self, s, aux):
        """Baseline cumulative hazard at accelerated time ``s``."""
        ...

    @abstractmethod
    def log_h0(self, s, aux):
        """Baseline log hazard at accelerated time ``s``."""
        ...


class ExponentialAft(BaseAftBaseline):
    kind = AftKind.EXPONENTIAL_AFT
    label = "exponential AFT"
    ph_kind = HazardKind.EXPONENTIAL

    def H0(self, s, aux):
        return s

    def log_h0(self, s, aux):
        return anp.zeros_like(anp.asarray(s, dtype=float))


class WeibullAft(BaseAftBaseline):
    kind = AftKind.WEIBULL_AFT
    label = "weibull AFT"
    aux_prefix = "weibull-shape"
    constraint = AuxConstraint.POSITIVE
    ph_kind = HazardKind.WEIBULL

    def n_aux(self, spline=None) -> int:
        return 1

    def H0(self, s, aux):
        return s ** aux[0]

    def log_h0(self, s, aux):
        gamma = aux[0]
        return anp.log(gamma) + (gamma - 1.0) * anp.log(s)


AFT_BASELINES: dict[AftKind, BaseAftBaseline] = {b.kind: b for b in (ExponentialAft(), WeibullAft())}


def get_aft(kind: AftKind | str) -> BaseAftBaseline:
    try:
        return AFT_BASELINES[AftKind(kind)]
    except ValueError as e:
        raise UnsupportedFamily(f"Unknown AFT baseline '{kind}'") from e


@dataclass(frozen=True)
class AftFamily:
    kind: AftKind
    shape: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AftKind(self.kind))
        if self.kind is AftKind.WEIBULL_AFT and not (self.shape is not None and self.shape > 0):
            raise DomainError(f"Weibull AFT requires a positive shape, got {self.shape}")

    @property
    def impl(self) -> BaseAftBaseline:
        return AFT_BASELINES[self.kind]

    @property
    def aux(self) -> np.ndarray:
        return np.array([self.shape]) if self.kind is AftKind.WEIBULL_AFT else np.zeros(0)

    @property
    def gamma(self) -> float:
        return self.shape if self.kind is AftKind.WEIBULL_AFT else 1.0


def aft_log_survival(fam: AftFamily, t, eta):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError(f"time must be non-negative, got {t[t < 0].flat[0]}")
    return -fam.impl.H0(t * np.exp(-np.asarray(eta, dtype=float)), fam.aux)


def aft_log_hazard(fam: AftFamily, t, eta):
    t = np.asarray(t, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if fam.kind is AftKind.EXPONENTIAL_AFT or fam.gamma == 1.0:
        if np.any(t < 0):
            raise DomainError(f"time must be non-negative, got {t[t < 0].flat[0]}")
        return -eta + np.zeros_like(t)
    if np.any(t <= 0):
        raise DomainError(f"Weibull AFT hazard requires t > 0, got {t[t <= 0].flat[0]}")
    gamma = fam.gamma
    return np.log(gamma) + (gamma - 1.0) * np.log(t) - gamma * eta


def cumulative_acceleration(eta_fn: Callable[[np.ndarray], np.ndarray], t: float, quad: QuadratureRule) -> float:
    """Integral of exp(-eta(u)) over [0, t]."""
    return integrate(quad, lambda u: np.exp(-np.asarray(eta_fn(u), dtype=float)), t)


def aft_tve_log_survival(fam: AftFamily, cum_accel):
    cum_accel = np.asarray(cum_accel, dtype=float)
    return np.where(cum_accel == 0, 0.0, -fam.impl.H0(cum_accel, fam.aux))


def aft_tve_log_hazard(fam: AftFamily, eta_at_t, cum_accel):
    """-eta(t) + log h0(A(t)); depends on the whole history through A(t)."""
    return -np.asarray(eta_at_t, dtype=float) + fam.impl.log_h0(np.asarray(cum_accel, dtype=float), fam.aux)


def _check_mappable(family: HazardKind | AftKind | str) -> HazardKind:
    value = getattr(family, "value", family)
    mapping = {
        HazardKind.EXPONENTIAL.value: HazardKind.EXPONENTIAL,
        AftKind.EXPONENTIAL_AFT.value: HazardKind.EXPONENTIAL,
        HazardKind.WEIBULL.value: HazardKind.WEIBULL,
        AftKind.WEIBULL_AFT.value: HazardKind.WEIBULL,
    }
    if value not in mapping:
        raise UnsupportedFamily(f"PH/AFT coefficient mapping exists only for exponential and Weibull, not '{value}'")
    return mapping[value]


def ph_to_aft_coefficients(family, beta_ph: Sequence[float] | np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Exponential: beta* = -beta. Weibull: beta* = -beta / gamma. Valid only without time-varying effects."""
    kind = _check_mappable(family)
    beta = np.asarray(beta_ph, dtype=float)
    return -beta if kind is HazardKind.EXPONENTIAL else -beta / gamma


def aft_to_ph_coefficients(family, beta_aft: Sequence[float] | np.ndarray, gamma: float = 1.0) -> np.ndarray:
    kind = _check_mappable(family)
    beta = np.asarray(beta_aft, dtype=float)
    return -beta if kind is HazardKind.EXPONENTIAL else -gamma * beta

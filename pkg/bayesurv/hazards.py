"""
BaseHazard: abstract base class for the hazard-scale baseline families.

Provides:
- Closed-form log baseline hazard and cumulative hazard per family
- Linear-scale variants used inside the differentiated likelihood
- Registry keyed by the ``--basehaz`` label
- Public evaluators on a validated ``HazardFamily`` (log hazard, cumulative
  hazard, survival, interval probability)

The ``*_0`` methods take the auxiliary parameters and, for spline families, a
precomputed basis matrix, and are written with ``autograd.numpy`` so the
posterior gradient flows through them.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum

import autograd.numpy as anp
import numpy as np

from .errors import (
    AnalyticFormUnavailable,
    DimensionMismatch,
    DomainError,
    InvalidSimplex,
    NonPositiveMass,
    UnsupportedFamily,
)
from .quadrature import QuadratureRule, integrate, make_rule
from .splines import BasisKind, SplineConfig, basis_matrix


class HazardKind(str, Enum):
    EXPONENTIAL = "exp"
    WEIBULL = "weibull"
    GOMPERTZ = "gompertz"
    MSPLINE = "ms"
    BSPLINE = "bs"


class AuxConstraint(str, Enum):
    NONE = "none"
    POSITIVE = "positive"
    SIMPLEX = "simplex"
    REAL = "real"


class BaseHazard(ABC):
    """Abstract base class for a hazard-scale baseline."""

    kind: HazardKind
    label: str = ""
    aux_prefix: str = ""
    constraint: AuxConstraint = AuxConstraint.NONE
    closed_form: bool = True
    basis_kind: BasisKind | None = None
    integrated_basis_kind: BasisKind | None = None

    def n_aux(self, spline: SplineConfig | None) -> int:
        return 0

    def aux_names(self, spline: SplineConfig | None) -> list[str]:
        n = self.n_aux(spline)
        if n == 1:
            return [self.aux_prefix]
        return [f"{self.aux_prefix}{j + 1}" for j in range(n)]

    @abstractmethod
    def log_h0(self, t, aux, basis=None):
        """Log baseline hazard at ``t``."""
        ...

    def h0(self, t, aux, basis=None):
        return anp.exp(self.log_h0(t, aux, basis))

    def H0(self, t, aux, ibasis=None):
        """Baseline cumulative hazard at ``t`` (closed form)."""
        raise AnalyticFormUnavailable(f"{self.label} cumulative hazard has no closed form")

    def log_H0(self, t, aux, ibasis=None):
        return anp.log(self.H0(t, aux, ibasis))


class ExponentialHazard(BaseHazard):
    kind = HazardKind.EXPONENTIAL
    label = "exponential"

    def log_h0(self, t, aux, basis=None):
        return anp.zeros_like(anp.asarray(t, dtype=float))

    def H0(self, t, aux, ibasis=None):
        return anp.asarray(t, dtype=float)


class WeibullHazard(BaseHazard):
    kind = HazardKind.WEIBULL
    label = "weibull"
    aux_prefix = "weibull-shape"
    constraint = AuxConstraint.POSITIVE

    def n_aux(self, spline: SplineConfig | None) -> int:
        return 1

    def log_h0(self, t, aux, basis=None):
        gamma = aux[0]
        return anp.log(gamma) + (gamma - 1.0) * anp.log(t)

    def H0(self, t, aux, ibasis=None):
        return t ** aux[0]

    def log_H0(self, t, aux, ibasis=None):
        return aux[0] * anp.log(t)


def log_expm1(x):
    """log(exp(x) - 1) for x > 0 without overflow."""
    return x + anp.log(-anp.expm1(-x))


class GompertzHazard(BaseHazard):
    kind = HazardKind.GOMPERTZ
    label = "gompertz"
    aux_prefix = "gompertz-scale"
    constraint = AuxConstraint.POSITIVE

    def n_aux(self, spline: SplineConfig | None) -> int:
        return 1

    def log_h0(self, t, aux, basis=None):
        return aux[0] * t

    def H0(self, t, aux, ibasis=None):
        gamma = aux[0]
        return anp.expm1(gamma * t) / gamma

    def log_H0(self, t, aux, ibasis=None):
        gamma = aux[0]
        return log_expm1(gamma * t) - anp.log(gamma)


class MSplineHazard(BaseHazard):
    kind = HazardKind.MSPLINE
    label = "M-splines on hazard scale"
    aux_prefix = "m-splines-coef"
    constraint = AuxConstraint.SIMPLEX
    basis_kind = BasisKind.MSPLINE
    integrated_basis_kind = BasisKind.ISPLINE

    def n_aux(self, spline: SplineConfig | None) -> int:
        return spline.n_basis

    def aux_names(self, spline: SplineConfig | None) -> list[str]:
        return [f"{self.aux_prefix}{j + 1}" for j in range(self.n_aux(spline))]

    def log_h0(self, t, aux, basis=None):
        return anp.log(anp.dot(basis, aux))

    def h0(self, t, aux, basis=None):
        return anp.dot(basis, aux)

    def H0(self, t, aux, ibasis=None):
        return anp.dot(ibasis, aux)


class BSplineHazard(BaseHazard):
    """
    Log baseline hazard is a B-spline. The first basis column is dropped so the
    intercept stays identifiable (the basis is a partition of unity). Outside
    the knot support the basis rows are zero and the hazard is zero.
    """

    kind = HazardKind.BSPLINE
    label = "B-splines on log hazard scale"
    aux_prefix = "b-splines-coef"
    constraint = AuxConstraint.REAL
    closed_form = False
    basis_kind = BasisKind.BSPLINE

    def n_aux(self, spline: SplineConfig | None) -> int:
        return spline.n_basis - 1

    def aux_names(self, spline: SplineConfig | None) -> list[str]:
        return [f"{self.aux_prefix}{j + 1}" for j in range(self.n_aux(spline))]

    def log_h0(self, t, aux, basis=None):
        inside = anp.sum(basis, axis=-1) > 0.5
        return anp.where(inside, anp.dot(basis[..., 1:], aux), -anp.inf)


HAZARDS: dict[HazardKind, BaseHazard] = {
    h.kind: h
    for h in (ExponentialHazard(), WeibullHazard(), GompertzHazard(), MSplineHazard(), BSplineHazard())
}


def get_hazard(kind: HazardKind | str) -> BaseHazard:
    try:
        return HAZARDS[HazardKind(kind)]
    except ValueError as e:
        raise UnsupportedFamily(f"Unknown hazard-scale baseline '{kind}'") from e


@dataclass(frozen=True)
class HazardFamily:
    """A hazard-scale baseline with concrete auxiliary parameters."""

    kind: HazardKind
    aux: np.ndarray = field(default_factory=lambda: np.zeros(0))
    spline: SplineConfig | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", HazardKind(self.kind))
        aux = np.atleast_1d(np.asarray(self.aux, dtype=float))
        object.__setattr__(self, "aux", aux)
        impl = self.impl
        needs_spline = impl.basis_kind is not None
        if needs_spline != (self.spline is not None):
            raise DimensionMismatch(f"{impl.label}: spline configuration {'required' if needs_spline else 'not allowed'}")
        if aux.size != impl.n_aux(self.spline):
            raise DimensionMismatch(f"{impl.label}: expected {impl.n_aux(self.spline)} auxiliary parameters, got {aux.size}")
        if impl.constraint is AuxConstraint.POSITIVE and not np.all(aux > 0):
            raise DomainError(f"{impl.label}: auxiliary parameter must be positive, got {aux}")
        if impl.constraint is AuxConstraint.SIMPLEX and (np.any(aux < 0) or abs(aux.sum() - 1.0) > 1e-8):
            raise InvalidSimplex(f"M-spline coefficients must be non-negative and sum to 1, got {aux}")

    @property
    def impl(self) -> BaseHazard:
        return HAZARDS[self.kind]

    def _basis(self, t: np.ndarray, kind: BasisKind | None) -> np.ndarray | None:
        if kind is None:
            return None
        return basis_matrix(t, self.spline.with_kind(kind))


def _times(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError(f"time must be non-negative, got {t[t < 0].flat[0]}")
    return t


def log_hazard(fam: HazardFamily, t, eta):
    """
    Log hazard at ``t``. For Weibull with shape != 1 the value at t = 0 is the
    limit (-inf for shape > 1, +inf for shape < 1); negative t is an error.
    """
    t = _times(t)
    impl = fam.impl
    basis = fam._basis(t, impl.basis_kind)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = impl.log_h0(t, fam.aux, basis)
        if fam.kind is HazardKind.WEIBULL:
            out = np.where(t == 0, 0.0 if fam.aux[0] == 1.0 else (-np.inf if fam.aux[0] > 1 else np.inf), out)
    return out + np.asarray(eta, dtype=float)


def log_cumulative_hazard(fam: HazardFamily, t, eta):
    t = _times(t)
    impl = fam.impl
    if not impl.closed_form:
        raise AnalyticFormUnavailable(f"{impl.label}: cumulative hazard requires quadrature")
    ibasis = fam._basis(t, impl.integrated_basis_kind)
    with np.errstate(divide="ignore"):
        return impl.log_H0(t, fam.aux, ibasis) + np.asarray(eta, dtype=float)


def log_survival(fam: HazardFamily, t, eta):
    return -np.exp(log_cumulative_hazard(fam, t, eta))


def log_cdf(fam: HazardFamily, t, eta):
    with np.errstate(divide="ignore"):
        return np.log(-np.expm1(log_survival(fam, t, eta)))


def log_interval_probability(fam: HazardFamily, t_lower, t_upper, eta):
    """log(S(t_lower) - S(t_upper)) via log-diff-exp."""
    H_lower = np.exp(log_cumulative_hazard(fam, t_lower, eta))
    H_upper = np.exp(log_cumulative_hazard(fam, t_upper, eta))
    gap = H_upper - H_lower
    if np.any(~(gap > 0)):
        raise NonPositiveMass(f"interval ({t_lower}, {t_upper}) carries no probability mass")
    return -H_lower + np.log(-np.expm1(-gap))


def cumulative_hazard_quadrature(fam: HazardFamily, t: float, eta: float, rule: QuadratureRule | None = None) -> float:
    """H(t) by Gauss-Kronrod integration of the hazard over [0, t], split at the spline knots."""
    rule = rule or make_rule(15)
    impl = fam.impl
    breaks = fam.spline.breakpoints if fam.spline is not None else ()

    def hazard(u: np.ndarray) -> np.ndarray:
        basis = None
        if impl.basis_kind is not None:
            basis = basis_matrix(u, fam.spline.with_kind(impl.basis_kind), outside="zero")
        return np.exp(eta) * impl.h0(u, fam.aux, basis)

    return integrate(rule, hazard, float(t), breaks=breaks)

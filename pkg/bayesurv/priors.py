"""
Prior families and their log densities.

Densities include their normalizing constants. The ``logpdf_*`` helpers are
written with ``autograd.numpy`` so they can sit inside the differentiated log
posterior; ``log_prior_scalar`` is the checked public entry point.
"""
from __future__ import annotations

import math
from enum import Enum
from typing import TYPE_CHECKING, Any

import autograd.numpy as anp
import numpy as np
from autograd.scipy.special import gammaln
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import betaln

from .errors import InvalidCholesky, InvalidSimplex, OutOfSupport

if TYPE_CHECKING:
    from .data import Dataset

LOG_2PI = math.log(2.0 * math.pi)


class PriorFamily(str, Enum):
    NORMAL = "normal"
    STUDENT_T = "student_t"
    CAUCHY = "cauchy"
    EXPONENTIAL = "exponential"
    HALF_NORMAL = "half_normal"
    HALF_T = "half_t"
    HALF_CAUCHY = "half_cauchy"
    DIRICHLET = "dirichlet"
    FLAT = "flat"


POSITIVE_FAMILIES = {
    PriorFamily.EXPONENTIAL,
    PriorFamily.HALF_NORMAL,
    PriorFamily.HALF_T,
    PriorFamily.HALF_CAUCHY,
}


class ScalarPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: PriorFamily
    location: float = 0.0
    scale: float = Field(default=1.0, gt=0.0)
    rate: float = Field(default=1.0, gt=0.0)
    df: float | None = Field(default=None, gt=0.0)
    concentration: tuple[float, ...] | None = None

    @model_validator(mode="after")
    def _check_family_args(self) -> "ScalarPrior":
        if self.family in (PriorFamily.STUDENT_T, PriorFamily.HALF_T) and self.df is None:
            raise ValueError(f"{self.family.value} prior requires an explicit 'df'")
        if self.family is PriorFamily.DIRICHLET:
            if not self.concentration or any(c <= 0 for c in self.concentration):
                raise ValueError("dirichlet prior requires a positive 'concentration' vector")
        return self

    @property
    def positive_support(self) -> bool:
        return self.family in POSITIVE_FAMILIES

    def describe(self) -> str:
        f = self.family
        if f is PriorFamily.FLAT:
            return "flat"
        if f is PriorFamily.EXPONENTIAL:
            return f"exponential(rate = {self.rate:g})"
        if f is PriorFamily.DIRICHLET:
            return f"dirichlet(concentration = {list(self.concentration)})"
        extra = f", df = {self.df:g}" if self.df is not None else ""
        return f"{f.value}(location = {self.location:g}, scale = {self.scale:g}{extra})"


class CovariancePriorSpec(BaseModel):
    """Decomposition prior on a random-effects covariance matrix."""

    model_config = ConfigDict(frozen=True)

    regularization: float = Field(default=1.0, gt=0.0)
    concentration: float = Field(default=1.0, gt=0.0)
    shape: float = Field(default=1.0, gt=0.0)
    scale: float = Field(default=1.0, gt=0.0)


class SmoothPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: ScalarPrior = ScalarPrior(family=PriorFamily.EXPONENTIAL, rate=1.0)

    @field_validator("tau")
    @classmethod
    def _positive(cls, v: ScalarPrior) -> ScalarPrior:
        if not v.positive_support:
            raise ValueError("smoothing prior on tau must have positive support")
        return v


# --- densities ---------------------------------------------------------------

def _student_t(z, df):
    return (
        gammaln(0.5 * (df + 1.0))
        - gammaln(0.5 * df)
        - 0.5 * anp.log(df * math.pi)
        - 0.5 * (df + 1.0) * anp.log1p(z * z / df)
    )


def logpdf(prior: ScalarPrior, x):
    """Elementwise log density without support checks; summed over ``x``."""
    f = prior.family
    if f is PriorFamily.FLAT:
        return 0.0
    if f is PriorFamily.DIRICHLET:
        return logpdf_dirichlet(x, np.asarray(prior.concentration, dtype=float))
    if f is PriorFamily.EXPONENTIAL:
        return anp.sum(math.log(prior.rate) - prior.rate * x)
    z = (x - prior.location) / prior.scale
    log_scale = math.log(prior.scale)
    if f in (PriorFamily.NORMAL, PriorFamily.HALF_NORMAL):
        core = -0.5 * LOG_2PI - log_scale - 0.5 * z * z
    elif f in (PriorFamily.STUDENT_T, PriorFamily.HALF_T):
        core = _student_t(z, prior.df) - log_scale
    else:
        core = -math.log(math.pi) - log_scale - anp.log1p(z * z)
    if f in (PriorFamily.HALF_NORMAL, PriorFamily.HALF_T, PriorFamily.HALF_CAUCHY):
        core = core + math.log(2.0)
    return anp.sum(core)


def logpdf_normal(x, mu, sigma):
    z = (x - mu) / sigma
    return -0.5 * LOG_2PI - anp.log(sigma) - 0.5 * z * z


def logpdf_dirichlet(x, alpha):
    alpha = np.asarray(alpha, dtype=float)
    return gammaln(alpha.sum()) - np.sum(gammaln(alpha)) + anp.sum((alpha - 1.0) * anp.log(x))


def logpdf_gamma(x, shape, scale):
    return -gammaln(shape) - shape * math.log(scale) + (shape - 1.0) * anp.log(x) - x / scale


def log_lkj_normalizer(order: int, eta: float) -> float:
    """Log of the LKJ normalizing constant for a D x D correlation matrix."""
    D = order
    total = 0.0
    for k in range(1, D):
        a = eta + 0.5 * (D - k - 1)
        total += (2.0 * eta - 2.0 + D - k) * (D - k) * math.log(2.0) + (D - k) * betaln(a, a)
    return total


def logpdf_lkj_cholesky_factor(L, eta: float):
    """LKJ(eta) density of Omega = L L' evaluated through its Cholesky factor."""
    D = L.shape[0]
    log_det = 2.0 * anp.sum(anp.log(anp.diag(L)))
    return (eta - 1.0) * log_det - log_lkj_normalizer(D, eta)


def log_prior_scalar(prior: ScalarPrior, value) -> float:
    value = np.asarray(value, dtype=float)
    if prior.family is PriorFamily.DIRICHLET:
        if value.shape != (len(prior.concentration),) or np.any(value <= 0) or abs(value.sum() - 1.0) > 1e-8:
            raise OutOfSupport(value.tolist())
    elif prior.positive_support and np.any(value < 0):
        raise OutOfSupport(float(value[value < 0].flat[0]), 0.0, math.inf)
    elif not np.all(np.isfinite(value)):
        raise OutOfSupport(value.tolist())
    return float(logpdf(prior, value))


def log_prior_random_walk(theta, tau) -> float:
    """theta_1 ~ N(0, 1); theta_m ~ N(theta_{m-1}, tau)."""
    lp = logpdf_normal(theta[0], 0.0, 1.0)
    if len(theta) > 1:
        lp = lp + anp.sum(logpdf_normal(theta[1:], theta[:-1], tau))
    return lp


def _check_simplex(simplex: np.ndarray) -> None:
    if np.any(simplex < 0) or abs(simplex.sum() - 1.0) > 1e-8:
        raise InvalidSimplex(f"not a simplex: {simplex}")


def _check_corr_cholesky(L: np.ndarray) -> None:
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise InvalidCholesky("Cholesky factor must be square")
    if np.any(np.triu(L, 1) != 0) or np.any(np.diag(L) <= 0):
        raise InvalidCholesky("Cholesky factor must be lower triangular with a positive diagonal")
    if not np.allclose(np.sum(L * L, axis=1), 1.0, atol=1e-8):
        raise InvalidCholesky("rows of a correlation Cholesky factor must have unit length")


def log_prior_covariance(corr_chol, simplex, scale, spec: CovariancePriorSpec, order: int) -> float:
    """
    LKJ on the correlation matrix, symmetric Dirichlet on the variance simplex and
    Gamma on the scale, with sigma_d^2 = pi_d * D * tau^2.
    """
    L = np.asarray(corr_chol, dtype=float).reshape(order, order)
    pi = np.atleast_1d(np.asarray(simplex, dtype=float))
    _check_corr_cholesky(L)
    _check_simplex(pi)
    if pi.size != order:
        raise InvalidSimplex(f"simplex has {pi.size} components, covariance order is {order}")
    if not scale > 0:
        raise OutOfSupport(scale, 0.0, math.inf)
    lp = logpdf_lkj_cholesky_factor(L, spec.regularization)
    if order > 1:
        lp += logpdf_dirichlet(pi, np.full(order, spec.concentration))
    lp += logpdf_gamma(scale, spec.shape, spec.scale)
    return float(lp)


def covariance_from_decomposition(corr_chol, simplex, scale) -> np.ndarray:
    L = np.asarray(corr_chol, dtype=float)
    pi = np.atleast_1d(np.asarray(simplex, dtype=float))
    sigma = np.sqrt(pi * pi.size) * scale
    omega = L @ L.T
    return sigma[:, None] * omega * sigma[None, :]


def decompose_covariance(cov) -> tuple[np.ndarray, np.ndarray, float]:
    """Inverse of :func:`covariance_from_decomposition`: (Cholesky of Omega, pi, tau)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    D = cov.shape[0]
    var = np.diag(cov)
    tau = math.sqrt(var.sum() / D)
    pi = var / var.sum()
    sd = np.sqrt(var)
    omega = cov / np.outer(sd, sd)
    return np.linalg.cholesky(omega), pi, tau


# --- defaults ----------------------------------------------------------------

class PriorAssignment(BaseModel):
    """Prior per parameter block. The intercept prior applies on the shifted scale."""

    model_config = ConfigDict(frozen=True)

    intercept: ScalarPrior = ScalarPrior(family=PriorFamily.NORMAL, scale=20.0)
    intercept_shift: float = 0.0
    beta: ScalarPrior = ScalarPrior(family=PriorFamily.NORMAL, scale=2.5)
    beta_overrides: dict[str, ScalarPrior] = Field(default_factory=dict)
    aux: ScalarPrior | None = None
    smooth: SmoothPrior = SmoothPrior()
    covariance: CovariancePriorSpec = CovariancePriorSpec()

    def beta_prior(self, name: str) -> ScalarPrior:
        return self.beta_overrides.get(name, self.beta)


class PriorConfig(BaseModel):
    """User overrides from the JSON model config; unset fields keep their defaults."""

    model_config = ConfigDict(extra="forbid")

    intercept: ScalarPrior | None = None
    beta: ScalarPrior | None = None
    beta_overrides: dict[str, ScalarPrior] = Field(default_factory=dict)
    aux: ScalarPrior | None = None
    smooth: SmoothPrior | None = None
    covariance: CovariancePriorSpec | None = None


def crude_log_rate(data: "Dataset") -> float:
    """log(E / T): E uncensored events, T total follow-up time."""
    events = int(np.count_nonzero(data.status == 1)) if data.n else 0
    followup = data.total_followup if data.n else 0.0
    if events == 0 or followup <= 0:
        logger.warning("[priors] No events observed; intercept centering shift set to 0")
        return 0.0
    return math.log(events / followup)


def default_aux_prior(baseline: Any, spline) -> ScalarPrior | None:
    from .hazards import AuxConstraint

    n = baseline.n_aux(spline)
    if n == 0:
        return None
    if baseline.constraint is AuxConstraint.SIMPLEX:
        return ScalarPrior(family=PriorFamily.DIRICHLET, concentration=tuple([1.0] * n))
    if baseline.constraint is AuxConstraint.POSITIVE:
        return ScalarPrior(family=PriorFamily.HALF_NORMAL, scale=2.0)
    return ScalarPrior(family=PriorFamily.NORMAL, scale=20.0)


def default_priors(spec: Any, data: "Dataset", config: PriorConfig | None = None) -> PriorAssignment:
    """
    Default prior per block, with user overrides applied on top. The intercept
    shift is log(E/T) on the hazard scale and -log(E/T) for AFT baselines.
    """
    shift = crude_log_rate(data)
    if spec.is_aft:
        shift = -shift
    assignment = PriorAssignment(intercept_shift=shift, aux=default_aux_prior(spec.baseline_impl, spec.baseline_spline))
    if config is not None:
        update = {k: v for k, v in config.model_dump(exclude_unset=True).items() if v not in (None, {})}
        assignment = PriorAssignment.model_validate({**assignment.model_dump(), **update})
    logger.debug(f"[priors] intercept shift {shift:.4f}; aux prior {assignment.aux.describe() if assignment.aux else 'none'}")
    return assignment


def prior_summary(assignment: PriorAssignment) -> dict[str, Any]:
    out: dict[str, Any] = {
        "intercept": {
            "prior": assignment.intercept.describe(),
            "centering_shift": assignment.intercept_shift,
        },
        "coefficients": assignment.beta.describe(),
        "smooth_tau": assignment.smooth.tau.describe(),
        "covariance": assignment.covariance.model_dump(),
    }
    if assignment.beta_overrides:
        out["coefficient_overrides"] = {k: v.describe() for k, v in assignment.beta_overrides.items()}
    if assignment.aux is not None:
        out["auxiliary"] = assignment.aux.describe()
    return out

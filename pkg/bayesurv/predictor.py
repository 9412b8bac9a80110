"""
Linear predictor: intercept, time-fixed coefficients, time-varying effects and
cluster-specific random effects.

eta_ij(t) = beta_0 + sum_p beta_p(t) x_p + sum_factors b_j' z
beta_p(t) = theta_p0 + sum_l theta_pl B_l(t)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import autograd.numpy as anp
import numpy as np

from .errors import DimensionMismatch
from .splines import BasisKind, SplineConfig, basis_matrix


class TveForm(str, Enum):
    BSPLINE_SMOOTH = "bspline"
    PIECEWISE_CONSTANT = "piecewise"


@dataclass(frozen=True)
class TveSpec:
    """
    Time-varying effect on one covariate. The first B-spline column is dropped
    since theta_p0 already carries the level of beta_p(t).
    """

    covariate_index: int
    covariate: str
    spline: SplineConfig

    def __post_init__(self) -> None:
        if self.spline.basis_kind is not BasisKind.BSPLINE:
            object.__setattr__(self, "spline", self.spline.with_kind(BasisKind.BSPLINE))

    @property
    def form(self) -> TveForm:
        return TveForm.PIECEWISE_CONSTANT if self.spline.degree == 0 else TveForm.BSPLINE_SMOOTH

    @property
    def n_coef(self) -> int:
        return self.spline.n_basis - 1

    def coef_names(self) -> list[str]:
        return [f"tve({self.covariate}):{j + 1}" for j in range(self.n_coef)]

    def basis(self, t, *, outside: str = "error") -> np.ndarray:
        return basis_matrix(t, self.spline, outside=outside)[..., 1:]


@dataclass(frozen=True)
class RandomEffectSpec:
    """Random-effect structure for one clustering factor: ``(1 + slopes | factor)``."""

    factor: str
    intercept: bool = True
    slopes: tuple[str, ...] = ()
    slope_indices: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return int(self.intercept) + len(self.slopes)

    @property
    def terms(self) -> list[str]:
        return (["(Intercept)"] if self.intercept else []) + list(self.slopes)

    def design(self, X: np.ndarray) -> np.ndarray:
        """Z for every row: shape (n, dim)."""
        X = np.asarray(X, dtype=float)
        cols = [np.ones(X.shape[0])] if self.intercept else []
        cols += [X[:, j] for j in self.slope_indices]
        return np.column_stack(cols) if cols else np.zeros((X.shape[0], 0))


@dataclass(frozen=True)
class CoefficientBlock:
    intercept: float
    beta_fixed: np.ndarray
    tve: tuple[tuple[TveSpec, np.ndarray], ...] = ()
    random_effects: Mapping[str, np.ndarray] = field(default_factory=dict)
    re_specs: tuple[RandomEffectSpec, ...] = ()


def fixed_part(intercept, beta, X):
    """beta_0 + X beta for every row."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] == 0:
        return intercept + anp.zeros(X.shape[0])
    return intercept + anp.dot(X, beta)


def tve_part(thetas: Sequence, specs: Sequence[TveSpec], X: np.ndarray, bases: Sequence[np.ndarray]):
    """
    Sum over time-varying terms of x_p * (B_p(t) theta_p). Each basis has shape
    grid + (L_p - 1) with the grid's first axis indexing rows.
    """
    out = 0.0
    for theta, spec, basis in zip(thetas, specs, bases):
        x = X[:, spec.covariate_index].reshape((-1,) + (1,) * (basis.ndim - 2))
        out = out + x * anp.dot(basis, theta)
    return out


def random_part(
    effects: Mapping[str, object],
    designs: Mapping[str, np.ndarray],
    index: Mapping[str, np.ndarray],
    n: int,
):
    """sum over factors of z_i' b_{j[i]}; factors absent from ``effects`` contribute nothing."""
    out = anp.zeros(n)
    for factor, b in effects.items():
        Z = designs[factor]
        rows = b[index[factor]]
        out = out + anp.sum(Z * rows, axis=1)
    return out


def time_varying_coefficient(coefs: CoefficientBlock, spec: TveSpec, t) -> np.ndarray:
    """beta_p(t); exp of it is the time-varying hazard ratio."""
    theta = dict((s.covariate_index, th) for s, th in coefs.tve)[spec.covariate_index]
    theta0 = coefs.beta_fixed[spec.covariate_index]
    return theta0 + spec.basis(t) @ np.asarray(theta, dtype=float)


def eta_at(
    coefs: CoefficientBlock,
    x: Sequence[float],
    z: Mapping[str, Sequence[float]] | None = None,
    cluster_ids: Mapping[str, int] | None = None,
    t: float | None = None,
) -> float:
    """Linear predictor for a single covariate row at time ``t``."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(coefs.beta_fixed, dtype=float)
    if x.shape != beta.shape:
        raise DimensionMismatch(f"covariate vector has length {x.size}, coefficients {beta.size}")
    eta = float(coefs.intercept + x @ beta)
    for spec, theta in coefs.tve:
        theta = np.asarray(theta, dtype=float)
        if theta.size != spec.n_coef:
            raise DimensionMismatch(f"tve({spec.covariate}) expects {spec.n_coef} coefficients, got {theta.size}")
        if t is None:
            raise DimensionMismatch("time-varying effects need an evaluation time")
        eta += float(x[spec.covariate_index] * (spec.basis(t) @ theta))
    z = z or {}
    cluster_ids = cluster_ids or {}
    for factor, b in coefs.random_effects.items():
        if factor not in z or factor not in cluster_ids:
            continue
        zf = np.asarray(z[factor], dtype=float)
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            b = b[:, None]
        if zf.size != b.shape[1]:
            raise DimensionMismatch(f"random-effect design for '{factor}' has length {zf.size}, expected {b.shape[1]}")
        eta += float(zf @ b[cluster_ids[factor]])
    return eta

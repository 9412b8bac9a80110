"""
M-spline, I-spline and B-spline bases on a clamped knot vector.

Each boundary knot is replicated ``degree + 1`` times. Evaluation is
right-continuous at internal knots and closed at the upper boundary, so a
degree-0 basis is a set of interval indicators covering the whole support.
"""
from __future__ import annotations

from enum import Enum
from functools import lru_cache
from typing import Literal, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.interpolate import BSpline

from .errors import EmptyUncensoredSet, OutOfSupport

SUPPORT_TOLERANCE = 1e-12

Outside = Literal["error", "zero"]


class BasisKind(str, Enum):
    MSPLINE = "mspline"
    ISPLINE = "ispline"
    BSPLINE = "bspline"


class KnotVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    lower: float
    internal: tuple[float, ...] = ()
    upper: float

    @model_validator(mode="after")
    def _ordered(self) -> "KnotVector":
        if not self.lower < self.upper:
            raise ValueError(f"lower boundary {self.lower} must be below upper boundary {self.upper}")
        if self.internal:
            if not (self.lower < self.internal[0] and self.internal[-1] < self.upper):
                raise ValueError("internal knots must lie strictly inside the boundary knots")
            if any(b <= a for a, b in zip(self.internal, self.internal[1:])):
                raise ValueError("internal knots must be strictly ascending")
        return self


class SplineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    degree: int = Field(ge=0)
    knots: KnotVector
    basis_kind: BasisKind = BasisKind.BSPLINE

    @property
    def n_basis(self) -> int:
        return len(self.knots.internal) + self.degree + 1

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Knots inside the support where the basis loses smoothness."""
        return (self.knots.lower, *self.knots.internal)

    @property
    def padded_knots(self) -> np.ndarray:
        k = self.knots
        pad = self.degree + 1
        return np.array([k.lower] * pad + list(k.internal) + [k.upper] * pad, dtype=float)

    def with_kind(self, kind: BasisKind) -> "SplineConfig":
        return self.model_copy(update={"basis_kind": kind})


def default_knots(
    uncensored_times: Sequence[float] | np.ndarray,
    n_internal: int,
    entry_times: Sequence[float] | np.ndarray,
    all_times: Sequence[float] | np.ndarray,
) -> KnotVector:
    """
    Boundary knots at the earliest entry (0 without delayed entry) and the
    latest observed time; internal knots at equally spaced percentiles of the
    uncensored event times.
    """
    entry = np.asarray(entry_times, dtype=float)
    lower = max(0.0, float(entry.min())) if entry.size else 0.0
    upper = float(np.max(np.asarray(all_times, dtype=float)))
    internal: tuple[float, ...] = ()
    if n_internal > 0:
        events = np.asarray(uncensored_times, dtype=float)
        if events.size == 0:
            raise EmptyUncensoredSet()
        probs = np.linspace(0.0, 100.0, n_internal + 2)[1:-1]
        quantiles = np.unique(np.percentile(events, probs))
        quantiles = quantiles[(quantiles > lower) & (quantiles < upper)]
        if quantiles.size < n_internal:
            logger.warning(f"[splines] {n_internal - quantiles.size} of {n_internal} internal knots coincide with other knots and were dropped")
        internal = tuple(float(q) for q in quantiles)
    return KnotVector(lower=lower, internal=internal, upper=upper)


@lru_cache(maxsize=256)
def _bases(cfg: SplineConfig) -> tuple[BSpline, BSpline, BSpline]:
    t = cfg.padded_knots
    L = cfg.n_basis
    d = cfg.degree
    bspl = BSpline(t, np.eye(L), d, extrapolate=False)
    scale = (d + 1) / (t[d + 1 : d + 1 + L] - t[:L])
    mspl = BSpline(t, np.diag(scale), d, extrapolate=False)
    ispl = mspl.antiderivative()
    return bspl, mspl, ispl


def _prepare(t: float | np.ndarray, cfg: SplineConfig, outside: Outside) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=float)
    lo, hi = cfg.knots.lower, cfg.knots.upper
    off = (t < lo - SUPPORT_TOLERANCE) | (t > hi + SUPPORT_TOLERANCE)
    if outside == "error" and np.any(off):
        bad = t[off].flat[0]
        raise OutOfSupport(float(bad), lo, hi)
    return np.clip(t, lo, hi), off


def basis_matrix(t: float | np.ndarray, cfg: SplineConfig, *, outside: Outside = "error") -> np.ndarray:
    """
    Evaluate the basis named by ``cfg.basis_kind``; output shape is ``t.shape + (L,)``.

    With ``outside="zero"`` points outside the support give zero rows instead of
    raising, which is how hazards and time-varying effects are switched off
    below the lower boundary knot.
    """
    tc, off = _prepare(t, cfg, outside)
    bspl, mspl, ispl = _bases(cfg)
    if cfg.basis_kind is BasisKind.BSPLINE:
        out = bspl(tc)
    elif cfg.basis_kind is BasisKind.MSPLINE:
        out = mspl(tc)
    else:
        out = ispl(tc) - ispl(cfg.knots.lower)
        out = np.clip(out, 0.0, 1.0)
    out = np.nan_to_num(out, nan=0.0)
    if np.any(off):
        out = np.where(off[..., None], 0.0, out)
    return out


def bspline_eval(t: float | np.ndarray, cfg: SplineConfig) -> np.ndarray:
    return basis_matrix(t, cfg.with_kind(BasisKind.BSPLINE))


def mspline_eval(t: float | np.ndarray, cfg: SplineConfig) -> np.ndarray:
    """M_l(t) = B_l(t) (degree + 1) / (k_{l+degree+1} - k_l); each integrates to one."""
    return basis_matrix(t, cfg.with_kind(BasisKind.MSPLINE))


def ispline_eval(t: float | np.ndarray, cfg: SplineConfig) -> np.ndarray:
    """Integral of each M-spline from the lower boundary to t."""
    return basis_matrix(t, cfg.with_kind(BasisKind.ISPLINE))

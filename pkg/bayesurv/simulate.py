"""
Simulate survival data by inverting the cumulative hazard.

For each subject a uniform u is drawn and the event time solves H(t) = -log(u).
Time-fixed designs use the closed-form cumulative hazard; designs with a
time-dependent effect integrate the hazard with Gauss-Kronrod quadrature.
Subjects whose event would fall after ``max_time`` are administratively
censored there.
"""
from __future__ import annotations

import math
from enum import Enum
from typing import Callable, Literal

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq

from .data import CensoringStatus, Dataset, SurvivalRecord
from .errors import ConfigError, MissingColumn, RootNotBracketed
from .hazards import HazardKind, get_hazard
from .quadrature import integrate, make_rule

ROOT_TOLERANCE = 1e-10
# spawn keys reserved outside the per-subject range
COVARIATE_STREAM = 2**31
FRAILTY_STREAM = 2**31 + 1


class SimDistribution(str, Enum):
    EXPONENTIAL = "exponential"
    WEIBULL = "weibull"
    GOMPERTZ = "gompertz"

    @property
    def hazard_kind(self) -> HazardKind:
        return {
            SimDistribution.EXPONENTIAL: HazardKind.EXPONENTIAL,
            SimDistribution.WEIBULL: HazardKind.WEIBULL,
            SimDistribution.GOMPERTZ: HazardKind.GOMPERTZ,
        }[self]


class SimBaseline(BaseModel):
    """h0(t) = lambda (exponential), lambda gamma t^(gamma-1) (Weibull), lambda exp(gamma t) (Gompertz)."""

    model_config = ConfigDict(extra="forbid")

    dist: SimDistribution = SimDistribution.WEIBULL
    lambdas: float = Field(gt=0.0)
    gammas: float = Field(default=1.0, gt=0.0)

    @property
    def aux(self) -> np.ndarray:
        return np.array([self.gammas]) if self.dist is not SimDistribution.EXPONENTIAL else np.zeros(0)


class TdeFunction(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["linear", "step"] = "linear"
    threshold: float | None = None

    @model_validator(mode="after")
    def _threshold(self) -> "TdeFunction":
        if self.kind == "step" and (self.threshold is None or self.threshold <= 0):
            raise ValueError("a step time-dependent effect needs a positive threshold")
        return self

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return t
        return (t > self.threshold).astype(float)


class FrailtySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sd: float = Field(ge=0.0)
    factor: str = "site"
    n_clusters: int = Field(default=20, ge=1)
    n_per_cluster: int = Field(default=10, ge=1)


class SimDesign(BaseModel):
    """
    Hazard h_i(t) = h0(t) exp(x_i' beta + sum_p x_ip tde_p f(t) + b_j).
    """

    model_config = ConfigDict(extra="forbid")

    baseline: SimBaseline
    betas: dict[str, float] = Field(default_factory=dict)
    tde: dict[str, float] = Field(default_factory=dict)
    tde_fn: TdeFunction = Field(default_factory=TdeFunction)
    max_time: float = Field(gt=0.0)
    frailty: FrailtySpec | None = None
    n: int | None = Field(default=None, ge=1)
    seed: int = 12345

    @property
    def covariates(self) -> list[str]:
        return list(dict.fromkeys([*self.betas, *self.tde]))


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key,))))


def treatment_table(n: int, covariates: list[str], seed: int) -> pd.DataFrame:
    """Independent Bernoulli(0.5) columns, one per covariate."""
    rng = _stream(seed, COVARIATE_STREAM)
    return pd.DataFrame({c: rng.binomial(1, 0.5, size=n).astype(float) for c in covariates}, index=pd.RangeIndex(n))


def _cumulative_hazard(design: SimDesign, x: np.ndarray, log_offset: float) -> Callable[[float], float]:
    impl = get_hazard(design.baseline.dist.hazard_kind)
    aux = design.baseline.aux
    names = design.covariates
    eta = log_offset + math.log(design.baseline.lambdas)
    eta += sum(design.betas.get(c, 0.0) * x[names.index(c)] for c in design.betas)
    tde_scale = sum(design.tde[c] * x[names.index(c)] for c in design.tde)

    if tde_scale == 0.0:
        return lambda t: math.exp(eta) * float(impl.H0(np.asarray(t, dtype=float), aux))

    fn = design.tde_fn
    if fn.kind == "step":
        c = fn.threshold

        def H_step(t: float) -> float:
            before = float(impl.H0(np.asarray(min(t, c)), aux))
            after = float(impl.H0(np.asarray(t), aux)) - before if t > c else 0.0
            return math.exp(eta) * (before + math.exp(tde_scale) * after)

        return H_step

    rule = make_rule(15)

    def hazard(u: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            h0 = np.exp(impl.log_h0(u, aux))
        return h0 * np.exp(eta + tde_scale * fn(u))

    return lambda t: integrate(rule, hazard, float(t)) if t > 0 else 0.0


def _event_time(H: Callable[[float], float], target: float, max_time: float, subject: int) -> float | None:
    """Root of H(t) = target on [0, max_time]; None when the subject survives past max_time."""
    H_end = H(max_time)
    if not math.isfinite(H_end):
        logger.error(f"[simulate] Cumulative hazard not finite at {max_time} for subject {subject + 1}")
        raise RootNotBracketed(f"cumulative hazard is not finite at t={max_time} for subject {subject + 1}")
    if H_end < target:
        return None
    try:
        return float(brentq(lambda t: H(t) - target, 0.0, max_time, xtol=ROOT_TOLERANCE))
    except ValueError as e:
        raise RootNotBracketed(f"no sign change of H(t) - {target:.4g} on [0, {max_time}] for subject {subject + 1}") from e


def _simulate(
    design: SimDesign,
    table: pd.DataFrame,
    seed: int,
    offsets: np.ndarray,
    clusters: list[str] | None = None,
) -> Dataset:
    names = design.covariates
    missing = [c for c in names if c not in table.columns]
    if missing:
        raise MissingColumn(missing[0], list(table.columns))
    X = table[names].to_numpy(dtype=float) if names else np.zeros((len(table), 0))
    n = X.shape[0]
    streams = np.random.SeedSequence(seed).spawn(n)
    records = []
    for i in range(n):
        rng = np.random.Generator(np.random.Philox(streams[i]))
        u = rng.uniform()
        H = _cumulative_hazard(design, X[i], float(offsets[i]))
        t = _event_time(H, -math.log(u), design.max_time, i)
        labels = {design.frailty.factor: clusters[i]} if clusters is not None and design.frailty else {}
        records.append(
            SurvivalRecord(
                time=design.max_time if t is None else max(t, np.finfo(float).tiny),
                status=CensoringStatus.RIGHT_CENSORED if t is None else CensoringStatus.EVENT,
                covariates=tuple(X[i]),
                cluster_labels=labels,
                group_id=str(i + 1),
            )
        )
    data = Dataset(records, names)
    s = data.summary()
    logger.info(
        f"[simulate] {n:,} subjects, {s.events} events ({s.percent(s.events):.0f}%), "
        f"censored at {design.max_time:g}"
    )
    return data


def simulate(design: SimDesign, covariate_table: pd.DataFrame | None = None, seed: int | None = None) -> Dataset:
    """
    Subject i draws its uniform from the i-th child stream of ``seed``, so a
    dataset does not depend on how many subjects are simulated after it.
    """
    seed = design.seed if seed is None else seed
    if covariate_table is None:
        if design.n is None:
            raise ConfigError("either a covariate table or design.n is required")
        covariate_table = treatment_table(design.n, design.covariates, seed)
    return _simulate(design, covariate_table, seed, np.zeros(len(covariate_table)))


def simulate_frailty(
    design: SimDesign,
    n_per_cluster: int | None = None,
    n_clusters: int | None = None,
    seed: int | None = None,
    covariate_table: pd.DataFrame | None = None,
) -> Dataset:
    """Add a cluster-level N(0, sd^2) term to the log hazard; subjects are laid out cluster by cluster."""
    frailty = design.frailty or FrailtySpec(sd=0.0)
    design = design.model_copy(update={"frailty": frailty})
    seed = design.seed if seed is None else seed
    n_per = n_per_cluster or frailty.n_per_cluster
    J = n_clusters or frailty.n_clusters
    n = n_per * J
    if covariate_table is None:
        covariate_table = treatment_table(n, design.covariates, seed)
    elif len(covariate_table) != n:
        raise ConfigError(f"covariate table has {len(covariate_table)} rows, expected {n}")
    b = _stream(seed, FRAILTY_STREAM).normal(0.0, 1.0, size=J) * frailty.sd
    width = len(str(J))
    labels = [f"{j + 1:0{width}d}" for j in range(J)]
    cluster_of = np.repeat(np.arange(J), n_per)
    logger.debug(f"[simulate] {J} clusters, frailty sd {frailty.sd:g} (empirical {np.std(b, ddof=1) if J > 1 else 0.0:.3f})")
    return _simulate(design, covariate_table, seed, b[cluster_of], [labels[j] for j in cluster_of])


def frailty_effects(design: SimDesign, n_clusters: int, seed: int | None = None) -> np.ndarray:
    """The cluster effects ``simulate_frailty`` uses for this seed."""
    seed = design.seed if seed is None else seed
    sd = design.frailty.sd if design.frailty else 0.0
    return _stream(seed, FRAILTY_STREAM).normal(0.0, 1.0, size=n_clusters) * sd

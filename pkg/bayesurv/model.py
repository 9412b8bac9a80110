"""
Model specification, unconstrained parameter layout and the censored-data log
posterior with its gradient.

The likelihood is evaluated on precomputed time grids: one per set of
(record, time) pairs that needs a cumulative hazard (exit time, upper interval
time, entry time) plus one for the log hazard at event times. Each grid is
either closed form or carries Gauss-Kronrod nodes, weights and the spline
bases at those nodes, so nothing inside the differentiated path touches scipy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Literal, Mapping, Sequence

import autograd.numpy as anp
import numpy as np
from autograd import value_and_grad
from autograd.scipy.special import expit
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .aft import AftKind, get_aft
from .data import CensoringStatus, Dataset, SurvivalRecord
from .errors import (
    AmbiguousSplineOptions,
    ConfigError,
    DimensionMismatch,
    NonFiniteGradient,
    NonFiniteLogLik,
    OutOfSupport,
)
from .hazards import AuxConstraint, HazardKind, get_hazard
from .predictor import CoefficientBlock, RandomEffectSpec, TveSpec, fixed_part, random_part, tve_part
from .priors import (
    PriorAssignment,
    PriorConfig,
    default_priors,
    log_prior_random_walk,
    logpdf,
    logpdf_dirichlet,
    logpdf_gamma,
    logpdf_lkj_cholesky_factor,
    logpdf_normal,
)
from .quadrature import QuadratureRule, make_rule
from .splines import SUPPORT_TOLERANCE, BasisKind, KnotVector, SplineConfig, basis_matrix, default_knots

BASELINE_CHOICES = tuple(k.value for k in HazardKind) + tuple(k.value for k in AftKind)


# --- specification -------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    baseline: str
    covariate_names: tuple[str, ...] = ()
    baseline_spline: SplineConfig | None = None
    tve_specs: tuple[TveSpec, ...] = ()
    re_specs: tuple[RandomEffectSpec, ...] = ()
    priors: PriorAssignment = field(default_factory=PriorAssignment)
    qnodes: int = 15
    prior_only: bool = False
    quadrature: Literal["auto", "always"] = "auto"
    covariate_means: tuple[float, ...] = ()
    factor_levels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    t_max: float = math.inf
    formula: str = ""

    def __post_init__(self) -> None:
        impl = self.baseline_impl
        make_rule(self.qnodes)
        P = len(self.covariate_names)
        if not self.covariate_means:
            object.__setattr__(self, "covariate_means", tuple([0.0] * P))
        if len(self.covariate_means) != P:
            raise DimensionMismatch(f"{len(self.covariate_means)} covariate means for {P} covariates")
        for spec in self.tve_specs:
            if not 0 <= spec.covariate_index < P or self.covariate_names[spec.covariate_index] != spec.covariate:
                raise DimensionMismatch(f"tve({spec.covariate}) does not reference a model covariate")
        if (impl.basis_kind is not None) != (self.baseline_spline is not None):
            raise ConfigError(f"{impl.label}: spline configuration {'required' if impl.basis_kind else 'not allowed'}")
        for re in self.re_specs:
            if re.factor not in self.factor_levels:
                raise DimensionMismatch(f"no levels recorded for clustering factor '{re.factor}'")

    @property
    def is_aft(self) -> bool:
        return self.baseline in {k.value for k in AftKind}

    @property
    def baseline_impl(self):
        return get_aft(self.baseline) if self.is_aft else get_hazard(self.baseline)

    @property
    def rule(self) -> QuadratureRule:
        return make_rule(self.qnodes)

    @property
    def uses_quadrature(self) -> bool:
        return bool(self.tve_specs) or not self.baseline_impl.closed_form or self.quadrature == "always"

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Positive spline knots; quadrature panels are split there."""
        knots = [k for t in self.tve_specs for k in t.spline.breakpoints]
        if self.baseline_spline is not None:
            knots += self.baseline_spline.breakpoints
        return tuple(sorted({k for k in knots if k > 0.0}))


class SplineOptions(BaseModel):
    """Degree plus either df or explicit internal knots."""

    model_config = ConfigDict(extra="forbid")

    degree: int | None = Field(default=None, ge=0)
    df: int | None = Field(default=None, ge=1)
    knots: list[float] | None = None

    @model_validator(mode="after")
    def _one_of(self) -> "SplineOptions":
        if self.df is not None and self.knots is not None:
            raise AmbiguousSplineOptions()
        return self

    @classmethod
    def parse(cls, **values: Any) -> "SplineOptions":
        """Validate user-supplied options, reporting bad values as a configuration error."""
        try:
            return cls(**values)
        except ValidationError as e:
            err = e.errors()[0]
            raise ConfigError(f"spline option {'.'.join(str(x) for x in err['loc'])}: {err['msg']}") from e


def _spline_from_options(
    data: Dataset,
    opts: SplineOptions,
    *,
    default_degree: int,
    default_df: int,
    intercept_column: bool,
    kind: BasisKind,
) -> SplineConfig:
    degree = default_degree if opts.degree is None else opts.degree
    observed = np.concatenate([data.time, data.upper[~np.isnan(data.upper)]])
    if opts.knots is not None:
        n_internal = 0
    else:
        df = default_df if opts.df is None else opts.df
        n_internal = df - degree - (1 if intercept_column else 0)
        if n_internal < 0:
            raise ConfigError(f"df={df} is too small for a degree-{degree} spline")
    knots = default_knots(data.uncensored_times, n_internal, data.entry, observed)
    if opts.knots is not None:
        try:
            knots = KnotVector(lower=knots.lower, internal=tuple(sorted(opts.knots)), upper=knots.upper)
        except ValidationError as e:
            raise ConfigError(f"invalid knots {opts.knots}: {e.errors()[0]['msg']}") from e
    try:
        return SplineConfig(degree=degree, knots=knots, basis_kind=kind)
    except ValidationError as e:
        raise ConfigError(f"invalid spline: {e.errors()[0]['msg']}") from e


def build_model_spec(
    data: Dataset,
    baseline: str,
    *,
    basehaz: SplineOptions | None = None,
    tve: Mapping[str, SplineOptions] | None = None,
    random_effects: Sequence[RandomEffectSpec] = (),
    prior_config: PriorConfig | None = None,
    qnodes: int = 15,
    prior_only: bool = False,
    quadrature: Literal["auto", "always"] = "auto",
    formula: str = "",
) -> ModelSpec:
    """
    Resolve knots and priors against ``data``.

    M-spline baselines keep every basis column, so df = internal knots + degree + 1.
    B-spline baselines and time-varying effects drop one column for the
    intercept, so df = internal knots + degree.
    """
    if baseline not in BASELINE_CHOICES:
        raise ConfigError(f"unknown baseline '{baseline}' (choose from {', '.join(BASELINE_CHOICES)})")
    basehaz = basehaz or SplineOptions()
    names = list(data.covariate_names)

    spline = None
    if baseline == HazardKind.MSPLINE.value:
        spline = _spline_from_options(data, basehaz, default_degree=3, default_df=6, intercept_column=True, kind=BasisKind.MSPLINE)
    elif baseline == HazardKind.BSPLINE.value:
        spline = _spline_from_options(data, basehaz, default_degree=3, default_df=5, intercept_column=False, kind=BasisKind.BSPLINE)

    tve_specs = []
    for covariate, opts in (tve or {}).items():
        if covariate not in names:
            raise ConfigError(f"tve() references unknown covariate '{covariate}'")
        degree = 3 if opts.degree is None else opts.degree
        cfg = _spline_from_options(
            data, opts, default_degree=degree, default_df=3 if degree > 0 else 1,
            intercept_column=False, kind=BasisKind.BSPLINE,
        )
        tve_specs.append(TveSpec(covariate_index=names.index(covariate), covariate=covariate, spline=cfg))

    levels = {}
    for re in random_effects:
        if re.factor not in data.factor_levels:
            raise ConfigError(f"clustering factor '{re.factor}' is not a data column")
        levels[re.factor] = tuple(data.factor_levels[re.factor])

    means = tuple(float(m) for m in data.X.mean(axis=0)) if data.n else tuple([0.0] * len(names))
    spec = ModelSpec(
        baseline=baseline,
        covariate_names=tuple(names),
        baseline_spline=spline,
        tve_specs=tuple(tve_specs),
        re_specs=tuple(random_effects),
        qnodes=qnodes,
        prior_only=prior_only,
        quadrature=quadrature,
        covariate_means=means,
        factor_levels=levels,
        t_max=data.t_max if data.n else math.inf,
        formula=formula,
    )
    spec = replace(spec, priors=default_priors(spec, data, prior_config))
    logger.info(
        f"[design] {spec.baseline_impl.label} baseline, {len(names)} covariates, "
        f"{len(tve_specs)} time-varying, {len(levels)} clustering factors"
        + (" (quadrature)" if spec.uses_quadrature else "")
    )
    return spec


# --- parameter transforms --------------------------------------------------------

def stick_breaking(y, K: int):
    """Unconstrained (K-1)-vector to a K-simplex, plus the log Jacobian."""
    parts = []
    remaining = 1.0
    log_jac = 0.0
    for k in range(K - 1):
        z = expit(y[k] - math.log(K - k - 1))
        x = remaining * z
        log_jac = log_jac + anp.log(z) + anp.log1p(-z) + anp.log(remaining)
        parts.append(x)
        remaining = remaining - x
    parts.append(remaining)
    return anp.stack(parts), log_jac


def stick_breaking_inverse(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    K = x.size
    y = np.empty(K - 1)
    remaining = 1.0
    for k in range(K - 1):
        z = x[k] / remaining
        y[k] = math.log(z) - math.log1p(-z) + math.log(K - k - 1)
        remaining -= x[k]
    return y


def corr_cholesky(y, D: int):
    """Canonical partial correlations tanh(y) to a correlation Cholesky factor, plus log Jacobian."""
    z = anp.tanh(y)
    log_jac = anp.sum(anp.log1p(-z * z))
    rows = [anp.concatenate([anp.ones(1), anp.zeros(D - 1)])]
    k = 0
    for i in range(1, D):
        entries = []
        sum_sq = 0.0
        for j in range(i):
            if j == 0:
                value = z[k]
            else:
                log_jac = log_jac + 0.5 * anp.log1p(-sum_sq)
                value = z[k] * anp.sqrt(1.0 - sum_sq)
            k += 1
            entries.append(value)
            sum_sq = sum_sq + value * value
        entries.append(anp.sqrt(1.0 - sum_sq))
        rows.append(anp.concatenate([anp.stack(entries), anp.zeros(D - i - 1)]))
    return anp.stack(rows), log_jac


def corr_cholesky_inverse(L) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    D = L.shape[0]
    y = []
    for i in range(1, D):
        sum_sq = 0.0
        for j in range(i):
            z = L[i, j] if j == 0 else L[i, j] / math.sqrt(1.0 - sum_sq)
            y.append(math.atanh(z))
            sum_sq += L[i, j] ** 2
    return np.array(y)


@dataclass(frozen=True)
class Block:
    name: str
    transform: Literal["real", "positive", "simplex", "corr_cholesky"]
    dim: int
    start: int = 0

    @property
    def size(self) -> int:
        if self.transform == "simplex":
            return self.dim - 1
        if self.transform == "corr_cholesky":
            return self.dim * (self.dim - 1) // 2
        return self.dim

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass
class NaturalParams:
    """Parameters on the reported scale; entries may be autograd boxes."""

    intercept: Any
    beta: Any
    thetas: list = field(default_factory=list)
    aux: Any = None
    random_effects: dict[str, Any] = field(default_factory=dict)
    covariances: dict[str, Any] = field(default_factory=dict)
    smooth_sd: list = field(default_factory=list)

    @classmethod
    def from_block(cls, coefs: CoefficientBlock, aux: Sequence[float] = ()) -> "NaturalParams":
        effects = {}
        for f, b in coefs.random_effects.items():
            b = np.asarray(b, dtype=float)
            effects[f] = b[:, None] if b.ndim == 1 else b
        return cls(
            intercept=float(coefs.intercept),
            beta=np.asarray(coefs.beta_fixed, dtype=float),
            thetas=[np.asarray(th, dtype=float) for _, th in coefs.tve],
            aux=np.asarray(aux, dtype=float),
            random_effects=effects,
        )


class ParameterLayout:
    """
    Bijection between the flat unconstrained vector the sampler moves in and
    the named constrained parameters written to draws.csv.
    """

    def __init__(self, spec: ModelSpec) -> None:
        self.spec = spec
        impl = spec.baseline_impl
        blocks: list[Block] = [Block("alpha", "real", 1)]
        P = len(spec.covariate_names)
        if P:
            blocks.append(Block("beta", "real", P))
        for k, tve in enumerate(spec.tve_specs):
            blocks.append(Block(f"theta_{k}", "real", tve.n_coef))
            blocks.append(Block(f"smooth_sd_{k}", "positive", 1))
        n_aux = impl.n_aux(spec.baseline_spline)
        if n_aux:
            kind = {
                AuxConstraint.POSITIVE: "positive",
                AuxConstraint.SIMPLEX: "simplex",
            }.get(impl.constraint, "real")
            blocks.append(Block("aux", kind, n_aux))
        for re in spec.re_specs:
            J = len(spec.factor_levels[re.factor])
            blocks.append(Block(f"z_{re.factor}", "real", J * re.dim))
            blocks.append(Block(f"tau_{re.factor}", "positive", 1))
            if re.dim > 1:
                blocks.append(Block(f"pi_{re.factor}", "simplex", re.dim))
                blocks.append(Block(f"corr_{re.factor}", "corr_cholesky", re.dim))
        start = 0
        placed = []
        for b in blocks:
            placed.append(replace(b, start=start))
            start += placed[-1].size
        self.blocks: tuple[Block, ...] = tuple(placed)
        self.size = start
        self._by_name = {b.name: b for b in self.blocks}
        self.names = self._names()

    def block(self, name: str) -> Block:
        return self._by_name[name]

    def _names(self) -> list[str]:
        spec = self.spec
        names = ["(Intercept)", *spec.covariate_names]
        for tve in spec.tve_specs:
            names += tve.coef_names()
        names += spec.baseline_impl.aux_names(spec.baseline_spline)
        names += [f"smooth_sd[tve({tve.covariate})]" for tve in spec.tve_specs]
        for re in spec.re_specs:
            for level in spec.factor_levels[re.factor]:
                names += [f"b[{term} {re.factor}:{level}]" for term in re.terms]
        for re in spec.re_specs:
            terms = re.terms
            for i in range(re.dim):
                for j in range(i + 1):
                    names.append(f"Sigma[{re.factor}:{terms[i]},{terms[j]}]")
        return names

    # constrained <-> unconstrained

    def constrain(self, u) -> tuple[dict[str, Any], Any]:
        out: dict[str, Any] = {}
        log_jac = 0.0
        for b in self.blocks:
            seg = u[b.start : b.stop]
            if b.transform == "real":
                out[b.name] = seg
            elif b.transform == "positive":
                out[b.name] = anp.exp(seg)
                log_jac = log_jac + anp.sum(seg)
            elif b.transform == "simplex":
                out[b.name], lj = stick_breaking(seg, b.dim)
                log_jac = log_jac + lj
            else:
                out[b.name], lj = corr_cholesky(seg, b.dim)
                log_jac = log_jac + lj
        return out, log_jac

    def _re_scales(self, internal: Mapping[str, Any], re: RandomEffectSpec):
        tau = internal[f"tau_{re.factor}"]
        if re.dim == 1:
            return tau, anp.ones((1, 1))
        pi = internal[f"pi_{re.factor}"]
        sigma = anp.sqrt(pi * re.dim) * tau
        return sigma, internal[f"corr_{re.factor}"]

    def natural(self, internal: Mapping[str, Any]) -> NaturalParams:
        spec = self.spec
        P = len(spec.covariate_names)
        beta = internal["beta"] if P else anp.zeros(0)
        means = np.asarray(spec.covariate_means, dtype=float)
        intercept = internal["alpha"][0] + spec.priors.intercept_shift
        if P:
            intercept = intercept - anp.dot(means, beta)
        params = NaturalParams(
            intercept=intercept,
            beta=beta,
            thetas=[internal[f"theta_{k}"] for k in range(len(spec.tve_specs))],
            aux=internal.get("aux", anp.zeros(0)),
            smooth_sd=[internal[f"smooth_sd_{k}"][0] for k in range(len(spec.tve_specs))],
        )
        for re in spec.re_specs:
            J = len(spec.factor_levels[re.factor])
            sigma, L = self._re_scales(internal, re)
            z = anp.reshape(internal[f"z_{re.factor}"], (J, re.dim))
            scaled = L * anp.reshape(sigma, (re.dim, 1))
            params.random_effects[re.factor] = anp.dot(z, anp.transpose(scaled))
            params.covariances[re.factor] = anp.dot(scaled, anp.transpose(scaled))
        return params

    def to_row(self, u: np.ndarray) -> np.ndarray:
        """Named constrained values in the order of ``self.names``."""
        internal, _ = self.constrain(np.asarray(u, dtype=float))
        p = self.natural(internal)
        return self.row_from_natural(p)

    def row_from_natural(self, p: NaturalParams) -> np.ndarray:
        parts: list[np.ndarray] = [np.atleast_1d(np.asarray(p.intercept, dtype=float)), np.asarray(p.beta, dtype=float)]
        parts += [np.asarray(th, dtype=float) for th in p.thetas]
        parts.append(np.asarray(p.aux, dtype=float).ravel())
        parts.append(np.asarray(p.smooth_sd, dtype=float).ravel())
        for re in self.spec.re_specs:
            parts.append(np.asarray(p.random_effects[re.factor], dtype=float).ravel())
        for re in self.spec.re_specs:
            cov = np.asarray(p.covariances[re.factor], dtype=float)
            parts.append(cov[np.tril_indices(re.dim)])
        return np.concatenate(parts)

    def from_row(self, row: Sequence[float]) -> NaturalParams:
        row = np.asarray(row, dtype=float)
        if row.size != len(self.names):
            raise DimensionMismatch(f"draw has {row.size} values, layout expects {len(self.names)}")
        spec = self.spec
        pos = 0

        def take(n: int) -> np.ndarray:
            nonlocal pos
            out = row[pos : pos + n]
            pos += n
            return out

        intercept = float(take(1)[0])
        beta = take(len(spec.covariate_names))
        thetas = [take(t.n_coef) for t in spec.tve_specs]
        aux = take(spec.baseline_impl.n_aux(spec.baseline_spline))
        smooth = list(take(len(spec.tve_specs)))
        effects = {}
        for re in spec.re_specs:
            J = len(spec.factor_levels[re.factor])
            effects[re.factor] = take(J * re.dim).reshape(J, re.dim)
        covs = {}
        for re in spec.re_specs:
            cov = np.zeros((re.dim, re.dim))
            cov[np.tril_indices(re.dim)] = take(re.dim * (re.dim + 1) // 2)
            covs[re.factor] = cov + np.tril(cov, -1).T
        return NaturalParams(intercept, beta, thetas, aux, effects, covs, smooth)

    def unconstrain(self, p: NaturalParams) -> np.ndarray:
        """Inverse of ``natural(constrain(u))``."""
        spec = self.spec
        u = np.zeros(self.size)
        beta = np.asarray(p.beta, dtype=float)
        alpha = float(p.intercept) - spec.priors.intercept_shift
        if beta.size:
            alpha += float(np.dot(spec.covariate_means, beta))
            u[self.block("beta").start : self.block("beta").stop] = beta
        u[0] = alpha
        for k, theta in enumerate(p.thetas):
            b = self.block(f"theta_{k}")
            u[b.start : b.stop] = theta
            b = self.block(f"smooth_sd_{k}")
            u[b.start] = math.log(p.smooth_sd[k])
        if "aux" in self._by_name:
            b = self.block("aux")
            aux = np.asarray(p.aux, dtype=float)
            if b.transform == "positive":
                u[b.start : b.stop] = np.log(aux)
            elif b.transform == "simplex":
                u[b.start : b.stop] = stick_breaking_inverse(aux)
            else:
                u[b.start : b.stop] = aux
        for re in spec.re_specs:
            cov = np.asarray(p.covariances[re.factor], dtype=float)
            var = np.diag(cov)
            tau = math.sqrt(var.sum() / re.dim)
            sd = np.sqrt(var)
            u[self.block(f"tau_{re.factor}").start] = math.log(tau)
            L = np.ones((1, 1))
            if re.dim > 1:
                b = self.block(f"pi_{re.factor}")
                u[b.start : b.stop] = stick_breaking_inverse(var / var.sum())
                L = np.linalg.cholesky(cov / np.outer(sd, sd))
                b = self.block(f"corr_{re.factor}")
                u[b.start : b.stop] = corr_cholesky_inverse(L)
            scaled = L * sd[:, None]
            z = np.linalg.solve(scaled, np.asarray(p.random_effects[re.factor], dtype=float).T).T
            b = self.block(f"z_{re.factor}")
            u[b.start : b.stop] = z.ravel()
        return u


@dataclass(frozen=True)
class ParameterVector:
    layout: ParameterLayout
    unconstrained: np.ndarray

    def constrained(self) -> dict[str, float]:
        return dict(zip(self.layout.names, self.layout.to_row(self.unconstrained)))

    def natural(self) -> NaturalParams:
        internal, _ = self.layout.constrain(np.asarray(self.unconstrained, dtype=float))
        return self.layout.natural(internal)


# --- time grids ------------------------------------------------------------------

def _spline_rows(cfg: SplineConfig, t: np.ndarray) -> np.ndarray:
    """Basis at record times: error above the upper knot, zero below the lower knot."""
    above = t > cfg.knots.upper + SUPPORT_TOLERANCE
    if np.any(above):
        raise OutOfSupport(float(t[above].flat[0]), cfg.knots.lower, cfg.knots.upper)
    return basis_matrix(t, cfg, outside="zero")


@dataclass
class TimeGrid:
    """Evaluation points for a set of (row, time) pairs."""

    rows: np.ndarray
    times: np.ndarray
    ibasis: np.ndarray | None = None
    basis: np.ndarray | None = None
    tve: list[np.ndarray] = field(default_factory=list)
    weights: np.ndarray | None = None
    nodes: np.ndarray | None = None
    node_basis: np.ndarray | None = None
    node_tve: list[np.ndarray] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.rows.size

    @classmethod
    def build(
        cls,
        spec: ModelSpec,
        rows: np.ndarray,
        times: np.ndarray,
        *,
        cumulative: bool = True,
        hazard: bool = False,
    ) -> "TimeGrid":
        rows = np.asarray(rows, dtype=int)
        times = np.asarray(times, dtype=float)
        impl = spec.baseline_impl
        grid = cls(rows=rows, times=times)
        if rows.size == 0:
            return grid
        spline = spec.baseline_spline
        if hazard:
            if impl.basis_kind is not None:
                grid.basis = _spline_rows(spline.with_kind(impl.basis_kind), times)
            grid.tve = [_spline_rows(t.spline, times)[..., 1:] for t in spec.tve_specs]
        if cumulative and spec.uses_quadrature:
            rule = spec.rule
            grid.nodes, grid.weights = rule.panels_on(times, spec.breakpoints)
            if impl.basis_kind is not None:
                grid.node_basis = basis_matrix(grid.nodes, spline.with_kind(impl.basis_kind), outside="zero")
            grid.node_tve = [t.basis(grid.nodes, outside="zero") for t in spec.tve_specs]
        elif cumulative and impl.integrated_basis_kind is not None:
            grid.ibasis = _spline_rows(spline.with_kind(impl.integrated_basis_kind), times)
        return grid


def cumulative_on_grid(spec: ModelSpec, p: NaturalParams, eta_fixed, X: np.ndarray, grid: TimeGrid):
    """
    Cumulative hazard at the grid times. For AFT baselines also returns the
    cumulative acceleration A(t); otherwise the second value is None.
    """
    impl = spec.baseline_impl
    Xg = X[grid.rows]
    if grid.weights is None:
        if spec.is_aft:
            A = grid.times * anp.exp(-eta_fixed)
            return impl.H0(A, p.aux), A
        return anp.exp(eta_fixed) * impl.H0(grid.times, p.aux, grid.ibasis), None
    eta_nodes = anp.reshape(eta_fixed, (-1, 1)) + tve_part(p.thetas, spec.tve_specs, Xg, grid.node_tve)
    if spec.is_aft:
        A = anp.sum(grid.weights * anp.exp(-eta_nodes), axis=1)
        return impl.H0(A, p.aux), A
    h = anp.exp(eta_nodes) * impl.h0(grid.nodes, p.aux, grid.node_basis)
    return anp.sum(grid.weights * h, axis=1), None


def log_hazard_on_grid(spec: ModelSpec, p: NaturalParams, eta_fixed, X: np.ndarray, grid: TimeGrid, accel=None):
    """Log hazard at the grid times; AFT baselines need the cumulative acceleration there."""
    impl = spec.baseline_impl
    eta_t = eta_fixed + tve_part(p.thetas, spec.tve_specs, X[grid.rows], grid.tve)
    if spec.is_aft:
        return -eta_t + impl.log_h0(accel, p.aux)
    return eta_t + impl.log_h0(grid.times, p.aux, grid.basis)


def _inverse_order(groups: Sequence[np.ndarray]) -> np.ndarray:
    order = np.concatenate([np.asarray(g, dtype=int) for g in groups])
    return np.argsort(order, kind="stable")


def _scatter_inverse(rows: np.ndarray, n: int) -> np.ndarray:
    complement = np.setdiff1d(np.arange(n), rows)
    return np.argsort(np.concatenate([rows, complement]), kind="stable")


class LikelihoodDesign:
    """Everything the per-record log likelihood needs that does not depend on parameters."""

    def __init__(self, spec: ModelSpec, data: Dataset) -> None:
        self.spec = spec
        self.n = data.n
        self.X = np.asarray(data.X, dtype=float)
        self.status = np.asarray(data.status)
        self.time = np.asarray(data.time)
        self.entry = np.asarray(data.entry)
        self.upper = np.asarray(data.upper)
        self.group_ids = data.group_ids
        n = self.n
        self.right = np.flatnonzero(self.status == CensoringStatus.RIGHT_CENSORED)
        self.event = np.flatnonzero(self.status == CensoringStatus.EVENT)
        self.left = np.flatnonzero(self.status == CensoringStatus.LEFT_CENSORED)
        self.interval = np.flatnonzero(self.status == CensoringStatus.INTERVAL_CENSORED)
        self.delayed = np.flatnonzero(self.entry > 0)
        self.order_inverse = _inverse_order([self.right, self.event, self.left, self.interval])
        self.delayed_inverse = _scatter_inverse(self.delayed, n)

        self.exit_grid = TimeGrid.build(spec, np.arange(n), self.time)
        self.event_grid = TimeGrid.build(spec, self.event, self.time[self.event], cumulative=False, hazard=True)
        self.upper_grid = TimeGrid.build(spec, self.interval, self.upper[self.interval])
        self.entry_grid = TimeGrid.build(spec, self.delayed, self.entry[self.delayed])

        self.Z: dict[str, np.ndarray] = {}
        self.index: dict[str, np.ndarray] = {}
        for re in spec.re_specs:
            levels = list(spec.factor_levels[re.factor])
            lookup = {lvl: j for j, lvl in enumerate(levels)}
            Z = re.design(self.X)
            if re.factor in data.factor_levels:
                labels = [data.factor_levels[re.factor][k] for k in data.cluster_index(re.factor)]
            else:
                labels = [None] * n
            idx = np.array([lookup.get(lbl, -1) for lbl in labels], dtype=int)
            unseen = idx < 0
            if np.any(unseen):
                logger.warning(f"[design] {int(unseen.sum())} rows have levels of '{re.factor}' not seen in fitting; their random effect is set to 0")
                Z = np.where(unseen[:, None], 0.0, Z)
                idx = np.where(unseen, 0, idx)
            self.Z[re.factor] = Z
            self.index[re.factor] = idx

    def eta_fixed(self, p: NaturalParams):
        eta = fixed_part(p.intercept, p.beta, self.X)
        if p.random_effects:
            eta = eta + random_part(p.random_effects, self.Z, self.index, self.n)
        return eta

    def log_lik(self, p: NaturalParams):
        """Per-record log likelihood, length n (autograd friendly)."""
        if self.n == 0:
            return anp.zeros(0)
        spec = self.spec
        eta = self.eta_fixed(p)
        H_T, A_T = cumulative_on_grid(spec, p, eta, self.X, self.exit_grid)
        parts = [-H_T[self.right]]

        ev = self.event
        if ev.size:
            accel = A_T[ev] if A_T is not None else None
            log_h = log_hazard_on_grid(spec, p, eta[ev], self.X, self.event_grid, accel)
            parts.append(log_h - H_T[ev])
        else:
            parts.append(anp.zeros(0))

        lt = self.left
        parts.append(anp.log(-anp.expm1(-H_T[lt])) if lt.size else anp.zeros(0))

        iv = self.interval
        if iv.size:
            H_U, _ = cumulative_on_grid(spec, p, eta[iv], self.X, self.upper_grid)
            parts.append(-H_T[iv] + anp.log(-anp.expm1(-(H_U - H_T[iv]))))
        else:
            parts.append(anp.zeros(0))

        ll = anp.concatenate(parts)[self.order_inverse]
        de = self.delayed
        if de.size:
            H_E, _ = cumulative_on_grid(spec, p, eta[de], self.X, self.entry_grid)
            ll = ll + anp.concatenate([H_E, anp.zeros(self.n - de.size)])[self.delayed_inverse]
        return ll


# --- posterior ---------------------------------------------------------------------

class Posterior:
    """Log posterior on the unconstrained scale, bound to one dataset."""

    def __init__(self, spec: ModelSpec, data: Dataset, *, jacobian: bool = True) -> None:
        self.spec = spec
        self.jacobian = jacobian
        self.layout = ParameterLayout(spec)
        self.design = LikelihoodDesign(spec, data)
        self._value_and_grad = value_and_grad(self._log_density)

    def log_prior(self, internal: Mapping[str, Any], p: NaturalParams):
        spec = self.spec
        priors = spec.priors
        lp = logpdf(priors.intercept, internal["alpha"][0])
        for j, name in enumerate(spec.covariate_names):
            lp = lp + logpdf(priors.beta_prior(name), p.beta[j])
        for k in range(len(spec.tve_specs)):
            lp = lp + log_prior_random_walk(p.thetas[k], p.smooth_sd[k])
            lp = lp + logpdf(priors.smooth.tau, p.smooth_sd[k])
        if priors.aux is not None and "aux" in internal:
            lp = lp + logpdf(priors.aux, internal["aux"])
        cov = priors.covariance
        for re in spec.re_specs:
            lp = lp + anp.sum(logpdf_normal(internal[f"z_{re.factor}"], 0.0, 1.0))
            lp = lp + logpdf_gamma(internal[f"tau_{re.factor}"][0], cov.shape, cov.scale)
            if re.dim > 1:
                L = internal[f"corr_{re.factor}"]
                D = re.dim
                lp = lp + logpdf_dirichlet(internal[f"pi_{re.factor}"], np.full(D, cov.concentration))
                lp = lp + logpdf_lkj_cholesky_factor(L, cov.regularization)
                # Jacobian of Omega = L L' with respect to the free elements of L
                log_diag = anp.log(anp.diag(L))
                lp = lp + anp.sum((D - np.arange(D) - 1.0)[1:] * log_diag[1:])
        return lp

    def _log_density(self, u):
        internal, log_jac = self.layout.constrain(u)
        p = self.layout.natural(internal)
        lp = self.log_prior(internal, p)
        if self.jacobian:
            lp = lp + log_jac
        if not self.spec.prior_only:
            lp = lp + anp.sum(self.design.log_lik(p))
        return lp

    def log_density(self, u: np.ndarray) -> float:
        with np.errstate(all="ignore"):
            value = float(self._log_density(np.asarray(u, dtype=float)))
        return value if np.isfinite(value) else -math.inf

    def value_and_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        """(log density, gradient); a non-finite density is reported as -inf."""
        with np.errstate(all="ignore"):
            value, grad = self._value_and_grad(np.asarray(u, dtype=float))
        value = float(value)
        if not np.isfinite(value):
            return -math.inf, np.zeros_like(u, dtype=float)
        return value, np.asarray(grad, dtype=float)

    def log_lik(self, p: NaturalParams) -> np.ndarray:
        with np.errstate(all="ignore"):
            return np.asarray(self.design.log_lik(p), dtype=float)


def log_likelihood(spec: ModelSpec, params: NaturalParams, data: Dataset) -> np.ndarray:
    """Per-record log likelihood; raises on the first non-finite record."""
    design = LikelihoodDesign(spec, data)
    with np.errstate(all="ignore"):
        ll = np.asarray(design.log_lik(params), dtype=float)
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        i = int(bad[0])
        payload = {
            "status": int(design.status[i]),
            "entry": float(design.entry[i]),
            "time": float(design.time[i]),
            "upper": None if np.isnan(design.upper[i]) else float(design.upper[i]),
            "value": float(ll[i]),
        }
        logger.error(f"[model] Non-finite log likelihood for record {i}: {payload}")
        raise NonFiniteLogLik(i, payload)
    return ll


def log_likelihood_record(spec: ModelSpec, params: NaturalParams | CoefficientBlock, rec: SurvivalRecord, aux: Sequence[float] = ()) -> float:
    if isinstance(params, CoefficientBlock):
        params = NaturalParams.from_block(params, aux)
    labels = {f: (lvl,) for f, lvl in rec.cluster_labels.items()}
    data = Dataset([rec], spec.covariate_names, factor_levels={f: list(v) for f, v in labels.items()})
    return float(log_likelihood(spec, params, data)[0])


def log_posterior(spec: ModelSpec, params: ParameterVector, data: Dataset) -> float:
    return Posterior(spec, data).log_density(params.unconstrained)


def gradient(spec: ModelSpec, params: ParameterVector, data: Dataset) -> np.ndarray:
    value, grad = Posterior(spec, data).value_and_grad(params.unconstrained)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"gradient is not finite at the supplied parameters (log density {value})")
    return grad

"""
Posterior predictive curves.

Every quantity is computed per posterior draw and then summarised by the
posterior median and an equal-tailed credible interval. Rows that belong to a
cluster seen during fitting use that cluster's random effect; rows from new
(or unlabelled) clusters use the new-cluster draws collected by the sampler,
which marginalises over the random-effect distribution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from .config import settings
from .data import CovariateEncoder, Dataset, KaplanMeierCurve, kaplan_meier
from .errors import (
    ConditionAfterPredictionTime,
    ConfigError,
    DimensionMismatch,
    ExtrapolationBeyondTmax,
    MissingColumn,
    UnknownQuantity,
)
from .model import ModelSpec, NaturalParams, ParameterLayout, TimeGrid, cumulative_on_grid, log_hazard_on_grid
from .sampler import PosteriorDraws

OUTPUT_COLUMNS = ["id", "cond_time", "time", "median", "ci_lb", "ci_ub"]
TIME_TOLERANCE = 1e-12


class Quantity(str, Enum):
    SURV = "surv"
    CUMHAZ = "cumhaz"
    HAZ = "haz"
    CDF = "cdf"
    LOGSURV = "logsurv"
    LOGCUMHAZ = "logcumhaz"
    LOGHAZ = "loghaz"
    LOGCDF = "logcdf"

    @property
    def needs_hazard(self) -> bool:
        return self in (Quantity.HAZ, Quantity.LOGHAZ)

    @property
    def label(self) -> str:
        return {
            Quantity.SURV: "event free probability",
            Quantity.CUMHAZ: "cumulative hazard",
            Quantity.HAZ: "hazard rate",
            Quantity.CDF: "event probability",
            Quantity.LOGSURV: "log event free probability",
            Quantity.LOGCUMHAZ: "log cumulative hazard",
            Quantity.LOGHAZ: "log hazard rate",
            Quantity.LOGCDF: "log event probability",
        }[self]


def parse_quantity(value: Quantity | str) -> Quantity:
    try:
        return Quantity(value)
    except ValueError as e:
        choices = ", ".join(q.value for q in Quantity)
        raise UnknownQuantity(f"unknown prediction type '{value}' (choose from {choices})") from e


@dataclass
class NewData:
    """Covariate rows to predict for, with optional cluster labels per factor."""

    X: np.ndarray
    ids: list[str]
    clusters: dict[str, list[str | None]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if len(self.ids) != self.X.shape[0]:
            raise DimensionMismatch(f"{len(self.ids)} ids for {self.X.shape[0]} rows")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], clusters: Mapping[str, Sequence[str | None]] | None = None) -> "NewData":
        X = np.atleast_2d(np.asarray(rows, dtype=float))
        return cls(X=X, ids=[str(i + 1) for i in range(X.shape[0])], clusters={k: list(v) for k, v in (clusters or {}).items()})

    @classmethod
    def from_dataset(cls, data: Dataset) -> "NewData":
        clusters = {
            f: [data.factor_levels[f][j] for j in data.cluster_index(f)] for f in data.factors
        }
        ids = [g if g is not None else str(i + 1) for i, g in enumerate(data.group_ids)]
        return cls(X=np.asarray(data.X), ids=ids, clusters=clusters)

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        spec: ModelSpec,
        encoder: CovariateEncoder | None = None,
        id_column: str | None = None,
    ) -> "NewData":
        if encoder is not None and encoder.columns:
            X = encoder.transform(frame)
        else:
            missing = [c for c in spec.covariate_names if c not in frame.columns]
            if missing:
                raise MissingColumn(missing[0], list(frame.columns))
            X = frame[list(spec.covariate_names)].to_numpy(dtype=float) if spec.covariate_names else np.zeros((len(frame), 0))
        if id_column is not None:
            if id_column not in frame.columns:
                raise MissingColumn(id_column, list(frame.columns))
            ids = frame[id_column].astype(str).tolist()
        else:
            ids = [str(i + 1) for i in range(len(frame))]
        clusters = {
            re.factor: [None if pd.isna(v) else str(v) for v in frame[re.factor]]
            for re in spec.re_specs
            if re.factor in frame.columns
        }
        return cls(X=X.reshape(len(frame), -1), ids=ids, clusters=clusters)


@dataclass
class PredictionRequest:
    newdata: NewData
    quantity: Quantity = Quantity.SURV
    times: Sequence[float] | None = None
    condition_time: float | None = None
    standardise: bool = False
    credible_level: float = field(default_factory=lambda: settings.credible_level)
    extrapolate: bool = False
    edist: float | None = None
    grid_size: int = field(default_factory=lambda: settings.grid_size)

    def __post_init__(self) -> None:
        self.quantity = parse_quantity(self.quantity)
        if not 0.0 < self.credible_level < 1.0:
            raise ConfigError(f"credible level must be in (0, 1), got {self.credible_level}")
        if self.condition_time is not None and self.condition_time <= 0:
            raise ConditionAfterPredictionTime(f"condition time must be positive, got {self.condition_time}")
        if self.standardise and self.quantity not in (Quantity.SURV, Quantity.CDF):
            raise ConfigError("standardised predictions are available for surv and cdf only")
        if self.grid_size < 1:
            raise ConfigError(f"grid size must be positive, got {self.grid_size}")


@dataclass
class PredictionFrame:
    rows: pd.DataFrame
    quantity: Quantity
    standardised: bool = False
    conditional: bool = False
    credible_level: float = 0.95

    def to_csv(self, path) -> None:
        self.rows.to_csv(path, index=False)

    def for_id(self, id_: str) -> pd.DataFrame:
        return self.rows[self.rows["id"] == id_]


def summarise(values: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Median and equal-tailed interval over the first (draw) axis."""
    tail = (1.0 - level) / 2.0
    with np.errstate(invalid="ignore"):
        lo, med, hi = np.quantile(values, [tail, 0.5, 1.0 - tail], axis=0)
    return med, lo, hi


# --- per-draw evaluation ---------------------------------------------------------

def _check_times(spec: ModelSpec, times: np.ndarray) -> None:
    if np.any(times < 0):
        raise ConfigError(f"prediction times must be non-negative, got {float(times[times < 0][0])}")
    too_far = times > spec.t_max + TIME_TOLERANCE
    if np.any(too_far):
        raise ExtrapolationBeyondTmax(float(times[too_far][0]), spec.t_max)


def _cluster_index(spec: ModelSpec, newdata: NewData) -> dict[str, np.ndarray]:
    """Index of each row's fitted cluster per factor; -1 marks a new cluster."""
    out = {}
    for re in spec.re_specs:
        lookup = {lvl: j for j, lvl in enumerate(spec.factor_levels[re.factor])}
        labels = newdata.clusters.get(re.factor, [None] * newdata.n)
        idx = np.array([lookup.get(lbl, -1) if lbl is not None else -1 for lbl in labels], dtype=int)
        n_new = int(np.sum(idx < 0))
        if n_new:
            logger.debug(f"[predict] {n_new} rows predicted for a new '{re.factor}' cluster")
        out[re.factor] = idx
    return out


class CurveEvaluator:
    """Evaluates H(t) and log h(t) for a fixed set of rows and times, one draw at a time."""

    def __init__(self, spec: ModelSpec, newdata: NewData, times: np.ndarray, *, hazard: bool, random_effects: bool = True) -> None:
        P = len(spec.covariate_names)
        if newdata.X.shape[1] != P:
            raise DimensionMismatch(f"new data has {newdata.X.shape[1]} covariate columns, model expects {P}")
        self.spec = spec
        self.layout = ParameterLayout(spec)
        self.newdata = newdata
        self.times = np.asarray(times, dtype=float)
        _check_times(spec, self.times)
        self.random_effects = random_effects and bool(spec.re_specs)
        self.cluster_index = _cluster_index(spec, newdata) if self.random_effects else {}
        self.Z = {re.factor: re.design(newdata.X) for re in spec.re_specs}

        N, G = newdata.n, self.times.size
        self.shape = (N, G)
        positive = self.times > 0
        self.positive = positive
        pos_times = self.times[positive]
        self.rows = np.repeat(np.arange(N), pos_times.size)
        self.X_rep = np.repeat(newdata.X, pos_times.size, axis=0)
        grid_times = np.tile(pos_times, N)
        idx = np.arange(self.rows.size)
        self.cum_grid = TimeGrid.build(spec, idx, grid_times)
        self.haz_grid = None
        if hazard:
            # the right limit at the smallest positive time stands in for t = 0
            first = pos_times.min() if pos_times.size else spec.t_max
            haz_times = np.where(self.times > 0, self.times, first)
            self.haz_index = np.repeat(np.arange(N), G)
            self.haz_X = np.repeat(newdata.X, G, axis=0)
            self.haz_grid = TimeGrid.build(spec, np.arange(N * G), np.tile(haz_times, N), cumulative=spec.is_aft, hazard=True)

    def _eta(self, p: NaturalParams, s: int, draws: PosteriorDraws | None) -> np.ndarray:
        eta = p.intercept + self.newdata.X @ np.asarray(p.beta, dtype=float)
        if not self.random_effects:
            return np.asarray(eta, dtype=float)
        for re in self.spec.re_specs:
            idx = self.cluster_index[re.factor]
            b_fit = np.asarray(p.random_effects[re.factor], dtype=float)
            b = np.zeros((self.newdata.n, re.dim))
            seen = idx >= 0
            b[seen] = b_fit[idx[seen]]
            if np.any(~seen):
                new = draws.new_cluster_draws.get(re.factor) if draws is not None else None
                b[~seen] = 0.0 if new is None else new[s]
            eta = eta + np.sum(self.Z[re.factor] * b, axis=1)
        return np.asarray(eta, dtype=float)

    def evaluate(self, p: NaturalParams, s: int = 0, draws: PosteriorDraws | None = None) -> tuple[np.ndarray, np.ndarray | None]:
        """(H, log h) arrays of shape (rows, times); H is exactly zero at t = 0."""
        eta = self._eta(p, s, draws)
        N, G = self.shape
        H = np.zeros(self.shape)
        with np.errstate(all="ignore"):
            if self.rows.size:
                H_pos, _ = cumulative_on_grid(self.spec, p, eta[self.rows], self.X_rep, self.cum_grid)
                H[:, self.positive] = np.asarray(H_pos, dtype=float).reshape(N, -1)
            log_h = None
            if self.haz_grid is not None:
                eta_rep = eta[self.haz_index]
                accel = None
                if self.spec.is_aft:
                    _, accel = cumulative_on_grid(self.spec, p, eta_rep, self.haz_X, self.haz_grid)
                log_h = np.asarray(log_hazard_on_grid(self.spec, p, eta_rep, self.haz_X, self.haz_grid, accel), dtype=float).reshape(N, G)
        return H, log_h


def _transform(quantity: Quantity, H: np.ndarray, log_h: np.ndarray | None) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        if quantity is Quantity.SURV:
            return np.exp(-H)
        if quantity is Quantity.LOGSURV:
            return -H
        if quantity is Quantity.CUMHAZ:
            return H
        if quantity is Quantity.LOGCUMHAZ:
            return np.log(H)
        if quantity is Quantity.CDF:
            return -np.expm1(-H)
        if quantity is Quantity.LOGCDF:
            return np.log(-np.expm1(-H))
        if quantity is Quantity.HAZ:
            return np.exp(log_h)
        return log_h


def curve_draws(
    draws: PosteriorDraws,
    spec: ModelSpec,
    newdata: NewData,
    times: Sequence[float] | np.ndarray,
    quantity: Quantity | str = Quantity.SURV,
    *,
    condition_time: float | None = None,
    random_effects: bool = True,
) -> np.ndarray:
    """Per-draw values with shape (draws, rows, times)."""
    quantity = parse_quantity(quantity)
    times = np.asarray(times, dtype=float)
    if condition_time is not None:
        times_all = np.concatenate([times, [condition_time]])
    else:
        times_all = times
    evaluator = CurveEvaluator(spec, newdata, times_all, hazard=quantity.needs_hazard, random_effects=random_effects)
    out = np.empty((draws.n_draws, newdata.n, times.size))
    for s in range(draws.n_draws):
        p = evaluator.layout.from_row(draws.draws[s])
        H, log_h = evaluator.evaluate(p, s, draws)
        if condition_time is not None:
            H = H[:, :-1] - H[:, -1:]
            log_h = log_h[:, :-1] if log_h is not None else None
        out[s] = _transform(quantity, H, log_h)
    return out


# --- requests ----------------------------------------------------------------------

def prediction_times(spec: ModelSpec, req: PredictionRequest) -> np.ndarray:
    """
    Explicit times, or with ``extrapolate`` a grid of ``grid_size`` points from
    the first requested time (default 0) forward by ``edist``, clipped at T_max.
    Conditional requests start their grid just after the condition time.
    """
    if not req.extrapolate:
        if req.times is None:
            start = req.condition_time or 0.0
            return np.linspace(start, spec.t_max, req.grid_size + 1)[1:]
        return np.atleast_1d(np.asarray(req.times, dtype=float))
    start = float(req.times[0]) if req.times is not None and len(req.times) else (req.condition_time or 0.0)
    if start > spec.t_max:
        raise ExtrapolationBeyondTmax(start, spec.t_max)
    edist = spec.t_max - start if req.edist is None else float(req.edist)
    stop = start + edist
    if stop > spec.t_max:
        logger.warning(f"[predict] Extrapolation to {stop:g} clipped at the last observed time {spec.t_max:g}")
        stop = spec.t_max
    if req.condition_time is not None and start <= req.condition_time:
        start = req.condition_time
        return np.linspace(start, max(stop, start), req.grid_size + 1)[1:]
    return np.linspace(start, stop, req.grid_size)


def _frame(ids: Sequence[str], times: np.ndarray, cond_time: float | None, values: np.ndarray, level: float) -> pd.DataFrame:
    med, lo, hi = summarise(values, level)
    n_rows, G = med.shape
    return pd.DataFrame(
        {
            "id": np.repeat(np.asarray(ids, dtype=object), G),
            "cond_time": np.full(n_rows * G, np.nan if cond_time is None else cond_time),
            "time": np.tile(times, n_rows),
            "median": med.ravel(),
            "ci_lb": lo.ravel(),
            "ci_ub": hi.ravel(),
        },
        columns=OUTPUT_COLUMNS,
    )


def predict_curves(draws: PosteriorDraws, spec: ModelSpec, req: PredictionRequest) -> PredictionFrame:
    if req.condition_time is not None:
        return conditional_survival(draws, spec, req)
    times = prediction_times(spec, req)
    if req.standardise:
        return standardised_survival(draws, spec, req.newdata, times, quantity=req.quantity, credible_level=req.credible_level)
    values = curve_draws(draws, spec, req.newdata, times, req.quantity)
    logger.info(f"[predict] {req.quantity.label}: {req.newdata.n} rows x {times.size} times over {draws.n_draws:,} draws")
    return PredictionFrame(
        rows=_frame(req.newdata.ids, times, None, values, req.credible_level),
        quantity=req.quantity,
        credible_level=req.credible_level,
    )


def conditional_survival(draws: PosteriorDraws, spec: ModelSpec, req: PredictionRequest) -> PredictionFrame:
    """S(t) / S(C) per draw; cumulative quantities are taken relative to C."""
    C = req.condition_time
    if C is None or C <= 0:
        raise ConditionAfterPredictionTime(f"conditional predictions need a positive condition time, got {C}")
    times = prediction_times(spec, req)
    if np.any(times <= C):
        raise ConditionAfterPredictionTime(f"prediction time {float(times[times <= C][0]):g} is not after condition time {C:g}")
    if req.standardise:
        surv = curve_draws(draws, spec, req.newdata, np.concatenate([times, [C]]), Quantity.SURV)
        avg = surv.mean(axis=1, keepdims=True)
        cond = avg[:, :, :-1] / avg[:, :, -1:]
        values = cond if req.quantity is Quantity.SURV else 1.0 - cond
        ids = ["standardised"]
    else:
        values = curve_draws(draws, spec, req.newdata, times, req.quantity, condition_time=C)
        ids = req.newdata.ids
    logger.info(f"[predict] {req.quantity.label} conditional on survival to {C:g}")
    return PredictionFrame(
        rows=_frame(ids, times, C, values, req.credible_level),
        quantity=req.quantity,
        standardised=req.standardise,
        conditional=True,
        credible_level=req.credible_level,
    )


def standardised_survival(
    draws: PosteriorDraws,
    spec: ModelSpec,
    newdata: NewData,
    times: Sequence[float] | np.ndarray,
    *,
    quantity: Quantity | str = Quantity.SURV,
    credible_level: float | None = None,
) -> PredictionFrame:
    """Per draw and time, the mean over rows of the individual survival probabilities."""
    quantity = parse_quantity(quantity)
    if quantity not in (Quantity.SURV, Quantity.CDF):
        raise ConfigError("standardised predictions are available for surv and cdf only")
    if newdata.n < 1:
        raise DimensionMismatch("standardised survival needs at least one covariate row")
    level = settings.credible_level if credible_level is None else credible_level
    times = np.atleast_1d(np.asarray(times, dtype=float))
    values = curve_draws(draws, spec, newdata, times, quantity).mean(axis=1, keepdims=True)
    logger.info(f"[predict] Standardised {quantity.label} over {newdata.n} rows")
    return PredictionFrame(
        rows=_frame(["standardised"], times, None, values, level),
        quantity=quantity,
        standardised=True,
        credible_level=level,
    )


@dataclass
class PsCheckResult:
    curves: pd.DataFrame
    max_discrepancy: float
    km: KaplanMeierCurve


def ps_check(draws: PosteriorDraws, spec: ModelSpec, data: Dataset, grid_size: int | None = None, credible_level: float | None = None) -> PsCheckResult:
    """Standardised posterior predictive survival over the estimation sample next to Kaplan-Meier."""
    grid_size = settings.grid_size if grid_size is None else grid_size
    if grid_size < 1:
        raise ConfigError(f"grid size must be positive, got {grid_size}")
    km = kaplan_meier(data)
    t_max = min(spec.t_max, data.t_max)
    times = np.linspace(0.0, t_max, grid_size + 1)[1:]
    pred = standardised_survival(draws, spec, NewData.from_dataset(data), times, credible_level=credible_level)
    curves = pred.rows.drop(columns=["id", "cond_time"]).reset_index(drop=True)
    curves["km"] = km.at(times)
    discrepancy = float(np.max(np.abs(curves["median"] - curves["km"])))
    logger.info(f"[predict] ps_check over {grid_size} points: max |median - KM| = {discrepancy:.4f}")
    return PsCheckResult(curves=curves, max_discrepancy=discrepancy, km=km)


# --- baseline hazard and time-varying effects ---------------------------------------

def baseline_hazard_curve(draws: PosteriorDraws, spec: ModelSpec, times: Sequence[float] | np.ndarray, credible_level: float | None = None) -> pd.DataFrame:
    """Hazard at covariates zero (intercept included, no random effects)."""
    level = settings.credible_level if credible_level is None else credible_level
    times = np.atleast_1d(np.asarray(times, dtype=float))
    zero = NewData(X=np.zeros((1, len(spec.covariate_names))), ids=["baseline"])
    values = curve_draws(draws, spec, zero, times, Quantity.HAZ, random_effects=False)
    med, lo, hi = summarise(values[:, 0, :], level)
    return pd.DataFrame({"time": times, "median": med, "ci_lb": lo, "ci_ub": hi})


def tve_curve(draws: PosteriorDraws, spec: ModelSpec, covariate: str, times: Sequence[float] | np.ndarray, credible_level: float | None = None) -> pd.DataFrame:
    """
    exp(beta_p(t)) per draw: the time-varying hazard ratio for hazard-scale
    models and the time-varying survival time ratio for AFT models.
    """
    level = settings.credible_level if credible_level is None else credible_level
    matches = [t for t in spec.tve_specs if t.covariate == covariate]
    if not matches:
        raise ConfigError(f"'{covariate}' has no time-varying effect in this model")
    tve = matches[0]
    times = np.atleast_1d(np.asarray(times, dtype=float))
    _check_times(spec, times)
    basis = tve.basis(times, outside="zero")
    level_col = draws.column(tve.covariate)
    theta_cols = np.column_stack([draws.column(n) for n in tve.coef_names()]) if tve.n_coef else np.zeros((draws.n_draws, 0))
    beta_t = level_col[:, None] + theta_cols @ basis.T
    med, lo, hi = summarise(np.exp(beta_t), level)
    return pd.DataFrame({"time": times, "median": med, "ci_lb": lo, "ci_ub": hi})


def degenerate_draws(spec: ModelSpec, params: NaturalParams, n_draws: int = 1) -> PosteriorDraws:
    """Draws that repeat one parameter point, with new-cluster draws at zero."""
    layout = ParameterLayout(spec)
    row = layout.row_from_natural(params)
    S = n_draws
    return PosteriorDraws(
        names=layout.names,
        draws=np.tile(row, (S, 1)),
        chain_id=np.zeros(S, dtype=int),
        diverging=np.zeros(S, dtype=bool),
        step_size=np.ones(S),
        tree_depth=np.ones(S, dtype=int),
        n_leapfrog=np.ones(S, dtype=int),
        accept_stat=np.ones(S),
        energy=np.zeros(S),
        new_cluster_draws={re.factor: np.zeros((S, re.dim)) for re in spec.re_specs},
    )

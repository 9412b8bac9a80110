"""
Pointwise log likelihood, information criteria and MCMC diagnostics.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import arviz as az
import numpy as np
import pandas as pd
from loguru import logger
from scipy import stats
from scipy.special import logsumexp

from .data import Dataset
from .errors import ConfigError, DegenerateDraws, InsufficientDraws, UnitMismatch
from .model import LikelihoodDesign, ModelSpec, ParameterLayout
from .sampler import PosteriorDraws

MAD_SD_SCALE = 1.4826


class UnitDefinition(str, Enum):
    PER_ROW = "row"
    PER_GROUP = "group"


@dataclass
class PointwiseLogLik:
    matrix: np.ndarray
    unit: UnitDefinition
    unit_ids: list[str]

    @property
    def n_draws(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_units(self) -> int:
        return self.matrix.shape[1]


def collapse_by_group(matrix: np.ndarray, group_ids: Sequence[str | None]) -> tuple[np.ndarray, list[str]]:
    """Sum columns that share an id; groups are kept in order of first appearance."""
    if any(g is None for g in group_ids):
        raise ConfigError("per-group log likelihood needs an id for every row")
    codes, uniques = pd.factorize(pd.Series(list(group_ids), dtype=object), sort=False)
    out = np.zeros((matrix.shape[0], len(uniques)))
    np.add.at(out.T, codes, matrix.T)
    return out, [str(u) for u in uniques]


def log_lik_matrix(
    draws: PosteriorDraws,
    spec: ModelSpec,
    data: Dataset,
    unit: UnitDefinition | str = UnitDefinition.PER_ROW,
) -> PointwiseLogLik:
    """
    Entry (s, u) is the log likelihood of unit u at draw s. ``data`` may be the
    estimation sample or new records in the same schema.
    """
    unit = UnitDefinition(unit)
    layout = ParameterLayout(spec)
    design = LikelihoodDesign(spec, data)
    matrix = np.empty((draws.n_draws, data.n))
    with np.errstate(all="ignore"):
        for s in range(draws.n_draws):
            matrix[s] = np.asarray(design.log_lik(layout.from_row(draws.draws[s])), dtype=float)
    if unit is UnitDefinition.PER_GROUP:
        matrix, ids = collapse_by_group(matrix, data.group_ids)
    else:
        ids = [str(i + 1) for i in range(data.n)]
    logger.debug(f"[eval] Log likelihood matrix {matrix.shape[0]} draws x {matrix.shape[1]} {unit.value}s")
    return PointwiseLogLik(matrix=matrix, unit=unit, unit_ids=ids)


@dataclass
class ElpdResult:
    """Expected log pointwise predictive density with its pointwise parts."""

    criterion: str
    elpd: float
    p_eff: float
    se: float
    pointwise: np.ndarray
    unit_ids: list[str]

    @property
    def n_units(self) -> int:
        return self.pointwise.size

    @property
    def ic(self) -> float:
        """On the deviance scale, -2 elpd."""
        return -2.0 * self.elpd


def _check_matrix(ll: PointwiseLogLik) -> np.ndarray:
    m = np.asarray(ll.matrix, dtype=float)
    if m.shape[0] < 2:
        raise DegenerateDraws(f"need at least 2 draws to estimate variances, got {m.shape[0]}")
    if not np.all(np.isfinite(m)):
        raise DegenerateDraws("log likelihood matrix contains non-finite values")
    return m


def _se(pointwise: np.ndarray) -> float:
    return float(math.sqrt(pointwise.size * np.var(pointwise)))


def to_inference_data(ll: PointwiseLogLik) -> az.InferenceData:
    """The matrix as a one-chain ``log_likelihood`` group."""
    return az.from_dict(log_likelihood={"y": _check_matrix(ll)[np.newaxis]})


def waic(ll: PointwiseLogLik) -> ElpdResult:
    """WAIC with the variance-based effective number of parameters."""
    idata = to_inference_data(ll)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = az.waic(idata, pointwise=True, scale="log")
    for w in caught:
        logger.warning(f"[eval] {str(w.message).strip()}")
    return ElpdResult(
        criterion="waic",
        elpd=float(result["elpd_waic"]),
        p_eff=float(result["p_waic"]),
        se=float(result["se"]),
        pointwise=np.asarray(result["waic_i"], dtype=float).reshape(-1),
        unit_ids=list(ll.unit_ids),
    )


def loo(ll: PointwiseLogLik) -> ElpdResult:
    """Leave-one-out elpd from raw (unsmoothed) importance ratios 1 / p(y_u | theta_s)."""
    m = _check_matrix(ll)
    S = m.shape[0]
    logger.warning("[eval] LOO uses raw importance weights without Pareto smoothing; estimates can be unstable")
    lppd = logsumexp(m, axis=0) - math.log(S)
    pointwise = -(logsumexp(-m, axis=0) - math.log(S))
    return ElpdResult(
        criterion="loo",
        elpd=float(pointwise.sum()),
        p_eff=float((lppd - pointwise).sum()),
        se=_se(pointwise),
        pointwise=pointwise,
        unit_ids=list(ll.unit_ids),
    )


def compare(models: Mapping[str, ElpdResult] | Sequence[tuple[str, ElpdResult]]) -> pd.DataFrame:
    """
    Rank models by elpd. ``elpd_diff`` is relative to the best model (so it is
    0 for the best and negative otherwise) and ``se_diff`` comes from the
    unit-level paired differences.
    """
    items = list(models.items()) if isinstance(models, Mapping) else list(models)
    if not items:
        raise ConfigError("nothing to compare")
    reference = items[0][1]
    for name, res in items[1:]:
        if res.n_units != reference.n_units or res.unit_ids != reference.unit_ids:
            raise UnitMismatch(f"model '{name}' was evaluated on different units than '{items[0][0]}'")
        if res.criterion != reference.criterion:
            raise UnitMismatch(f"model '{name}' uses {res.criterion}, '{items[0][0]}' uses {reference.criterion}")
    best_name, best = max(items, key=lambda kv: kv[1].elpd)
    rows = []
    for name, res in items:
        diff = res.pointwise - best.pointwise
        rows.append(
            {
                "model": name,
                "elpd_diff": float(diff.sum()),
                "se_diff": _se(diff),
                f"elpd_{res.criterion}": res.elpd,
                "p_eff": res.p_eff,
                "se": res.se,
            }
        )
    table = pd.DataFrame(rows).sort_values("elpd_diff", ascending=False, kind="stable").set_index("model")
    logger.info(f"[eval] Compared {len(items)} models; best is '{best_name}'")
    return table


# --- diagnostics -------------------------------------------------------------------

@dataclass(frozen=True)
class Convergence:
    rhat: float
    ess: float


def rhat_ess(chains: np.ndarray) -> Convergence:
    """
    Split-chain Rhat and rank-normalised bulk ESS for one parameter given as a
    (chains, draws) array. Rhat is inf for chains stuck at different values.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 4:
        raise InsufficientDraws(f"need at least 2 chains of 4 draws, got shape {chains.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = float(az.rhat(chains, method="split"))
    if np.ptp(chains) == 0:
        return Convergence(rhat=rhat, ess=math.nan)
    return Convergence(rhat=rhat, ess=float(az.ess(chains, method="bulk")))


# --- summaries ---------------------------------------------------------------------

def posterior_summary(draws: PosteriorDraws, probs: Sequence[float] = (0.025, 0.5, 0.975)) -> pd.DataFrame:
    """Mean, sd, quantiles, Rhat and ESS per parameter."""
    frame = pd.DataFrame(draws.draws, columns=draws.names)
    table = pd.DataFrame({"mean": frame.mean(), "sd": frame.std(ddof=1)})
    for q in probs:
        table[f"{100 * q:g}%"] = frame.quantile(q)
    rhat, ess = [], []
    for name in draws.names:
        try:
            conv = rhat_ess(draws.by_chain(name))
        except (InsufficientDraws, ValueError):
            conv = Convergence(rhat=math.nan, ess=math.nan)
        rhat.append(conv.rhat)
        ess.append(conv.ess)
    table["rhat"] = rhat
    table["ess"] = ess
    return table


def fixef(draws: PosteriorDraws, spec: ModelSpec) -> pd.Series:
    names = ["(Intercept)", *spec.covariate_names]
    for tve in spec.tve_specs:
        names += tve.coef_names()
    return pd.Series({n: float(np.median(draws.column(n))) for n in names})


def ranef(draws: PosteriorDraws, spec: ModelSpec) -> dict[str, pd.DataFrame]:
    """Posterior medians of the random effects, one levels x terms frame per factor."""
    out = {}
    for re in spec.re_specs:
        levels = list(spec.factor_levels[re.factor])
        values = {
            term: [float(np.median(draws.column(f"b[{term} {re.factor}:{lvl}]"))) for lvl in levels]
            for term in re.terms
        }
        out[re.factor] = pd.DataFrame(values, index=pd.Index(levels, name=re.factor))
    return out


def mad_sd(x: np.ndarray) -> float:
    return float(MAD_SD_SCALE * stats.median_abs_deviation(np.asarray(x, dtype=float)))


def print_table(draws: PosteriorDraws, spec: ModelSpec) -> pd.DataFrame:
    """
    Median, MAD_SD and exp(Median) for the fixed part. The exponentiated column
    is a hazard ratio (a survival time ratio for AFT models) and is left empty
    for the intercept and auxiliary parameters.
    """
    exponentiable = set(spec.covariate_names)
    for tve in spec.tve_specs:
        exponentiable.update(tve.coef_names())
    layout = ParameterLayout(spec)
    shown = [n for n in layout.names if not n.startswith(("b[", "Sigma["))]
    rows = []
    for name in shown:
        x = draws.column(name)
        med = float(np.median(x))
        rows.append(
            {
                "parameter": name,
                "Median": med,
                "MAD_SD": mad_sd(x),
                "exp(Median)": math.exp(med) if name in exponentiable else math.nan,
            }
        )
    return pd.DataFrame(rows).set_index("parameter")


def random_effect_sds(draws: PosteriorDraws, spec: ModelSpec) -> pd.DataFrame:
    rows = []
    for re in spec.re_specs:
        for term in re.terms:
            var = draws.column(f"Sigma[{re.factor}:{term},{term}]")
            rows.append({"group": re.factor, "name": term, "std_dev": float(np.median(np.sqrt(var)))})
    return pd.DataFrame(rows, columns=["group", "name", "std_dev"])

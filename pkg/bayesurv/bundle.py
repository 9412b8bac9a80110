"""
Fit bundle, the on-disk result of ``bayesurv fit``.

A bundle is a directory with three files:
- spec.json         model specification, formula, knots actually used, priors
- draws.csv         sampler statistics, constrained draws, new-cluster draws
- diagnostics.json  per-parameter Rhat / ESS, divergences, tree depth

Bundles are written to a temporary sibling directory and renamed into place,
so a failed write never leaves a partial bundle behind.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError

from .data import CovariateEncoder, DatasetSchema
from .errors import BundleVersionMismatch, ConfigError
from .model import ModelSpec, ParameterLayout
from .predictor import RandomEffectSpec, TveSpec
from .priors import PriorAssignment, prior_summary
from .sampler import PosteriorDraws
from .splines import SplineConfig

BUNDLE_VERSION = 1
SPEC_FILE = "spec.json"
DRAWS_FILE = "draws.csv"
DIAGNOSTICS_FILE = "diagnostics.json"

STAT_COLUMNS = {
    "accept_stat__": "accept_stat",
    "stepsize__": "step_size",
    "treedepth__": "tree_depth",
    "n_leapfrog__": "n_leapfrog",
    "divergent__": "diverging",
    "energy__": "energy",
}


class TveRecord(BaseModel):
    covariate: str
    covariate_index: int
    spline: SplineConfig


class RandomEffectRecord(BaseModel):
    factor: str
    intercept: bool = True
    slopes: list[str] = []
    slope_indices: list[int] = []


class SpecDocument(BaseModel):
    """spec.json"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    bundle_version: int
    created_at: str
    baseline: str
    formula: str = ""
    covariate_names: list[str]
    covariate_means: list[float]
    baseline_spline: SplineConfig | None = None
    tve: list[TveRecord] = []
    random_effects: list[RandomEffectRecord] = []
    factor_levels: dict[str, list[str]] = {}
    priors: PriorAssignment
    prior_summary: dict[str, Any] = {}
    qnodes: int = 15
    quadrature: str = "auto"
    prior_only: bool = False
    t_max: float
    encoder: CovariateEncoder = CovariateEncoder()
    data_schema: DatasetSchema | None = None
    data_summary: dict[str, Any] = {}
    sampler: dict[str, Any] = {}

    @classmethod
    def from_spec(cls, spec: ModelSpec, **extra: Any) -> "SpecDocument":
        return cls(
            bundle_version=BUNDLE_VERSION,
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            baseline=spec.baseline,
            formula=spec.formula,
            covariate_names=list(spec.covariate_names),
            covariate_means=list(spec.covariate_means),
            baseline_spline=spec.baseline_spline,
            tve=[TveRecord(covariate=t.covariate, covariate_index=t.covariate_index, spline=t.spline) for t in spec.tve_specs],
            random_effects=[
                RandomEffectRecord(factor=r.factor, intercept=r.intercept, slopes=list(r.slopes), slope_indices=list(r.slope_indices))
                for r in spec.re_specs
            ],
            factor_levels={k: list(v) for k, v in spec.factor_levels.items()},
            priors=spec.priors,
            prior_summary=prior_summary(spec.priors),
            qnodes=spec.qnodes,
            quadrature=spec.quadrature,
            prior_only=spec.prior_only,
            t_max=spec.t_max,
            **extra,
        )

    def to_spec(self) -> ModelSpec:
        return ModelSpec(
            baseline=self.baseline,
            covariate_names=tuple(self.covariate_names),
            baseline_spline=self.baseline_spline,
            tve_specs=tuple(TveSpec(covariate_index=t.covariate_index, covariate=t.covariate, spline=t.spline) for t in self.tve),
            re_specs=tuple(
                RandomEffectSpec(factor=r.factor, intercept=r.intercept, slopes=tuple(r.slopes), slope_indices=tuple(r.slope_indices))
                for r in self.random_effects
            ),
            priors=self.priors,
            qnodes=self.qnodes,
            prior_only=self.prior_only,
            quadrature=self.quadrature,
            covariate_means=tuple(self.covariate_means),
            factor_levels={k: tuple(v) for k, v in self.factor_levels.items()},
            t_max=self.t_max,
            formula=self.formula,
        )


@dataclass
class FitBundle:
    spec: ModelSpec
    draws: PosteriorDraws
    document: SpecDocument
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def encoder(self) -> CovariateEncoder:
        return self.document.encoder


def new_cluster_columns(spec: ModelSpec) -> list[tuple[str, str, int]]:
    return [(f"b_new[{term} {re.factor}]", re.factor, k) for re in spec.re_specs for k, term in enumerate(re.terms)]


def draws_frame(spec: ModelSpec, draws: PosteriorDraws) -> pd.DataFrame:
    frame = pd.DataFrame({"chain": draws.chain_id})
    for column, attr in STAT_COLUMNS.items():
        values = getattr(draws, attr)
        frame[column] = values.astype(int) if attr == "diverging" else values
    params = pd.DataFrame(draws.draws, columns=draws.names)
    extra = pd.DataFrame(
        {col: draws.new_cluster_draws[factor][:, k] for col, factor, k in new_cluster_columns(spec)},
        index=params.index,
    )
    return pd.concat([frame, params, extra], axis=1)


def draws_from_frame(spec: ModelSpec, names: list[str], frame: pd.DataFrame, max_treedepth: int = 10) -> PosteriorDraws:
    missing = [c for c in ["chain", *STAT_COLUMNS, *names] if c not in frame.columns]
    if missing:
        raise ConfigError(f"{DRAWS_FILE} is missing column '{missing[0]}'")
    new = {}
    for re in spec.re_specs:
        cols = [col for col, factor, _ in new_cluster_columns(spec) if factor == re.factor]
        new[re.factor] = frame[cols].to_numpy(dtype=float)
    return PosteriorDraws(
        names=list(names),
        draws=frame[names].to_numpy(dtype=float),
        chain_id=frame["chain"].to_numpy(dtype=int),
        diverging=frame["divergent__"].to_numpy(dtype=int).astype(bool),
        step_size=frame["stepsize__"].to_numpy(dtype=float),
        tree_depth=frame["treedepth__"].to_numpy(dtype=int),
        n_leapfrog=frame["n_leapfrog__"].to_numpy(dtype=int),
        accept_stat=frame["accept_stat__"].to_numpy(dtype=float),
        energy=frame["energy__"].to_numpy(dtype=float),
        new_cluster_draws=new,
        max_treedepth=max_treedepth,
    )


def _swap_into_place(tmp: Path, target: Path) -> None:
    """Move ``tmp`` to ``target``; an existing bundle is restored if the move fails."""
    old = tmp.with_name(f"{tmp.name}.old") if target.exists() else None
    if old is not None:
        os.replace(target, old)
    try:
        os.replace(tmp, target)
    except OSError:
        if old is not None:
            os.replace(old, target)
        raise
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def write_bundle(
    path: str | Path,
    spec: ModelSpec,
    draws: PosteriorDraws,
    diagnostics: dict[str, Any],
    **document_fields: Any,
) -> Path:
    """
    Write a fit bundle atomically.

    Args:
        path: Target directory; an existing bundle there is replaced
        spec: Fitted model specification
        draws: Posterior draws from ``sample``
        diagnostics: JSON-serialisable diagnostics
        document_fields: Extra spec.json fields (encoder, data_schema, data_summary, sampler)

    Returns:
        The bundle directory
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    document = SpecDocument.from_spec(spec, **document_fields)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        (tmp / SPEC_FILE).write_text(document.model_dump_json(indent=2))
        draws_frame(spec, draws).to_csv(tmp / DRAWS_FILE, index=False)
        (tmp / DIAGNOSTICS_FILE).write_text(json.dumps(diagnostics, indent=2, default=_json_default))
        _swap_into_place(tmp, target)
    except Exception as e:
        shutil.rmtree(tmp, ignore_errors=True)
        logger.error(f"[bundle] Failed to write {target}: {e}")
        raise
    logger.success(f"[bundle] Wrote {draws.n_draws:,} draws to {target}")
    return target


def read_bundle(path: str | Path) -> FitBundle:
    root = Path(path)
    for name in (SPEC_FILE, DRAWS_FILE, DIAGNOSTICS_FILE):
        if not (root / name).exists():
            raise ConfigError(f"{root} is not a fit bundle (missing {name})")
    raw = json.loads((root / SPEC_FILE).read_text())
    version = raw.get("bundle_version")
    if version != BUNDLE_VERSION:
        raise BundleVersionMismatch(f"bundle {root} has version {version}, this build reads version {BUNDLE_VERSION}")
    try:
        document = SpecDocument.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid {SPEC_FILE}: {e.errors()[0]['msg']}") from e
    spec = document.to_spec()
    diagnostics = json.loads((root / DIAGNOSTICS_FILE).read_text())
    names = ParameterLayout(spec).names
    frame = pd.read_csv(root / DRAWS_FILE, float_precision="round_trip")
    draws = draws_from_frame(spec, names, frame, max_treedepth=int(document.sampler.get("max_treedepth", 10)))
    logger.info(f"[bundle] Loaded {draws.n_draws:,} draws of {len(names)} parameters from {root}")
    return FitBundle(spec=spec, draws=draws, document=document, diagnostics=diagnostics)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")

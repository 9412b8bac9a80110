"""
Outcome data model: censoring status, survival records, validated datasets,
CSV loading and the Kaplan-Meier product-limit estimator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InvariantViolation, MissingColumn, ParseFailure, UnsupportedStatus


class CensoringStatus(IntEnum):
    RIGHT_CENSORED = 0
    EVENT = 1
    LEFT_CENSORED = 2
    INTERVAL_CENSORED = 3


class SurvivalRecord(BaseModel):
    """One row of outcome data."""

    model_config = ConfigDict(frozen=True)

    entry_time: float = Field(default=0.0, ge=0.0)
    time: float = Field(gt=0.0)
    upper_time: float | None = None
    status: CensoringStatus
    covariates: tuple[float, ...] = ()
    cluster_labels: dict[str, str] = Field(default_factory=dict)
    group_id: str | None = None

    @model_validator(mode="after")
    def _check_invariants(self) -> "SurvivalRecord":
        if not self.entry_time < self.time:
            raise ValueError(f"entry_time {self.entry_time} must precede time {self.time}")
        interval = self.status == CensoringStatus.INTERVAL_CENSORED
        if interval and self.upper_time is None:
            raise ValueError("interval-censored record requires upper_time")
        if not interval and self.upper_time is not None:
            raise ValueError("upper_time is only allowed for interval-censored records")
        if interval and not self.time < self.upper_time:
            raise ValueError(f"upper_time {self.upper_time} must exceed time {self.time}")
        if any(not math.isfinite(x) for x in self.covariates):
            raise ValueError("covariates contain missing or non-finite values")
        return self


class DatasetSchema(BaseModel):
    """Maps the roles of a survival dataset onto CSV column names."""

    time: str
    status: str
    entry: str | None = None
    upper: str | None = None
    covariates: list[str] = Field(default_factory=list)
    clusters: list[str] = Field(default_factory=list)
    id: str | None = None


class CovariateEncoder(BaseModel):
    """
    Turns raw covariate columns into the numeric design.

    Numeric columns pass through. Non-numeric columns are expanded with
    treatment contrasts: the first (sorted) level is the reference and each
    other level becomes an indicator named ``<column><level>``.
    """

    columns: list[str] = Field(default_factory=list)
    levels: dict[str, list[str]] = Field(default_factory=dict)

    @classmethod
    def fit(cls, frame: pd.DataFrame, columns: Sequence[str]) -> "CovariateEncoder":
        levels: dict[str, list[str]] = {}
        for col in columns:
            if col not in frame.columns:
                raise MissingColumn(col, list(frame.columns))
            series = frame[col]
            if not pd.api.types.is_numeric_dtype(series) and not pd.api.types.is_bool_dtype(series):
                levels[col] = sorted(series.dropna().astype(str).unique().tolist())
        return cls(columns=list(columns), levels=levels)

    @property
    def names(self) -> list[str]:
        out: list[str] = []
        for col in self.columns:
            out.extend(self.term_columns(col))
        return out

    def term_columns(self, column: str) -> list[str]:
        if column in self.levels:
            return [f"{column}{lvl}" for lvl in self.levels[column][1:]]
        return [column]

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        blocks: list[np.ndarray] = []
        for col in self.columns:
            if col not in frame.columns:
                raise MissingColumn(col, list(frame.columns))
            series = frame[col]
            if col in self.levels:
                values = series.astype(str).to_numpy()
                unknown = set(values) - set(self.levels[col])
                if series.isna().any() or unknown:
                    row = int(np.flatnonzero(series.isna() | ~series.astype(str).isin(self.levels[col]))[0]) + 1
                    raise InvariantViolation(row, f"unknown or missing level in '{col}'")
                for lvl in self.levels[col][1:]:
                    blocks.append((values == lvl).astype(float)[:, None])
            else:
                numeric = pd.to_numeric(series, errors="coerce").to_numpy(dtype=float)
                blocks.append(numeric[:, None])
        if not blocks:
            return np.zeros((len(frame), 0))
        return np.hstack(blocks)


@dataclass(frozen=True)
class DataSummary:
    observations: int
    events: int
    right_censored: int
    left_censored: int
    interval_censored: int
    delayed_entry: bool

    def percent(self, count: int) -> float:
        return 100.0 * count / self.observations if self.observations else 0.0


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Dataset:
    """
    Validated, immutable collection of survival records.

    Cluster labels are mapped to dense integer indices in sorted label order so
    the random-effect parameter layout is stable across runs.
    """

    def __init__(
        self,
        records: Iterable[SurvivalRecord],
        covariate_names: Sequence[str],
        factor_levels: dict[str, list[str]] | None = None,
        encoder: CovariateEncoder | None = None,
    ) -> None:
        self.records: tuple[SurvivalRecord, ...] = tuple(records)
        self.covariate_names: tuple[str, ...] = tuple(covariate_names)
        p = len(self.covariate_names)
        for i, rec in enumerate(self.records):
            if len(rec.covariates) != p:
                raise InvariantViolation(i + 1, f"expected {p} covariates, got {len(rec.covariates)}")

        factors = sorted({f for rec in self.records for f in rec.cluster_labels})
        levels = dict(factor_levels or {})
        for factor in factors:
            observed = sorted({rec.cluster_labels[factor] for rec in self.records if factor in rec.cluster_labels})
            levels.setdefault(factor, observed)
        self.factor_levels: dict[str, list[str]] = levels
        self.encoder = encoder or CovariateEncoder(columns=list(self.covariate_names))

        n = len(self.records)
        self.entry = _readonly(np.array([r.entry_time for r in self.records], dtype=float))
        self.time = _readonly(np.array([r.time for r in self.records], dtype=float))
        self.upper = _readonly(
            np.array([np.nan if r.upper_time is None else r.upper_time for r in self.records], dtype=float)
        )
        self.status = _readonly(np.array([int(r.status) for r in self.records], dtype=int))
        self.X = _readonly(
            np.array([r.covariates for r in self.records], dtype=float).reshape(n, p)
        )
        self._cluster_index: dict[str, np.ndarray] = {}
        for factor, lvls in self.factor_levels.items():
            lookup = {lvl: j for j, lvl in enumerate(lvls)}
            idx = []
            for i, rec in enumerate(self.records):
                label = rec.cluster_labels.get(factor)
                if label is None or label not in lookup:
                    raise InvariantViolation(i + 1, f"missing or unknown level for cluster factor '{factor}'")
                idx.append(lookup[label])
            self._cluster_index[factor] = _readonly(np.array(idx, dtype=int))

        if n and not (math.isfinite(self.t_max) and self.t_max > 0):
            raise InvariantViolation(None, "maximum observed time must be finite and positive")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def factors(self) -> list[str]:
        return list(self.factor_levels)

    def cluster_index(self, factor: str) -> np.ndarray:
        return self._cluster_index[factor]

    @property
    def group_ids(self) -> list[str | None]:
        return [r.group_id for r in self.records]

    @property
    def t_max(self) -> float:
        """Largest of all entry, event/censoring and upper interval times."""
        if not self.records:
            return float("nan")
        return float(np.nanmax(np.concatenate([self.time, self.upper, self.entry])))

    @property
    def has_delayed_entry(self) -> bool:
        return bool(np.any(self.entry > 0))

    @property
    def uncensored_times(self) -> np.ndarray:
        return self.time[self.status == CensoringStatus.EVENT]

    @property
    def total_followup(self) -> float:
        """Person-time at risk, T in the log(E/T) crude rate."""
        return float(np.sum(self.time - self.entry))

    def summary(self) -> DataSummary:
        counts = np.bincount(self.status, minlength=4) if self.n else np.zeros(4, dtype=int)
        return DataSummary(
            observations=self.n,
            events=int(counts[CensoringStatus.EVENT]),
            right_censored=int(counts[CensoringStatus.RIGHT_CENSORED]),
            left_censored=int(counts[CensoringStatus.LEFT_CENSORED]),
            interval_censored=int(counts[CensoringStatus.INTERVAL_CENSORED]),
            delayed_entry=self.has_delayed_entry,
        )

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            [self.records[i] for i in indices],
            self.covariate_names,
            factor_levels=self.factor_levels,
            encoder=self.encoder,
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if other.covariate_names != self.covariate_names:
            raise InvariantViolation(None, "cannot concatenate datasets with different covariates")
        levels = {
            f: sorted(set(self.factor_levels.get(f, [])) | set(other.factor_levels.get(f, [])))
            for f in set(self.factor_levels) | set(other.factor_levels)
        }
        return Dataset(self.records + other.records, self.covariate_names, levels, self.encoder)

    def to_frame(self) -> pd.DataFrame:
        """Flat frame in the on-disk schema (entry, time, upper, status, covariates, clusters)."""
        frame = pd.DataFrame(
            {
                "entry": self.entry,
                "time": self.time,
                "upper": self.upper,
                "status": self.status,
            }
        )
        for j, name in enumerate(self.covariate_names):
            frame[name] = self.X[:, j]
        for factor in self.factor_levels:
            frame[factor] = [r.cluster_labels.get(factor) for r in self.records]
        if any(r.group_id is not None for r in self.records):
            frame["id"] = self.group_ids
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: DatasetSchema) -> "Dataset":
        """Validate a raw frame against ``schema`` and build the dataset."""
        required = [schema.time, schema.status, *schema.clusters]
        for col in (schema.entry, schema.upper, schema.id):
            if col is not None:
                required.append(col)
        for col in required:
            if col not in frame.columns:
                raise MissingColumn(col, list(frame.columns))

        encoder = CovariateEncoder.fit(frame, schema.covariates)
        numeric_cols = [schema.time, schema.status]
        numeric_cols += [c for c in (schema.entry, schema.upper) if c is not None]
        numeric_cols += [c for c in schema.covariates if c not in encoder.levels]
        parsed: dict[str, np.ndarray] = {}
        for col in numeric_cols:
            raw = frame[col]
            values = pd.to_numeric(raw, errors="coerce")
            bad = values.isna() & raw.notna() & (raw.astype(str).str.strip() != "")
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
                raise ParseFailure(row, f"column '{col}' value {raw.iloc[row - 1]!r} is not numeric")
            parsed[col] = values.to_numpy(dtype=float)

        covariate_frame = frame[schema.covariates].copy() if schema.covariates else frame.iloc[:, :0]
        for col in schema.covariates:
            if col in parsed:
                covariate_frame[col] = parsed[col]
        X = encoder.transform(covariate_frame)

        records: list[SurvivalRecord] = []
        for i in range(len(frame)):
            row = i + 1
            status_value = parsed[schema.status][i]
            if not np.isfinite(status_value) or status_value not in (0, 1, 2, 3):
                raise InvariantViolation(row, f"status must be one of 0/1/2/3, got {status_value}")
            if not np.isfinite(parsed[schema.time][i]):
                raise InvariantViolation(row, "time is missing")
            entry = parsed[schema.entry][i] if schema.entry else 0.0
            if not np.isfinite(entry):
                entry = 0.0
            upper = parsed[schema.upper][i] if schema.upper else np.nan
            if not np.all(np.isfinite(X[i])):
                raise InvariantViolation(row, "covariates contain missing values")
            labels = {}
            for factor in schema.clusters:
                label = frame[factor].iloc[i]
                if pd.isna(label):
                    raise InvariantViolation(row, f"missing cluster label for '{factor}'")
                labels[factor] = str(label)
            try:
                records.append(
                    SurvivalRecord(
                        entry_time=float(entry),
                        time=float(parsed[schema.time][i]),
                        upper_time=None if np.isnan(upper) else float(upper),
                        status=CensoringStatus(int(status_value)),
                        covariates=tuple(float(v) for v in X[i]),
                        cluster_labels=labels,
                        group_id=None if schema.id is None else str(frame[schema.id].iloc[i]),
                    )
                )
            except ValidationError as e:
                reason = "; ".join(err["msg"] for err in e.errors())
                raise InvariantViolation(row, reason) from e
        return cls(records, encoder.names, encoder=encoder)


def load_dataset(path: str | Path, schema: DatasetSchema) -> Dataset:
    """Read a CSV file (header row required) and validate it against ``schema``."""
    path = Path(path)
    if not path.exists():
        raise MissingColumn(f"<file {path}>")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    frame = frame.apply(lambda s: s.str.strip() if s.dtype == object else s)
    for col in frame.columns:
        converted = pd.to_numeric(frame[col], errors="coerce")
        if converted.notna().sum() == frame[col].notna().sum():
            frame[col] = converted
    dataset = Dataset.from_frame(frame, schema)
    s = dataset.summary()
    logger.info(
        f"[data] Loaded {s.observations:,} records from {path.name}: "
        f"{s.events} events, {s.right_censored} right, {s.left_censored} left, "
        f"{s.interval_censored} interval censored"
    )
    return dataset


@dataclass(frozen=True)
class KaplanMeierCurve:
    times: np.ndarray
    survival: np.ndarray

    def at(self, t: float | np.ndarray) -> np.ndarray:
        """Right-continuous step evaluation; 1 before the first event time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        pos = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[1.0], self.survival])
        return padded[pos]


def kaplan_meier(data: Dataset) -> KaplanMeierCurve:
    """
    Product-limit estimate respecting delayed entry.

    A record is at risk at t when entry < t <= time. Deaths at t are processed
    before censorings at t, so records censored at t remain in the risk set.
    """
    if np.any(data.status >= CensoringStatus.LEFT_CENSORED):
        raise UnsupportedStatus("Kaplan-Meier requires right-censored or event records only")
    event_times = np.unique(data.time[data.status == CensoringStatus.EVENT])
    survival = np.empty_like(event_times)
    s = 1.0
    for k, t in enumerate(event_times):
        at_risk = np.count_nonzero((data.entry < t) & (data.time >= t))
        deaths = np.count_nonzero((data.time == t) & (data.status == CensoringStatus.EVENT))
        s *= 1.0 - deaths / at_risk
        survival[k] = s
    return KaplanMeierCurve(times=event_times, survival=survival)

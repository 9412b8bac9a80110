"""
Command-line front end.

Usage:
    python -m bayesurv fit --data pbc.csv --formula "surv(time, status) ~ trt" --basehaz ms --out fits/ms
    python -m bayesurv predict --fit fits/ms --newdata new.csv --times 0 --extrapolate --edist 5
    python -m bayesurv check --fit fits/ms --grid-size 20
    python -m bayesurv compare fits/exp fits/weibull fits/ms
    python -m bayesurv simulate --design design.json --out sim.csv

Settings precedence: command-line flag > JSON model config (--config) >
BAYESURV_* environment / .env > built-in default.
"""
from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
import typer
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from rich.console import Console
from rich.table import Table

from . import __version__
from .bundle import FitBundle, read_bundle, write_bundle
from .config import settings
from .data import Dataset, load_dataset
from .errors import BayesurvError, ConfigError, MissingColumn
from .evaluation import (
    UnitDefinition,
    compare,
    log_lik_matrix,
    loo,
    posterior_summary,
    print_table,
    random_effect_sds,
    waic,
)
from .formula import parse_formula
from .model import BASELINE_CHOICES, ModelSpec, SplineOptions, build_model_spec
from .predict import (
    NewData,
    PredictionRequest,
    baseline_hazard_curve,
    predict_curves,
    ps_check,
    tve_curve,
)
from .priors import PriorConfig
from .sampler import PosteriorDraws, SamplerConfig, sample
from .simulate import SimDesign, simulate, simulate_frailty

app = typer.Typer(help="Bayesian parametric survival models", no_args_is_help=True)
console = Console()


def _configure_logging() -> None:
    logger.remove()
    logger.add(
        sys.stderr,
        level=settings.log_level,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
        colorize=True,
    )
    logger.add(
        f"{settings.log_dir}/bayesurv_{{time:YYYY-MM-DD}}.log",
        level="DEBUG",
        rotation="1 day",
        retention="7 days",
    )


class ModelConfig(BaseModel):
    """JSON model config; every key can be overridden by its command-line flag."""

    model_config = ConfigDict(extra="forbid")

    formula: str | None = None
    basehaz: str = "ms"
    basehaz_ops: SplineOptions = Field(default_factory=SplineOptions)
    qnodes: int | None = None
    quadrature: str = "auto"
    prior_only: bool = False
    id_column: str | None = None
    priors: PriorConfig | None = None
    sampler: dict[str, Any] = Field(default_factory=dict)


def _load_model_config(path: Path | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    if not path.exists():
        raise MissingColumn(f"<file {path}>")
    try:
        return ModelConfig.model_validate_json(path.read_text())
    except ValidationError as e:
        err = e.errors()[0]
        raise ConfigError(f"{path}: {'.'.join(str(x) for x in err['loc'])}: {err['msg']}") from e


def _sampler_config(cfg: ModelConfig, **flags: Any) -> SamplerConfig:
    values = {**cfg.sampler, **{k: v for k, v in flags.items() if v is not None}}
    try:
        return SamplerConfig(**values)
    except ValidationError as e:
        err = e.errors()[0]
        raise ConfigError(f"sampler setting {'.'.join(str(x) for x in err['loc'])}: {err['msg']}") from e


def _float_list(text: str | None) -> list[float] | None:
    if text is None or text.strip() == "":
        return None
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of numbers, got '{text}'") from e


def _fail(e: BayesurvError) -> None:
    console.print(f"[red]✗ {type(e).__name__}: {e}[/red]")
    raise typer.Exit(e.exit_code)


def _diagnostics(draws: PosteriorDraws) -> dict[str, Any]:
    table = posterior_summary(draws)
    per_chain = [float(draws.step_size[draws.chain_id == c][0]) for c in np.unique(draws.chain_id)]
    rhat = table["rhat"].replace([np.inf], np.nan)
    return {
        "draws": draws.n_draws,
        "chains": draws.n_chains,
        "divergent": int(draws.diverging.sum()),
        "divergence_fraction": draws.divergence_fraction,
        "max_treedepth_hits": int(np.sum(draws.tree_depth >= draws.max_treedepth)),
        "step_size": per_chain,
        "max_rhat": None if rhat.isna().all() else float(rhat.max()),
        "min_ess": None if table["ess"].isna().all() else float(table["ess"].min()),
        "parameters": {
            name: {
                "rhat": None if not math.isfinite(row.rhat) else float(row.rhat),
                "ess": None if not math.isfinite(row.ess) else float(row.ess),
            }
            for name, row in table.iterrows()
        },
    }


def _fmt(value: float) -> str:
    return "NA" if not math.isfinite(value) else f"{value:.2f}"


def print_fit(spec: ModelSpec, data: Dataset, draws: PosteriorDraws) -> None:
    s = data.summary()
    console.print(f"\n[bold cyan]bayesurv {__version__}[/bold cyan]")
    console.print(f" baseline hazard: {spec.baseline_impl.label}")
    console.print(f" formula:         {spec.formula}")
    console.print(f" observations:    {s.observations}")
    console.print(f" events:          {s.events} ({s.percent(s.events):.0f}%)")
    console.print(f" right censored:  {s.right_censored} ({s.percent(s.right_censored):.0f}%)")
    if s.left_censored:
        console.print(f" left censored:   {s.left_censored} ({s.percent(s.left_censored):.0f}%)")
    if s.interval_censored:
        console.print(f" interval cens.:  {s.interval_censored} ({s.percent(s.interval_censored):.0f}%)")
    console.print(f" delayed entry:   {'yes' if s.delayed_entry else 'no'}")

    ratio = "exp(Median)" if not spec.is_aft else "exp(Median) [time ratio]"
    table = Table(show_header=True, header_style="bold")
    table.add_column("", style="cyan")
    table.add_column("Median", justify="right")
    table.add_column("MAD_SD", justify="right")
    table.add_column(ratio, justify="right")
    for name, row in print_table(draws, spec).iterrows():
        table.add_row(name, _fmt(row["Median"]), _fmt(row["MAD_SD"]), _fmt(row["exp(Median)"]))
    console.print(table)

    sds = random_effect_sds(draws, spec)
    if not sds.empty:
        re_table = Table(title="Error terms", show_header=True, header_style="bold")
        re_table.add_column("Groups", style="cyan")
        re_table.add_column("Name")
        re_table.add_column("Std.Dev.", justify="right")
        for _, row in sds.iterrows():
            re_table.add_row(row["group"], row["name"], _fmt(row["std_dev"]))
        console.print(re_table)
        levels = ", ".join(f"{f}: {len(v)}" for f, v in spec.factor_levels.items())
        console.print(f" Num. levels: {levels}")
    console.print(f"\n [dim]{draws.n_draws:,} draws, {int(draws.diverging.sum())} divergent[/dim]\n")


@app.command()
def fit(
    data: Path = typer.Option(..., "--data", help="CSV file with a header row"),
    formula: Optional[str] = typer.Option(None, "--formula", "-f", help='e.g. "surv(time, status) ~ trt + (1 | site)"'),
    basehaz: Optional[str] = typer.Option(None, "--basehaz", help=" | ".join(BASELINE_CHOICES)),
    basehaz_degree: Optional[int] = typer.Option(None, "--basehaz-degree"),
    basehaz_knots: Optional[str] = typer.Option(None, "--basehaz-knots", help="comma-separated internal knots"),
    basehaz_df: Optional[int] = typer.Option(None, "--basehaz-df"),
    qnodes: Optional[int] = typer.Option(None, "--qnodes", help="Gauss-Kronrod nodes: 7, 11 or 15"),
    chains: Optional[int] = typer.Option(None, "--chains"),
    iters: Optional[int] = typer.Option(None, "--iters"),
    warmup: Optional[int] = typer.Option(None, "--warmup"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    target_accept: Optional[float] = typer.Option(None, "--target-accept"),
    max_treedepth: Optional[int] = typer.Option(None, "--max-treedepth"),
    n_jobs: Optional[int] = typer.Option(None, "--n-jobs", help="chains run in this many processes"),
    prior_only: bool = typer.Option(False, "--prior-only", help="sample the prior predictive distribution"),
    id_column: Optional[str] = typer.Option(None, "--id", help="subject id column (start/stop data)"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON model config"),
    out: Path = typer.Option(Path("fit"), "--out", "-o", help="fit bundle directory"),
) -> None:
    """Fit a model and write a fit bundle."""
    _configure_logging()
    try:
        cfg = _load_model_config(config)
        text = formula or cfg.formula
        if not text:
            raise ConfigError("a formula is required (--formula or the config's 'formula')")
        ast = parse_formula(text)
        schema = ast.schema(id_column or cfg.id_column)
        dataset = load_dataset(data, schema)

        knots = _float_list(basehaz_knots)
        opts = cfg.basehaz_ops.model_dump(exclude_none=True)
        opts.update({k: v for k, v in {"degree": basehaz_degree, "df": basehaz_df, "knots": knots}.items() if v is not None})
        spec = build_model_spec(
            dataset,
            basehaz or cfg.basehaz,
            basehaz=SplineOptions.parse(**opts),
            tve=ast.tve_options(dataset.encoder),
            random_effects=ast.random_effect_specs(dataset.encoder),
            prior_config=cfg.priors,
            qnodes=qnodes or cfg.qnodes or settings.qnodes,
            prior_only=prior_only or cfg.prior_only,
            quadrature=cfg.quadrature,
            formula=text,
        )
        sampler_cfg = _sampler_config(
            cfg,
            chains=chains,
            iters=iters,
            warmup=warmup,
            seed=seed,
            target_accept=target_accept,
            max_treedepth=max_treedepth,
            n_jobs=n_jobs,
        )
        draws = sample(spec, dataset, sampler_cfg)
        diagnostics = _diagnostics(draws)
        write_bundle(
            out,
            spec,
            draws,
            diagnostics,
            encoder=dataset.encoder,
            data_schema=schema,
            data_summary={**asdict(dataset.summary()), "data_path": str(data.resolve())},
            sampler=sampler_cfg.model_dump(),
        )
    except BayesurvError as e:
        _fail(e)
    print_fit(spec, dataset, draws)
    if diagnostics["max_rhat"] is not None and diagnostics["max_rhat"] > 1.05:
        console.print(f"[yellow]⚠ max Rhat {diagnostics['max_rhat']:.3f}; chains may not have converged[/yellow]")
    console.print(f"[green]✓ Fit bundle written to {out}[/green]")


def _recorded_data_path(bundle: FitBundle, override: Path | None) -> Path:
    if override is not None:
        return override
    recorded = bundle.document.data_summary.get("data_path")
    if not recorded:
        raise ConfigError("no data file given and none recorded in the fit bundle")
    return Path(recorded)


def _read_frame(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise MissingColumn(f"<file {path}>")
    return pd.read_csv(path)


@app.command()
def predict(
    fit_dir: Path = typer.Option(..., "--fit", help="fit bundle directory"),
    newdata: Optional[Path] = typer.Option(None, "--newdata", help="CSV of covariate rows (default: the fitted data)"),
    type_: str = typer.Option("surv", "--type", help="surv | cumhaz | haz | cdf | log* variants | basehaz | tve"),
    times: Optional[str] = typer.Option(None, "--times", help="comma-separated prediction times"),
    extrapolate: bool = typer.Option(False, "--extrapolate", help="predict on a grid forward from the first time"),
    edist: Optional[float] = typer.Option(None, "--edist", help="extrapolation distance"),
    grid_size: Optional[int] = typer.Option(None, "--grid-size"),
    condition_time: Optional[float] = typer.Option(None, "--condition-time", help="condition on survival to this time"),
    standardise: bool = typer.Option(False, "--standardise", help="average over the newdata rows"),
    covariate: Optional[str] = typer.Option(None, "--covariate", help="covariate for --type tve"),
    level: Optional[float] = typer.Option(None, "--level", help="credible level"),
    id_column: Optional[str] = typer.Option(None, "--id"),
    out: Path = typer.Option(Path("predictions.csv"), "--out", "-o"),
) -> None:
    """Posterior predictive curves as CSV (id, cond_time, time, median, ci_lb, ci_ub)."""
    _configure_logging()
    try:
        bundle = read_bundle(fit_dir)
        spec = bundle.spec
        level = settings.credible_level if level is None else level
        grid = grid_size or settings.grid_size
        time_list = _float_list(times)
        if type_ in ("basehaz", "tve"):
            pts = np.asarray(time_list) if time_list and not extrapolate else np.linspace(0.0, spec.t_max, grid + 1)[1:]
            if type_ == "basehaz":
                frame = baseline_hazard_curve(bundle.draws, spec, pts, level)
            else:
                if covariate is None:
                    raise ConfigError("--type tve needs --covariate")
                frame = tve_curve(bundle.draws, spec, covariate, pts, level)
            frame.to_csv(out, index=False)
            console.print(f"[green]✓ {len(frame)} rows written to {out}[/green]")
            return
        schema = bundle.document.data_schema
        path = _recorded_data_path(bundle, newdata)
        rows = NewData.from_frame(_read_frame(path), spec, bundle.encoder, id_column or (schema.id if schema else None))
        req = PredictionRequest(
            newdata=rows,
            quantity=type_,
            times=time_list,
            condition_time=condition_time,
            standardise=standardise,
            credible_level=level,
            extrapolate=extrapolate,
            edist=edist,
            grid_size=grid,
        )
        result = predict_curves(bundle.draws, spec, req)
        result.to_csv(out)
    except BayesurvError as e:
        _fail(e)
    console.print(f"[bold]prediction type:[/bold] {req.quantity.label}")
    console.print(result.rows.head(10).to_string(index=False))
    console.print(f"[green]✓ {len(result.rows):,} rows written to {out}[/green]")


@app.command()
def check(
    fit_dir: Path = typer.Option(..., "--fit", help="fit bundle directory"),
    data: Optional[Path] = typer.Option(None, "--data", help="default: the fitted data"),
    grid_size: Optional[int] = typer.Option(None, "--grid-size"),
    out: Path = typer.Option(Path("ps_check.csv"), "--out", "-o"),
) -> None:
    """Standardised posterior predictive survival next to the Kaplan-Meier curve."""
    _configure_logging()
    try:
        bundle = read_bundle(fit_dir)
        schema = bundle.document.data_schema
        if schema is None:
            raise ConfigError("fit bundle has no data schema")
        dataset = load_dataset(_recorded_data_path(bundle, data), schema)
        result = ps_check(bundle.draws, bundle.spec, dataset, grid_size)
        result.curves.to_csv(out, index=False)
    except BayesurvError as e:
        _fail(e)
    console.print(f"max |predicted median - Kaplan-Meier| = {result.max_discrepancy:.4f}")
    console.print(f"[green]✓ {len(result.curves)} grid points written to {out}[/green]")


@app.command(name="compare")
def compare_command(
    fits: list[Path] = typer.Argument(..., help="two or more fit bundle directories"),
    data: Optional[Path] = typer.Option(None, "--data", help="evaluate every model on this file"),
    criterion: str = typer.Option("waic", "--criterion", help="waic | loo"),
    unit: str = typer.Option("row", "--unit", help="row | group (sum rows sharing an id)"),
) -> None:
    """Rank fitted models by expected log predictive density."""
    _configure_logging()
    try:
        if criterion not in ("waic", "loo"):
            raise ConfigError(f"unknown criterion '{criterion}' (waic | loo)")
        try:
            unit_def = UnitDefinition(unit)
        except ValueError as e:
            raise ConfigError(f"unknown unit '{unit}' (row | group)") from e
        results = []
        for path in fits:
            bundle = read_bundle(path)
            schema = bundle.document.data_schema
            if schema is None:
                raise ConfigError(f"fit bundle {path} has no data schema")
            dataset = load_dataset(_recorded_data_path(bundle, data), schema)
            ll = log_lik_matrix(bundle.draws, bundle.spec, dataset, unit_def)
            results.append((path.name, waic(ll) if criterion == "waic" else loo(ll)))
        table = compare(results)
    except BayesurvError as e:
        _fail(e)

    out = Table(show_header=True, header_style="bold")
    out.add_column("model", style="cyan")
    out.add_column("elpd_diff", justify="right")
    out.add_column("se_diff", justify="right")
    for name, row in table.iterrows():
        out.add_row(str(name), f"{row['elpd_diff']:.1f}", f"{row['se_diff']:.1f}")
    console.print(out)


@app.command(name="simulate")
def simulate_command(
    design: Path = typer.Option(..., "--design", help="JSON simulation design"),
    n: Optional[int] = typer.Option(None, "--n", help="number of subjects (designs without frailty)"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    covariates: Optional[Path] = typer.Option(None, "--covariates", help="CSV covariate table"),
    out: Path = typer.Option(Path("simulated.csv"), "--out", "-o"),
) -> None:
    """Simulate a dataset in the input CSV schema."""
    _configure_logging()
    try:
        if not design.exists():
            raise MissingColumn(f"<file {design}>")
        try:
            sim = SimDesign.model_validate_json(design.read_text())
        except ValidationError as e:
            err = e.errors()[0]
            raise ConfigError(f"{design}: {'.'.join(str(x) for x in err['loc'])}: {err['msg']}") from e
        if n is not None:
            sim = sim.model_copy(update={"n": n})
        table = _read_frame(covariates) if covariates is not None else None
        if sim.frailty is not None:
            dataset = simulate_frailty(sim, seed=seed, covariate_table=table)
        else:
            dataset = simulate(sim, table, seed)
        frame = dataset.to_frame().drop(columns=["entry", "upper"])
        frame.to_csv(out, index=False)
    except BayesurvError as e:
        _fail(e)
    s = dataset.summary()
    console.print(f"[green]✓ {s.observations:,} subjects ({s.events} events) written to {out}[/green]")


@app.command()
def version() -> None:
    console.print(json.dumps({"bayesurv": __version__}))


if __name__ == "__main__":
    app()

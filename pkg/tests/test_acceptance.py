"""
End-to-end fits on simulated data. These sample real posteriors and take
minutes; run them with ``pytest -m slow``.
"""
import math

import numpy as np
import pytest

from bayesurv.evaluation import compare, log_lik_matrix, posterior_summary, rhat_ess, waic
from bayesurv.model import SplineOptions, build_model_spec
from bayesurv.predict import ps_check, tve_curve
from bayesurv.predictor import RandomEffectSpec
from bayesurv.sampler import SamplerConfig, sample
from bayesurv.simulate import FrailtySpec, SimBaseline, SimDesign, TdeFunction, simulate, simulate_frailty

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def frailty_fit():
    design = SimDesign(
        baseline=SimBaseline(dist="exponential", lambdas=0.1),
        betas={"trt": 0.3},
        max_time=15.0,
        frailty=FrailtySpec(sd=1.0, n_clusters=20, n_per_cluster=10),
        seed=2017,
    )
    data = simulate_frailty(design)
    spec = build_model_spec(data, "exp", random_effects=[RandomEffectSpec("site")])
    draws = sample(spec, data, SamplerConfig(chains=4, warmup=1000, iters=1000, seed=1, n_jobs=1))
    return spec, data, draws


def test_frailty_recovery(frailty_fit):
    spec, _, draws = frailty_fit
    trt = draws.column("trt")
    assert abs(np.median(trt) - 0.3) < 2.0 * np.std(trt)
    assert 0.05 <= math.exp(np.median(draws.column("(Intercept)"))) <= 0.2
    sd = np.sqrt(draws.column("Sigma[site:(Intercept),(Intercept)]"))
    assert 0.6 <= np.median(sd) <= 1.6
    rhat = posterior_summary(draws)["rhat"]
    assert (rhat.dropna() < 1.05).all()
    assert draws.divergence_fraction < 0.01


def test_predictive_survival_tracks_kaplan_meier(frailty_fit):
    spec, data, draws = frailty_fit
    assert ps_check(draws, spec, data, grid_size=20).max_discrepancy < 0.05


def test_piecewise_hazard_ratio():
    design = SimDesign(
        baseline=SimBaseline(dist="weibull", lambdas=0.15, gammas=1.1),
        betas={"trt": -0.4},
        tde={"trt": 0.8},
        tde_fn=TdeFunction(kind="step", threshold=4.0),
        max_time=15.0,
        n=1000,
        seed=54321,
    )
    data = simulate(design)
    spec = build_model_spec(data, "weibull", tve={"trt": SplineOptions(degree=0, knots=[4.0])})
    draws = sample(spec, data, SamplerConfig(chains=2, warmup=500, iters=500, seed=3, n_jobs=1))
    curve = tve_curve(draws, spec, "trt", [2.0, 8.0])
    first, second = curve.iloc[0], curve.iloc[1]
    assert first["ci_lb"] <= math.exp(-0.4) <= first["ci_ub"]
    assert second["ci_lb"] <= math.exp(0.4) <= second["ci_ub"]


def test_waic_prefers_the_true_shape():
    design = SimDesign(baseline=SimBaseline(dist="weibull", lambdas=0.05, gammas=2.0), betas={"trt": 0.5}, max_time=8.0, n=400, seed=7)
    data = simulate(design)
    cfg = SamplerConfig(chains=2, warmup=500, iters=500, seed=5, n_jobs=1)
    results = {}
    for baseline in ("exp", "weibull", "ms"):
        spec = build_model_spec(data, baseline)
        results[baseline] = waic(log_lik_matrix(sample(spec, data, cfg), spec, data))
    table = compare(results)
    assert table.index[-1] == "exp"
    assert table.loc["exp", "elpd_diff"] < -4.0 * table.loc["exp", "se_diff"]


def test_prior_predictive_moments():
    data = simulate(SimDesign(baseline=SimBaseline(dist="weibull", lambdas=0.1, gammas=1.2), betas={"trt": 0.0}, max_time=10.0, n=50, seed=1))
    spec = build_model_spec(data, "weibull", prior_only=True)
    draws = sample(spec, data, SamplerConfig(chains=4, warmup=500, iters=1000, seed=8, n_jobs=1))

    def within_mc_error(name, mean):
        x = draws.column(name)
        ess = rhat_ess(draws.by_chain(name)).ess
        assert abs(x.mean() - mean) < 3.0 * x.std() / math.sqrt(ess)

    within_mc_error("trt", 0.0)
    within_mc_error("weibull-shape", 2.0 * math.sqrt(2.0 / math.pi))
    assert np.std(draws.column("trt")) == pytest.approx(2.5, rel=0.1)

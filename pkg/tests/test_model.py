"""
Unit tests for model specification, parameter layout and the log posterior.
"""
import math

import numpy as np
import pytest
from scipy.integrate import quad

from bayesurv.data import CensoringStatus, Dataset
from bayesurv.errors import AmbiguousSplineOptions, ConfigError, NonFiniteGradient, NonFiniteLogLik, OutOfSupport
from bayesurv.model import (
    LikelihoodDesign,
    ModelSpec,
    NaturalParams,
    ParameterLayout,
    ParameterVector,
    Posterior,
    SplineOptions,
    build_model_spec,
    gradient,
    log_likelihood,
    log_likelihood_record,
    log_posterior,
)
from bayesurv.predictor import RandomEffectSpec, TveSpec
from bayesurv.priors import PriorAssignment
from bayesurv.splines import BasisKind, KnotVector, SplineConfig, bspline_eval
from tests.conftest import LOG_INTERVAL_1_2, central_difference, record


class TestLikelihoodIdentities:
    def test_event(self, exp_spec, unit_params):
        assert log_likelihood_record(exp_spec, unit_params, record(1.0, CensoringStatus.EVENT)) == pytest.approx(-1.0, abs=1e-12)

    def test_right_censored(self, exp_spec, unit_params):
        assert log_likelihood_record(exp_spec, unit_params, record(2.0, CensoringStatus.RIGHT_CENSORED)) == pytest.approx(-2.0, abs=1e-12)

    def test_delayed_entry(self, exp_spec, unit_params):
        rec = record(2.0, CensoringStatus.EVENT, entry=1.0)
        assert log_likelihood_record(exp_spec, unit_params, rec) == pytest.approx(-1.0, abs=1e-12)

    def test_interval(self, exp_spec, unit_params):
        rec = record(1.0, CensoringStatus.INTERVAL_CENSORED, upper=2.0)
        assert log_likelihood_record(exp_spec, unit_params, rec) == pytest.approx(LOG_INTERVAL_1_2, abs=1e-12)

    def test_left_censored(self, exp_spec, unit_params):
        rec = record(1.0, CensoringStatus.LEFT_CENSORED)
        assert log_likelihood_record(exp_spec, unit_params, rec) == pytest.approx(math.log1p(-math.exp(-1.0)), abs=1e-12)

    def test_gompertz_survival(self):
        spec = ModelSpec(baseline="gompertz")
        params = NaturalParams(intercept=0.0, beta=np.zeros(0), aux=np.array([1.0]))
        ll = log_likelihood_record(spec, params, record(1.0, CensoringStatus.RIGHT_CENSORED))
        assert ll == pytest.approx(-(math.e - 1.0), abs=1e-12)

    def test_non_finite_record_raises(self, exp_spec):
        params = NaturalParams(intercept=800.0, beta=np.zeros(0), aux=np.zeros(0))
        data = Dataset([record(1.0, CensoringStatus.EVENT), record(2.0, CensoringStatus.RIGHT_CENSORED)], [])
        with pytest.raises(NonFiniteLogLik) as exc:
            log_likelihood(exp_spec, params, data)
        assert exc.value.record == 0
        assert exc.value.payload["time"] == 1.0


@pytest.mark.parametrize("baseline, aux", [("exp", []), ("weibull", [1.3]), ("gompertz", [0.4])])
def test_splitting_a_record_telescopes(baseline, aux):
    rng = np.random.default_rng(5)
    spec = ModelSpec(baseline=baseline, covariate_names=("x",))
    for _ in range(20):
        params = NaturalParams(intercept=float(rng.normal()), beta=rng.normal(size=1), aux=np.array(aux))
        x = (float(rng.normal()),)
        entry, stop = sorted(rng.uniform(0.0, 4.0, size=2))
        split = float(rng.uniform(entry + 1e-3, stop - 1e-3)) if stop - entry > 2e-3 else None
        if split is None:
            continue
        status = int(rng.choice([0, 1]))
        whole = Dataset([record(stop, status, entry=entry, x=x)], ["x"])
        parts = Dataset([record(split, 0, entry=entry, x=x), record(stop, status, entry=split, x=x)], ["x"])
        assert log_likelihood(spec, params, whole).sum() == pytest.approx(log_likelihood(spec, params, parts).sum(), abs=1e-10)


def test_quadrature_path_matches_closed_form(small_dataset):
    params = NaturalParams(intercept=-0.3, beta=np.array([0.5]), aux=np.array([2.0]))
    closed = ModelSpec(baseline="weibull", covariate_names=("trt",))
    numeric = ModelSpec(baseline="weibull", covariate_names=("trt",), quadrature="always")
    assert numeric.uses_quadrature
    np.testing.assert_allclose(log_likelihood(numeric, params, small_dataset), log_likelihood(closed, params, small_dataset), rtol=1e-10)


def test_bspline_hazard_is_zero_below_lower_knot():
    cfg = SplineConfig(degree=3, knots=KnotVector(lower=2.0, upper=6.0), basis_kind=BasisKind.BSPLINE)
    spec = ModelSpec(baseline="bs", baseline_spline=cfg)
    aux = np.array([-0.5, 0.3, 0.2])
    params = NaturalParams(intercept=-0.4, beta=np.zeros(0), aux=aux)
    times = [1.0, 2.0, 2.5, 3.0, 4.5, 6.0]
    ll = log_likelihood(spec, params, Dataset([record(t, CensoringStatus.RIGHT_CENSORED) for t in times], []))
    assert ll[0] == 0.0 and ll[1] == pytest.approx(0.0, abs=1e-14)
    assert np.all(np.diff(ll[1:]) < 0.0)
    hazard = lambda u: math.exp(-0.4 + float(bspline_eval(u, cfg)[1:] @ aux))
    for t, value in zip(times[2:], ll[2:]):
        assert -value == pytest.approx(quad(hazard, 2.0, t, epsabs=1e-13)[0], rel=1e-8)


def test_unseen_cluster_level_gets_zero_effect(clustered_dataset):
    spec = build_model_spec(clustered_dataset, "exp", random_effects=[RandomEffectSpec("site")])
    newcomer = Dataset([record(2.0, CensoringStatus.EVENT, x=(1.0,), clusters={"site": "z"})], ["trt"])
    base = NaturalParams(intercept=0.1, beta=np.array([0.2]), aux=np.zeros(0))
    with_b = NaturalParams(
        intercept=0.1,
        beta=np.array([0.2]),
        aux=np.zeros(0),
        random_effects={"site": np.array([[1.0], [2.0], [3.0]])},
        covariances={"site": np.eye(1)},
    )
    plain = ModelSpec(baseline="exp", covariate_names=("trt",))
    assert LikelihoodDesign(spec, newcomer).log_lik(with_b)[0] == pytest.approx(log_likelihood(plain, base, newcomer)[0])


class TestSpecification:
    def test_default_mspline_df(self, small_dataset):
        spec = build_model_spec(small_dataset, "ms")
        assert spec.baseline_spline.n_basis == 6
        assert spec.baseline_spline.basis_kind is BasisKind.MSPLINE
        assert len(spec.baseline_spline.knots.internal) == 2

    def test_default_bspline_df(self, small_dataset):
        spec = build_model_spec(small_dataset, "bs")
        assert spec.baseline_impl.n_aux(spec.baseline_spline) == 5
        assert spec.uses_quadrature

    def test_explicit_knots(self, small_dataset):
        spec = build_model_spec(small_dataset, "ms", basehaz=SplineOptions(knots=[2.0]))
        assert spec.baseline_spline.knots.internal == (2.0,)
        assert spec.baseline_spline.n_basis == 5

    def test_knot_outside_support(self, small_dataset):
        with pytest.raises(ConfigError):
            build_model_spec(small_dataset, "ms", basehaz=SplineOptions(knots=[9.0]))

    def test_df_and_knots_are_ambiguous(self):
        with pytest.raises(AmbiguousSplineOptions):
            SplineOptions(df=4, knots=[1.0])

    def test_df_too_small(self, small_dataset):
        with pytest.raises(ConfigError):
            build_model_spec(small_dataset, "ms", basehaz=SplineOptions(df=3))

    def test_unknown_baseline(self, small_dataset):
        with pytest.raises(ConfigError):
            build_model_spec(small_dataset, "lognormal")

    def test_tve_defaults(self, small_dataset):
        spec = build_model_spec(small_dataset, "weibull", tve={"trt": SplineOptions()})
        assert spec.tve_specs[0].n_coef == 3
        piecewise = build_model_spec(small_dataset, "weibull", tve={"trt": SplineOptions(degree=0, knots=[2.0])})
        assert piecewise.tve_specs[0].n_coef == 1

    def test_tve_unknown_covariate(self, small_dataset):
        with pytest.raises(ConfigError):
            build_model_spec(small_dataset, "weibull", tve={"age": SplineOptions()})

    def test_times_beyond_spline_support(self, small_dataset):
        spec = build_model_spec(small_dataset, "ms")
        with pytest.raises(OutOfSupport):
            LikelihoodDesign(spec, Dataset([record(6.0, CensoringStatus.EVENT, x=(0.0,))], ["trt"]))

    def test_covariate_means_recorded(self, small_dataset):
        assert build_model_spec(small_dataset, "exp").covariate_means == (0.5,)


@pytest.fixture
def rich_spec():
    ms = SplineConfig(degree=3, knots=KnotVector(lower=0.0, upper=10.0), basis_kind=BasisKind.MSPLINE)
    tve = TveSpec(
        covariate_index=0,
        covariate="x",
        spline=SplineConfig(degree=1, knots=KnotVector(lower=0.0, internal=(5.0,), upper=10.0)),
    )
    return ModelSpec(
        baseline="ms",
        covariate_names=("x",),
        baseline_spline=ms,
        tve_specs=(tve,),
        re_specs=(RandomEffectSpec("site", True, ("x",), (0,)),),
        factor_levels={"site": ("a", "b", "c")},
        covariate_means=(0.4,),
        priors=PriorAssignment(intercept_shift=-1.2),
    )


class TestLayout:
    def test_names(self, rich_spec):
        names = ParameterLayout(rich_spec).names
        assert names[:4] == ["(Intercept)", "x", "tve(x):1", "tve(x):2"]
        assert "m-splines-coef4" in names
        assert "smooth_sd[tve(x)]" in names
        assert "b[(Intercept) site:a]" in names and "b[x site:c]" in names
        assert names[-3:] == ["Sigma[site:(Intercept),(Intercept)]", "Sigma[site:x,(Intercept)]", "Sigma[site:x,x]"]

    def test_round_trip(self, rich_spec):
        layout = ParameterLayout(rich_spec)
        u = np.random.default_rng(9).normal(0.0, 0.7, size=layout.size)
        row = layout.to_row(u)
        assert row.size == len(layout.names)
        np.testing.assert_allclose(layout.unconstrain(layout.from_row(row)), u, atol=1e-9)

    def test_constrained_values(self, rich_spec):
        layout = ParameterLayout(rich_spec)
        values = ParameterVector(layout, np.zeros(layout.size)).constrained()
        coefs = [values[f"m-splines-coef{j}"] for j in range(1, 5)]
        assert sum(coefs) == pytest.approx(1.0)
        np.testing.assert_allclose(coefs, 0.25)
        assert values["(Intercept)"] == pytest.approx(-1.2)


class TestPosterior:
    def test_gradient_by_hand(self, flat_priors):
        spec = ModelSpec(baseline="exp", priors=flat_priors)
        data = Dataset([record(2.0, CensoringStatus.EVENT)], [])
        layout = ParameterLayout(spec)
        np.testing.assert_allclose(gradient(spec, ParameterVector(layout, np.zeros(1)), data), [-1.0])

    def test_single_record_additivity(self):
        spec = ModelSpec(baseline="exp")
        data = Dataset([record(2.0, CensoringStatus.EVENT)], [])
        value = log_posterior(spec, ParameterVector(ParameterLayout(spec), np.array([0.3])), data)
        ll = 0.3 - 2.0 * math.exp(0.3)
        prior = -0.5 * math.log(2 * math.pi) - math.log(20.0) - 0.5 * (0.3 / 20.0) ** 2
        assert value == pytest.approx(ll + prior)

    def test_prior_only_drops_likelihood(self, small_dataset):
        spec = build_model_spec(small_dataset, "weibull", prior_only=True)
        u = np.array([0.2, -0.4, 0.1])
        empty = Dataset([], ["trt"])
        assert Posterior(spec, small_dataset).log_density(u) == pytest.approx(Posterior(spec, empty).log_density(u))
        fitted = build_model_spec(small_dataset, "weibull")
        assert Posterior(fitted, small_dataset).log_density(u) != pytest.approx(Posterior(fitted, empty).log_density(u))

    def test_non_finite_gradient(self, exp_spec):
        data = Dataset([record(1.0, CensoringStatus.EVENT)], [])
        with pytest.raises(NonFiniteGradient):
            gradient(exp_spec, ParameterVector(ParameterLayout(exp_spec), np.array([800.0])), data)

    def test_out_of_range_point_is_minus_infinity(self, exp_spec):
        data = Dataset([record(1.0, CensoringStatus.EVENT)], [])
        value, grad = Posterior(exp_spec, data).value_and_grad(np.array([800.0]))
        assert value == -math.inf
        np.testing.assert_array_equal(grad, 0.0)


def _gradient_cases(small_dataset, clustered_dataset):
    return [
        (build_model_spec(small_dataset, "weibull"), small_dataset),
        (build_model_spec(small_dataset, "ms"), small_dataset),
        (build_model_spec(small_dataset, "bs", tve={"trt": SplineOptions()}), small_dataset),
        (build_model_spec(small_dataset, "weibull-aft", tve={"trt": SplineOptions(degree=1, df=2)}), small_dataset),
        (build_model_spec(clustered_dataset, "exp", random_effects=[RandomEffectSpec("site")]), clustered_dataset),
        (
            build_model_spec(
                clustered_dataset, "gompertz", random_effects=[RandomEffectSpec("site", True, ("trt",), (0,))]
            ),
            clustered_dataset,
        ),
    ]


def test_gradient_matches_finite_differences(small_dataset, clustered_dataset):
    rng = np.random.default_rng(21)
    for spec, data in _gradient_cases(small_dataset, clustered_dataset):
        posterior = Posterior(spec, data)
        for _ in range(5):
            u = rng.normal(0.0, 0.5, size=posterior.layout.size)
            value, grad = posterior.value_and_grad(u)
            assert math.isfinite(value)
            fd = central_difference(posterior.log_density, u)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-5)


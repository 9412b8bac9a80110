"""
Unit tests for prior densities and default prior assignment.
"""
import math

import numpy as np
import pytest
from pydantic import ValidationError

from bayesurv.data import Dataset
from bayesurv.errors import InvalidCholesky, InvalidSimplex, OutOfSupport
from bayesurv.model import build_model_spec
from bayesurv.priors import (
    CovariancePriorSpec,
    PriorConfig,
    PriorFamily,
    ScalarPrior,
    covariance_from_decomposition,
    crude_log_rate,
    decompose_covariance,
    log_prior_covariance,
    log_prior_random_walk,
    log_prior_scalar,
    logpdf_lkj_cholesky_factor,
    prior_summary,
)


class TestScalarPriors:
    def test_standard_normal_mode(self):
        prior = ScalarPrior(family=PriorFamily.NORMAL)
        assert log_prior_scalar(prior, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_half_normal_doubles_density(self):
        half = ScalarPrior(family=PriorFamily.HALF_NORMAL, scale=2.0)
        full = ScalarPrior(family=PriorFamily.NORMAL, scale=2.0)
        assert log_prior_scalar(half, 1.0) == pytest.approx(log_prior_scalar(full, 1.0) + math.log(2.0))

    def test_cauchy(self):
        prior = ScalarPrior(family=PriorFamily.CAUCHY, scale=2.0)
        assert log_prior_scalar(prior, 0.0) == pytest.approx(-math.log(2.0 * math.pi))

    def test_student_t_needs_df(self):
        with pytest.raises(ValidationError):
            ScalarPrior(family=PriorFamily.STUDENT_T)

    def test_student_t_with_one_df_is_cauchy(self):
        t1 = ScalarPrior(family=PriorFamily.STUDENT_T, df=1.0, scale=1.5)
        cauchy = ScalarPrior(family=PriorFamily.CAUCHY, scale=1.5)
        assert log_prior_scalar(t1, 0.7) == pytest.approx(log_prior_scalar(cauchy, 0.7))

    def test_exponential(self):
        prior = ScalarPrior(family=PriorFamily.EXPONENTIAL, rate=2.0)
        assert log_prior_scalar(prior, 1.0) == pytest.approx(math.log(2.0) - 2.0)

    def test_positive_support(self):
        with pytest.raises(OutOfSupport):
            log_prior_scalar(ScalarPrior(family=PriorFamily.HALF_CAUCHY), -0.1)

    def test_dirichlet_uniform(self):
        prior = ScalarPrior(family=PriorFamily.DIRICHLET, concentration=(1.0, 1.0, 1.0))
        assert log_prior_scalar(prior, [0.2, 0.3, 0.5]) == pytest.approx(math.log(2.0))
        with pytest.raises(OutOfSupport):
            log_prior_scalar(prior, [0.5, 0.6, -0.1])

    def test_describe(self):
        assert ScalarPrior(family=PriorFamily.NORMAL, scale=2.5).describe() == "normal(location = 0, scale = 2.5)"
        assert ScalarPrior(family=PriorFamily.FLAT).describe() == "flat"


def test_random_walk():
    theta = np.array([0.5, 0.7])
    expected = -0.5 * math.log(2 * math.pi) - 0.125
    expected += -0.5 * math.log(2 * math.pi) - math.log(0.1) - 0.5 * (0.2 / 0.1) ** 2
    assert log_prior_random_walk(theta, 0.1) == pytest.approx(expected)


class TestCovariance:
    def test_lkj_uniform_on_two_by_two(self):
        L = np.linalg.cholesky(np.array([[1.0, 0.3], [0.3, 1.0]]))
        assert logpdf_lkj_cholesky_factor(L, 1.0) == pytest.approx(-math.log(2.0))

    def test_decomposition_round_trip(self):
        cov = np.array([[1.0, 0.4], [0.4, 0.5]])
        L, pi, tau = decompose_covariance(cov)
        np.testing.assert_allclose(covariance_from_decomposition(L, pi, tau), cov)
        assert pi.sum() == pytest.approx(1.0)

    def test_scalar_covariance_reduces_to_gamma_on_scale(self):
        spec = CovariancePriorSpec(shape=2.0, scale=1.0)
        value = log_prior_covariance(np.ones((1, 1)), [1.0], 0.5, spec, 1)
        assert value == pytest.approx(math.log(0.5) - 0.5)

    def test_invalid_cholesky(self):
        with pytest.raises(InvalidCholesky):
            log_prior_covariance(np.array([[1.0, 0.5], [0.0, 1.0]]), [0.5, 0.5], 1.0, CovariancePriorSpec(), 2)

    def test_invalid_simplex(self):
        with pytest.raises(InvalidSimplex):
            log_prior_covariance(np.eye(2), [0.5, 0.6], 1.0, CovariancePriorSpec(), 2)


class TestDefaults:
    def test_crude_rate(self, event_times_dataset):
        assert crude_log_rate(event_times_dataset) == pytest.approx(math.log(0.4))

    def test_intercept_shift_sign(self, event_times_dataset):
        assert build_model_spec(event_times_dataset, "exp").priors.intercept_shift == pytest.approx(math.log(0.4))
        assert build_model_spec(event_times_dataset, "exp-aft").priors.intercept_shift == pytest.approx(-math.log(0.4))

    def test_no_events_means_no_shift(self, make_record):
        data = Dataset([make_record(2.0, 0), make_record(3.0, 0)], [])
        assert crude_log_rate(data) == 0.0

    def test_aux_defaults(self, event_times_dataset):
        assert build_model_spec(event_times_dataset, "weibull").priors.aux.family is PriorFamily.HALF_NORMAL
        ms = build_model_spec(event_times_dataset, "ms").priors.aux
        assert ms.family is PriorFamily.DIRICHLET
        assert ms.concentration == (1.0,) * 6
        assert build_model_spec(event_times_dataset, "exp").priors.aux is None

    def test_user_override(self, event_times_dataset):
        config = PriorConfig(beta=ScalarPrior(family=PriorFamily.CAUCHY, scale=1.0))
        spec = build_model_spec(event_times_dataset, "exp", prior_config=config)
        assert spec.priors.beta.family is PriorFamily.CAUCHY
        assert spec.priors.intercept.scale == 20.0

    def test_summary(self, event_times_dataset):
        summary = prior_summary(build_model_spec(event_times_dataset, "weibull").priors)
        assert summary["auxiliary"] == "half_normal(location = 0, scale = 2)"
        assert summary["intercept"]["centering_shift"] == pytest.approx(math.log(0.4))

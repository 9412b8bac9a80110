"""
Unit tests for accelerated failure time baselines and the PH/AFT mapping.
"""
import math

import numpy as np
import pytest

from bayesurv.aft import (
    AftFamily,
    AftKind,
    aft_log_hazard,
    aft_log_survival,
    aft_to_ph_coefficients,
    aft_tve_log_hazard,
    aft_tve_log_survival,
    cumulative_acceleration,
    get_aft,
    ph_to_aft_coefficients,
)
from bayesurv.data import CensoringStatus, Dataset
from bayesurv.errors import DomainError, UnsupportedFamily
from bayesurv.model import ModelSpec, NaturalParams, log_likelihood
from bayesurv.quadrature import make_rule
from tests.conftest import record


def test_weibull_aft_survival():
    fam = AftFamily(AftKind.WEIBULL_AFT, shape=2.0)
    assert aft_log_survival(fam, 1.0, 0.5) == pytest.approx(-math.exp(-1.0))


def test_exponential_aft_hazard_is_constant():
    fam = AftFamily(AftKind.EXPONENTIAL_AFT)
    np.testing.assert_allclose(aft_log_hazard(fam, np.array([0.0, 1.0, 9.0]), 0.7), -0.7)


def test_hazard_matches_survival_derivative():
    fam = AftFamily(AftKind.WEIBULL_AFT, shape=1.6)
    t = np.array([0.5, 1.5, 4.0])
    h = 1e-6
    fd = (aft_log_survival(fam, t - h, 0.2) - aft_log_survival(fam, t + h, 0.2)) / (2 * h)
    np.testing.assert_allclose(fd * np.exp(-aft_log_hazard(fam, t, 0.2)), 1.0, rtol=1e-6)


def test_weibull_aft_hazard_needs_positive_time():
    with pytest.raises(DomainError):
        aft_log_hazard(AftFamily(AftKind.WEIBULL_AFT, shape=2.0), 0.0, 0.0)


def test_weibull_aft_requires_shape():
    with pytest.raises(DomainError):
        AftFamily(AftKind.WEIBULL_AFT)


def test_cumulative_acceleration_bounded_predictor():
    value = cumulative_acceleration(lambda u: u, 1.0, make_rule(15))
    assert value == pytest.approx(1.0 - math.exp(-1.0), abs=1e-12)


def test_tve_survival_at_zero_acceleration():
    fam = AftFamily(AftKind.WEIBULL_AFT, shape=1.3)
    np.testing.assert_array_equal(aft_tve_log_survival(fam, [0.0]), [0.0])


def test_tve_forms_reduce_to_constant_predictor():
    fam = AftFamily(AftKind.WEIBULL_AFT, shape=1.7)
    t = np.array([0.4, 1.0, 3.5])
    eta = 0.3
    accel = t * math.exp(-eta)
    np.testing.assert_allclose(aft_tve_log_hazard(fam, np.full(3, eta), accel), aft_log_hazard(fam, t, eta), rtol=1e-10)
    np.testing.assert_allclose(aft_tve_log_survival(fam, accel), aft_log_survival(fam, t, eta), rtol=1e-10)


class TestCoefficientMapping:
    def test_exponential(self):
        np.testing.assert_allclose(ph_to_aft_coefficients("exp", [0.4, -1.0]), [-0.4, 1.0])

    def test_weibull(self):
        assert ph_to_aft_coefficients("weibull", [-1.0], gamma=2.0)[0] == pytest.approx(0.5)
        assert aft_to_ph_coefficients(AftKind.WEIBULL_AFT, [0.5], gamma=2.0)[0] == pytest.approx(-1.0)

    def test_round_trip(self):
        beta = np.array([0.3, -0.8, 1.1])
        np.testing.assert_allclose(aft_to_ph_coefficients("weibull", ph_to_aft_coefficients("weibull", beta, 1.4), 1.4), beta)

    def test_gompertz_has_no_mapping(self):
        with pytest.raises(UnsupportedFamily):
            ph_to_aft_coefficients("gompertz", [1.0])

    def test_unknown_aft_baseline(self):
        with pytest.raises(UnsupportedFamily):
            get_aft("gompertz-aft")


def test_ph_and_aft_log_likelihoods_agree():
    rng = np.random.default_rng(3)
    n = 60
    x = rng.binomial(1, 0.5, size=n)
    t = rng.weibull(1.4, size=n) * 2.0 + 0.01
    statuses = rng.choice([CensoringStatus.EVENT, CensoringStatus.RIGHT_CENSORED], size=n)
    rows = [record(float(t[i]), int(statuses[i]), x=(float(x[i]),)) for i in range(n)]
    rows.append(record(0.8, CensoringStatus.LEFT_CENSORED, x=(1.0,)))
    rows.append(record(0.5, CensoringStatus.INTERVAL_CENSORED, upper=1.9, x=(0.0,)))
    rows.append(record(2.5, CensoringStatus.EVENT, entry=0.7, x=(1.0,)))
    data = Dataset(rows, ["trt"])
    ph = ModelSpec(baseline="weibull", covariate_names=("trt",))
    aft = ModelSpec(baseline="weibull-aft", covariate_names=("trt",))
    for _ in range(100):
        gamma = float(rng.uniform(0.5, 3.0))
        intercept, beta = rng.normal(0.0, 1.0, size=2)
        ll_ph = log_likelihood(ph, NaturalParams(intercept, np.array([beta]), aux=np.array([gamma])), data)
        mapped = ph_to_aft_coefficients("weibull", [intercept, beta], gamma)
        ll_aft = log_likelihood(aft, NaturalParams(mapped[0], mapped[1:], aux=np.array([gamma])), data)
        np.testing.assert_allclose(ll_ph, ll_aft, rtol=1e-10, atol=1e-10)

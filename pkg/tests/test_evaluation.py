"""
Unit tests for pointwise log likelihood, WAIC / LOO, model comparison and convergence diagnostics.
"""
import math

import numpy as np
import pytest

from bayesurv.errors import ConfigError, DegenerateDraws, InsufficientDraws, UnitMismatch
from bayesurv.evaluation import (
    PointwiseLogLik,
    UnitDefinition,
    collapse_by_group,
    compare,
    fixef,
    log_lik_matrix,
    loo,
    mad_sd,
    posterior_summary,
    print_table,
    random_effect_sds,
    ranef,
    rhat_ess,
    waic,
)
from bayesurv.model import ModelSpec, NaturalParams, build_model_spec, log_likelihood
from bayesurv.predict import degenerate_draws
from bayesurv.predictor import RandomEffectSpec


def pointwise(matrix, unit=UnitDefinition.PER_ROW):
    matrix = np.asarray(matrix, dtype=float)
    return PointwiseLogLik(matrix=matrix, unit=unit, unit_ids=[str(i + 1) for i in range(matrix.shape[1])])


class TestCriteria:
    def test_constant_matrix(self):
        ll = pointwise(np.full((100, 5), -1.3))
        for result in (waic(ll), loo(ll)):
            assert result.elpd == pytest.approx(-6.5)
            assert result.p_eff == pytest.approx(0.0, abs=1e-12)
            assert result.se == pytest.approx(0.0, abs=1e-12)
            assert result.ic == pytest.approx(13.0)

    def test_two_draw_example(self):
        ll = pointwise([[math.log(0.2)], [math.log(0.6)]])
        w = waic(ll)
        assert w.p_eff == pytest.approx(math.log(3.0) ** 2 / 4.0)
        assert w.elpd == pytest.approx(math.log(0.4) - math.log(3.0) ** 2 / 4.0)
        l = loo(ll)
        assert l.elpd == pytest.approx(math.log(0.3))
        assert l.p_eff == pytest.approx(math.log(0.4) - math.log(0.3))

    def test_waic_pointwise_terms(self):
        m = np.random.default_rng(3).normal(-1.5, 0.3, size=(400, 6))
        w = waic(pointwise(m))
        expected = np.log(np.mean(np.exp(m), axis=0)) - np.var(m, axis=0)
        np.testing.assert_allclose(w.pointwise, expected, rtol=1e-10)
        assert w.elpd == pytest.approx(expected.sum())
        assert w.se == pytest.approx(math.sqrt(6 * np.var(expected)))

    def test_loo_does_not_exceed_lppd(self):
        m = np.random.default_rng(2).normal(-2.0, 0.5, size=(200, 10))
        ll = pointwise(m)
        assert loo(ll).p_eff >= 0.0
        assert waic(ll).n_units == 10

    def test_single_draw(self):
        with pytest.raises(DegenerateDraws):
            waic(pointwise([[-1.0, -2.0]]))

    def test_non_finite(self):
        with pytest.raises(DegenerateDraws):
            loo(pointwise([[-1.0, -np.inf], [-1.0, -2.0]]))


class TestGroups:
    def test_collapse(self):
        out, ids = collapse_by_group(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]), ["a", "b", "a"])
        np.testing.assert_allclose(out, [[4.0, 2.0], [1.0, 0.5]])
        assert ids == ["a", "b"]

    def test_missing_id(self):
        with pytest.raises(ConfigError):
            collapse_by_group(np.zeros((2, 2)), ["a", None])

    def test_matrix_per_group(self, clustered_dataset):
        spec = ModelSpec(baseline="exp", covariate_names=("trt",))
        params = NaturalParams(intercept=-1.0, beta=np.array([0.3]), aux=np.zeros(0))
        draws = degenerate_draws(spec, params, 3)
        rows = log_lik_matrix(draws, spec, clustered_dataset, "row")
        groups = log_lik_matrix(draws, spec, clustered_dataset, UnitDefinition.PER_GROUP)
        assert rows.matrix.shape == (3, 12)
        assert groups.matrix.shape == (3, 6)
        assert groups.unit_ids[:2] == ["a0", "a1"]
        np.testing.assert_allclose(rows.matrix[0], log_likelihood(spec, params, clustered_dataset))
        np.testing.assert_allclose(groups.matrix.sum(axis=1), rows.matrix.sum(axis=1))


class TestCompare:
    @pytest.fixture
    def results(self):
        rng = np.random.default_rng(8)
        good = waic(pointwise(rng.normal(-1.0, 0.1, size=(50, 20))))
        poor = waic(pointwise(rng.normal(-1.5, 0.1, size=(50, 20))))
        return good, poor

    def test_self_comparison(self, results):
        good, _ = results
        table = compare({"a": good, "b": good})
        np.testing.assert_allclose(table["elpd_diff"], 0.0)
        np.testing.assert_allclose(table["se_diff"], 0.0)

    def test_ordering_and_sign(self, results):
        good, poor = results
        table = compare([("poor", poor), ("good", good)])
        assert list(table.index) == ["good", "poor"]
        assert table.loc["good", "elpd_diff"] == 0.0
        assert table.loc["poor", "elpd_diff"] == pytest.approx(poor.elpd - good.elpd)
        assert table.loc["poor", "se_diff"] > 0.0
        assert "elpd_waic" in table.columns

    def test_different_units(self, results):
        good, _ = results
        other = waic(pointwise(np.full((10, 3), -1.0)))
        with pytest.raises(UnitMismatch):
            compare({"a": good, "b": other})

    def test_different_criteria(self):
        ll = pointwise(np.random.default_rng(0).normal(size=(20, 4)))
        with pytest.raises(UnitMismatch):
            compare({"a": waic(ll), "b": loo(ll)})

    def test_empty(self):
        with pytest.raises(ConfigError):
            compare({})


class TestConvergence:
    def test_stuck_chains(self):
        chains = np.vstack([np.ones(10), np.full(10, 2.0)])
        assert rhat_ess(chains).rhat == math.inf

    def test_identical_constants(self):
        conv = rhat_ess(np.ones((2, 10)))
        assert math.isnan(conv.rhat)
        assert math.isnan(conv.ess)

    def test_independent_draws(self):
        chains = np.random.default_rng(1).normal(size=(4, 1000))
        conv = rhat_ess(chains)
        assert conv.rhat == pytest.approx(1.0, abs=0.01)
        assert 0.8 * 4000 < conv.ess < 1.2 * 4000

    def test_autocorrelated_draws(self):
        rng = np.random.default_rng(5)
        phi = 0.9
        chains = np.zeros((4, 2000))
        for c in range(4):
            for i in range(1, 2000):
                chains[c, i] = phi * chains[c, i - 1] + rng.normal()
        expected = 8000 * (1 - phi) / (1 + phi)
        assert 0.5 * expected < rhat_ess(chains).ess < 1.5 * expected

    def test_shifted_chain(self):
        rng = np.random.default_rng(6)
        chains = rng.normal(size=(4, 500))
        chains[0] += 3.0
        assert rhat_ess(chains).rhat > 1.1

    @pytest.mark.parametrize("shape", [(1, 100), (2, 3)])
    def test_insufficient_draws(self, shape):
        with pytest.raises(InsufficientDraws):
            rhat_ess(np.zeros(shape))


class TestSummaries:
    @pytest.fixture
    def frailty_draws(self, clustered_dataset):
        spec = build_model_spec(clustered_dataset, "weibull", random_effects=[RandomEffectSpec("site")])
        params = NaturalParams(
            intercept=-1.0,
            beta=np.array([0.5]),
            aux=np.array([1.2]),
            random_effects={"site": np.array([[0.1], [0.0], [-0.1]])},
            covariances={"site": np.array([[0.25]])},
        )
        return spec, degenerate_draws(spec, params, 4)

    def test_mad_sd(self):
        assert mad_sd(np.array([1.0, 2.0, 3.0, 4.0, 5.0])) == pytest.approx(1.4826)

    def test_print_table(self, frailty_draws):
        spec, draws = frailty_draws
        table = print_table(draws, spec)
        assert list(table.index) == ["(Intercept)", "trt", "weibull-shape"]
        assert table.loc["trt", "exp(Median)"] == pytest.approx(math.exp(0.5))
        assert math.isnan(table.loc["(Intercept)", "exp(Median)"])
        assert math.isnan(table.loc["weibull-shape", "exp(Median)"])
        assert table.loc["trt", "MAD_SD"] == 0.0

    def test_fixef_ranef(self, frailty_draws):
        spec, draws = frailty_draws
        assert fixef(draws, spec).to_dict() == pytest.approx({"(Intercept)": -1.0, "trt": 0.5})
        frame = ranef(draws, spec)["site"]
        assert list(frame.index) == ["a", "b", "c"]
        assert frame["(Intercept)"].tolist() == pytest.approx([0.1, 0.0, -0.1])

    def test_random_effect_sds(self, frailty_draws):
        spec, draws = frailty_draws
        sds = random_effect_sds(draws, spec)
        assert sds[["group", "name"]].values.tolist() == [["site", "(Intercept)"]]
        assert sds.loc[0, "std_dev"] == pytest.approx(0.5)

    def test_posterior_summary_single_chain(self, frailty_draws):
        spec, draws = frailty_draws
        table = posterior_summary(draws)
        assert table.loc["trt", "mean"] == pytest.approx(0.5)
        assert table.loc["trt", "sd"] == pytest.approx(0.0)
        assert math.isnan(table.loc["trt", "rhat"])
        assert "2.5%" in table.columns and "97.5%" in table.columns

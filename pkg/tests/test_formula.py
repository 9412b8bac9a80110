"""
Unit tests for the model formula parser.
"""
import pandas as pd
import pytest

from bayesurv.data import CovariateEncoder
from bayesurv.errors import DuplicateResponse, FormulaSyntaxError, UnknownFunction
from bayesurv.formula import RandomEffectTerm, parse_formula, tokenize
from bayesurv.model import SplineOptions
from bayesurv.predictor import RandomEffectSpec


class TestResponse:
    def test_time_and_status(self):
        ast = parse_formula("surv(time, status) ~ age + sex")
        assert (ast.response.time, ast.response.status, ast.response.entry) == ("time", "status", None)
        assert ast.fixed == ["age", "sex"]

    def test_delayed_entry(self):
        ast = parse_formula("surv(start, stop, event) ~ x")
        assert (ast.response.entry, ast.response.time, ast.response.status) == ("start", "stop", "event")

    def test_keywords(self):
        ast = parse_formula("surv(t, d, upper=t2, entry=t0) ~ x")
        assert ast.response.upper == "t2"
        assert ast.response.entry == "t0"
        named = parse_formula("surv(time=t, status=d) ~ x")
        assert (named.response.time, named.response.status) == ("t", "d")

    def test_intercept_only(self):
        assert parse_formula("surv(t, d) ~ 1").fixed == []

    def test_schema(self):
        schema = parse_formula("surv(t0, t, d) ~ age + (1 | site)").schema("pid")
        assert schema.entry == "t0"
        assert schema.covariates == ["age"]
        assert schema.clusters == ["site"]
        assert schema.id == "pid"


class TestTerms:
    def test_tve(self):
        ast = parse_formula("surv(t, d) ~ tve(trt, degree=0, knots=[4]) + age")
        assert ast.fixed == ["trt", "age"]
        term = ast.tve[0]
        assert (term.covariate, term.degree, term.knots) == ("trt", 0, (4.0,))
        assert term.options().model_dump() == SplineOptions(degree=0, knots=[4.0]).model_dump()

    def test_tve_scalar_knot_and_df(self):
        assert parse_formula("surv(t, d) ~ tve(trt, knots=2.5)").tve[0].knots == (2.5,)
        assert parse_formula("surv(t, d) ~ tve(trt, df=4)").tve[0].df == 4

    def test_covariate_listed_once(self):
        assert parse_formula("surv(t, d) ~ trt + tve(trt)").fixed == ["trt"]

    @pytest.mark.parametrize(
        "text, expected",
        [
            ("(1 | site)", RandomEffectTerm("site", True, ())),
            ("(trt | site)", RandomEffectTerm("site", True, ("trt",))),
            ("(1 + trt | site)", RandomEffectTerm("site", True, ("trt",))),
            ("(0 + trt | site)", RandomEffectTerm("site", False, ("trt",))),
        ],
    )
    def test_random_effects(self, text, expected):
        term = parse_formula(f"surv(t, d) ~ trt + {text}").random[0]
        assert (term.factor, term.intercept, term.slopes) == (expected.factor, expected.intercept, expected.slopes)

    def test_tve_options_expand_categorical(self):
        encoder = CovariateEncoder.fit(pd.DataFrame({"arm": ["a", "b", "c"]}), ["arm"])
        options = parse_formula("surv(t, d) ~ tve(arm, degree=1)").tve_options(encoder)
        assert list(options) == ["armb", "armc"]
        assert options["armb"].degree == 1

    def test_random_effect_specs(self):
        ast = parse_formula("surv(t, d) ~ age + trt + (1 + trt | site)")
        specs = ast.random_effect_specs(CovariateEncoder(columns=["age", "trt"]))
        assert specs == [RandomEffectSpec("site", True, ("trt",), (1,))]

    def test_random_slope_must_be_fixed(self):
        ast = parse_formula("surv(t, d) ~ age + (trt | site)")
        with pytest.raises(FormulaSyntaxError):
            ast.random_effect_specs(CovariateEncoder(columns=["age"]))


class TestErrors:
    def test_empty(self):
        with pytest.raises(FormulaSyntaxError) as exc:
            parse_formula("  ")
        assert exc.value.position == 0

    def test_bad_character_position(self):
        with pytest.raises(FormulaSyntaxError) as exc:
            parse_formula("surv(t, s) ~ x $")
        assert exc.value.position == 15
        assert "^" in str(exc.value)

    @pytest.mark.parametrize("text", ["surv(t, d) ~ x ~ y", "surv(t, d) ~ x + surv(a, b)"])
    def test_duplicate_response(self, text):
        with pytest.raises(DuplicateResponse):
            parse_formula(text)

    @pytest.mark.parametrize("text", ["surv(t, d) ~ log(x)", "coxph(t, d) ~ x"])
    def test_unknown_function(self, text):
        with pytest.raises(UnknownFunction):
            parse_formula(text)

    @pytest.mark.parametrize(
        "text",
        [
            "surv(t) ~ x",
            "surv(t, d) ~ x y",
            "surv(t, d) x",
            "x ~ y",
            "surv(t, d) ~ tve(trt, df=3, knots=[1])",
            "surv(t, d) ~ tve(trt, degree=1.5)",
            "surv(t, d) ~ tve(trt, spline=1)",
            "surv(t, d) ~ tve(trt, df=3, df=4)",
            "surv(t, d) ~ (0 | site)",
            "surv(t, d) ~ (1 | )",
            "surv(t, d, foo=x) ~ y",
            "surv(t, d) ~ tve(trt, knots=[1 2])",
        ],
    )
    def test_syntax_errors(self, text):
        with pytest.raises(FormulaSyntaxError):
            parse_formula(text)


def test_tokenize_positions():
    tokens = tokenize("surv(t,d) ~ x")
    assert [(t.kind, t.text, t.position) for t in tokens[:3]] == [("name", "surv", 0), ("punct", "(", 4), ("name", "t", 5)]
    assert tokens[-1].kind == "end"

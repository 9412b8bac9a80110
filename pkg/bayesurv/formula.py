"""
Model formula mini-language.

    surv(time, status) ~ age + tve(trt, degree=0, knots=[4]) + (trt | site)

The response is ``surv(time, status)``, ``surv(entry, time, status)`` for
delayed entry, with optional ``entry=`` and ``upper=`` keywords (``upper``
names the right end of interval-censored records). Terms are plain
covariates, ``tve(covariate, degree=, df=, knots=)`` time-varying effects and
random-effect terms ``(1 | factor)``, ``(x | factor)``, ``(1 + x | factor)``
or ``(0 + x | factor)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .data import CovariateEncoder, DatasetSchema
from .errors import DuplicateResponse, FormulaSyntaxError, UnknownFunction
from .model import SplineOptions
from .predictor import RandomEffectSpec

_TOKEN = re.compile(
    r"\s*(?:(?P<number>-?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<punct>[()\[\],=+~|]))"
)
FUNCTIONS = ("surv", "tve")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    position: int


@dataclass(frozen=True)
class Response:
    time: str
    status: str
    entry: str | None = None
    upper: str | None = None
    position: int = 0


@dataclass(frozen=True)
class TveTerm:
    covariate: str
    degree: int | None = None
    df: int | None = None
    knots: tuple[float, ...] | None = None
    position: int = 0

    def options(self) -> SplineOptions:
        return SplineOptions.parse(degree=self.degree, df=self.df, knots=None if self.knots is None else list(self.knots))


@dataclass(frozen=True)
class RandomEffectTerm:
    factor: str
    intercept: bool = True
    slopes: tuple[str, ...] = ()
    position: int = 0


@dataclass
class FormulaAst:
    text: str
    response: Response
    fixed: list[str] = field(default_factory=list)
    tve: list[TveTerm] = field(default_factory=list)
    random: list[RandomEffectTerm] = field(default_factory=list)

    @property
    def covariates(self) -> list[str]:
        """Fixed covariate columns in order of first appearance (tve terms included)."""
        return list(self.fixed)

    @property
    def factors(self) -> list[str]:
        return [r.factor for r in self.random]

    def schema(self, id_column: str | None = None) -> DatasetSchema:
        r = self.response
        return DatasetSchema(
            time=r.time,
            status=r.status,
            entry=r.entry,
            upper=r.upper,
            covariates=self.covariates,
            clusters=self.factors,
            id=id_column,
        )

    def tve_options(self, encoder: CovariateEncoder) -> dict[str, SplineOptions]:
        """One entry per design column; a categorical term expands to each of its indicators."""
        out = {}
        for term in self.tve:
            for column in encoder.term_columns(term.covariate):
                out[column] = term.options()
        return out

    def random_effect_specs(self, encoder: CovariateEncoder) -> list[RandomEffectSpec]:
        names = encoder.names
        specs = []
        for term in self.random:
            slopes: list[str] = []
            for s in term.slopes:
                slopes.extend(encoder.term_columns(s))
            for s in slopes:
                if s not in names:
                    raise FormulaSyntaxError(term.position, f"random slope '{s}' must also be a fixed covariate", self.text)
            specs.append(
                RandomEffectSpec(
                    factor=term.factor,
                    intercept=term.intercept,
                    slopes=tuple(slopes),
                    slope_indices=tuple(names.index(s) for s in slopes),
                )
            )
        return specs


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise FormulaSyntaxError(bad, f"unexpected character {text[bad]!r}", text)
        kind = m.lastgroup
        tokens.append(Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.i]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def fail(self, detail: str, token: Token | None = None):
        token = token or self.current
        raise FormulaSyntaxError(token.position, detail, self.text)

    def accept(self, text: str) -> bool:
        if self.current.kind == "punct" and self.current.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str, context: str) -> Token:
        tok = self.current
        if not self.accept(text):
            found = tok.text or "end of formula"
            self.fail(f"expected '{text}' {context}, found '{found}'")
        return tok

    def name(self, context: str) -> Token:
        tok = self.current
        if tok.kind != "name":
            self.fail(f"expected a column name {context}, found '{tok.text or 'end of formula'}'")
        self.i += 1
        return tok

    def number(self, context: str) -> float:
        tok = self.current
        if tok.kind != "number":
            self.fail(f"expected a number {context}, found '{tok.text or 'end of formula'}'")
        self.i += 1
        return float(tok.text)

    # grammar

    def formula(self) -> FormulaAst:
        response = self.response()
        self.expect("~", "after the response")
        ast = FormulaAst(text=self.text, response=response)
        self.terms(ast)
        if self.current.kind != "end":
            if self.current.text == "~":
                raise DuplicateResponse(f"formula has more than one '~' (position {self.current.position})")
            self.fail(f"expected '+' between terms, found '{self.current.text}'")
        return ast

    def response(self) -> Response:
        head = self.current
        if head.kind != "name" or self.peek().text != "(":
            self.fail("a formula must start with surv(...)")
        if head.text != "surv":
            raise UnknownFunction(f"unknown response function '{head.text}' at position {head.position}")
        self.i += 2
        positional: list[str] = []
        keywords: dict[str, str] = {}
        while True:
            tok = self.name("inside surv()")
            if self.accept("="):
                if tok.text not in ("entry", "upper", "time", "status"):
                    self.fail(f"surv() has no argument '{tok.text}'", tok)
                keywords[tok.text] = self.name(f"for {tok.text}=").text
            else:
                if keywords:
                    self.fail("positional argument after keyword argument", tok)
                positional.append(tok.text)
            if self.accept(")"):
                break
            self.expect(",", "between surv() arguments")
        if len(positional) == 3:
            entry, time, status = positional
        elif len(positional) == 2:
            entry, (time, status) = None, positional
        else:
            time = status = entry = None
            if "time" not in keywords or "status" not in keywords:
                self.fail(f"surv() takes (time, status) or (entry, time, status), got {len(positional)} positional arguments", head)
        entry = keywords.get("entry", entry)
        return Response(
            time=keywords.get("time", time),
            status=keywords.get("status", status),
            entry=entry,
            upper=keywords.get("upper"),
            position=head.position,
        )

    def terms(self, ast: FormulaAst) -> None:
        while True:
            self.term(ast)
            if not self.accept("+"):
                return

    def _add_fixed(self, ast: FormulaAst, name: str) -> None:
        if name not in ast.fixed:
            ast.fixed.append(name)

    def term(self, ast: FormulaAst) -> None:
        tok = self.current
        if tok.kind == "number" and tok.text == "1":
            self.i += 1
            return
        if tok.kind == "punct" and tok.text == "(":
            ast.random.append(self.random_term())
            return
        name = self.name("as a model term")
        if self.current.text == "(":
            if name.text == "surv":
                raise DuplicateResponse(f"surv() may only appear once, on the left of '~' (position {name.position})")
            if name.text != "tve":
                raise UnknownFunction(f"unknown function '{name.text}' at position {name.position}")
            self.i += 1
            term = self.tve_term(name)
            self._add_fixed(ast, term.covariate)
            ast.tve.append(term)
            return
        self._add_fixed(ast, name.text)

    def tve_term(self, head: Token) -> TveTerm:
        covariate = self.name("as the first argument of tve()").text
        args: dict[str, object] = {}
        while self.accept(","):
            key = self.name("as a tve() argument")
            if key.text not in ("degree", "df", "knots"):
                self.fail(f"tve() has no argument '{key.text}'", key)
            if key.text in args:
                self.fail(f"tve() argument '{key.text}' given twice", key)
            self.expect("=", f"after '{key.text}'")
            if key.text == "knots":
                args["knots"] = self.number_list()
            else:
                value = self.number(f"for {key.text}=")
                if value != int(value) or value < 0:
                    self.fail(f"{key.text} must be a non-negative integer")
                args[key.text] = int(value)
        self.expect(")", "to close tve()")
        if "df" in args and "knots" in args:
            self.fail("tve() accepts df or knots, not both", head)
        return TveTerm(
            covariate=covariate,
            degree=args.get("degree"),
            df=args.get("df"),
            knots=args.get("knots"),
            position=head.position,
        )

    def number_list(self) -> tuple[float, ...]:
        if not self.accept("["):
            return (self.number("for knots="),)
        values = []
        if not self.accept("]"):
            while True:
                values.append(self.number("in the knot list"))
                if self.accept("]"):
                    break
                self.expect(",", "between knots")
        return tuple(values)

    def random_term(self) -> RandomEffectTerm:
        open_tok = self.expect("(", "")
        intercept = True
        slopes: list[str] = []
        first = True
        while True:
            tok = self.current
            if tok.kind == "number" and tok.text in ("0", "1"):
                self.i += 1
                intercept = tok.text == "1"
            elif tok.kind == "name":
                self.i += 1
                slopes.append(tok.text)
            elif first:
                self.fail("expected '1', '0' or a covariate before '|'")
            first = False
            if not self.accept("+"):
                break
        self.expect("|", "in a random-effect term")
        factor = self.name("after '|'").text
        self.expect(")", "to close the random-effect term")
        if not intercept and not slopes:
            self.fail("random-effect term has neither an intercept nor slopes", open_tok)
        return RandomEffectTerm(factor=factor, intercept=intercept, slopes=tuple(slopes), position=open_tok.position)


def parse_formula(text: str) -> FormulaAst:
    if not text or not text.strip():
        raise FormulaSyntaxError(0, "formula is empty", text or "")
    if text.count("~") > 1:
        raise DuplicateResponse("formula has more than one '~'")
    return _Parser(text).formula()

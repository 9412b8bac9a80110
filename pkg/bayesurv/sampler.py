"""
No-U-Turn sampling and MAP estimation of the log posterior.

The sampler uses multinomial trajectory sampling with biased progressive
sampling between subtrees, the generalized U-turn criterion, dual-averaging
step-size adaptation and windowed diagonal mass-matrix adaptation.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field
from scipy.optimize import minimize
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from .config import settings
from .data import Dataset
from .errors import AllDivergent, LineSearchFailure, MaxIterations, NonFiniteInit
from .model import ModelSpec, NaturalParams, ParameterLayout, Posterior

MAX_DELTA_H = 1000.0

ValueAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


class SamplerConfig(BaseModel):
    chains: int = Field(default_factory=lambda: settings.chains, ge=1)
    warmup: int = Field(default_factory=lambda: settings.warmup, ge=0)
    iters: int = Field(default_factory=lambda: settings.iters, ge=1)
    seed: int = Field(default_factory=lambda: settings.seed)
    target_accept: float = Field(default_factory=lambda: settings.target_accept, gt=0.0, lt=1.0)
    max_treedepth: int = Field(default_factory=lambda: settings.max_treedepth, ge=1)
    n_jobs: int = Field(default_factory=lambda: settings.n_jobs, ge=1)
    init_radius: float = Field(default_factory=lambda: settings.init_radius, gt=0.0)


class MapConfig(BaseModel):
    max_iter: int = Field(default=2000, ge=1)
    gtol: float = Field(default=1e-6, gt=0.0)
    jacobian: bool = False
    seed: int | None = None
    init_radius: float = Field(default_factory=lambda: settings.init_radius, gt=0.0)


# --- adaptation --------------------------------------------------------------------

@dataclass
class DualAveraging:
    mu: float
    log_eps: float = 0.0
    log_eps_bar: float = 0.0
    h_bar: float = 0.0
    t: int = 0

    def update(self, accept_stat: float, target: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75) -> float:
        self.t += 1
        w = 1.0 / (self.t + t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.t) / gamma * self.h_bar
        decay = self.t ** (-kappa)
        self.log_eps_bar = decay * self.log_eps + (1.0 - decay) * self.log_eps_bar
        return math.exp(self.log_eps)

    def final(self) -> float:
        return math.exp(self.log_eps_bar)


class RunningVariance:
    """Welford accumulator for the diagonal of the inverse metric."""

    def __init__(self, dim: int) -> None:
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 = self.m2 + delta * (x - self.mean)

    def regularized(self) -> np.ndarray:
        """Sample variance shrunk toward 1e-3, as in Stan's windowed adaptation."""
        n = self.n
        var = self.m2 / (n - 1) if n > 1 else np.ones_like(self.mean)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def warmup_windows(num_warmup: int) -> list[tuple[int, int]]:
    """Slow adaptation windows: 75/25/50 buffers, or 15%/75%/10% for short warmups."""
    if num_warmup < 20:
        return []
    if num_warmup >= 150:
        init_buffer, term_buffer, base = 75, 50, 25
    else:
        init_buffer = max(1, int(0.15 * num_warmup))
        term_buffer = max(1, int(0.10 * num_warmup))
        base = max(1, num_warmup - init_buffer - term_buffer)
    start, end = init_buffer, num_warmup - term_buffer
    if end <= start:
        return []
    windows = []
    width = min(base, end - start)
    while start < end:
        stop = start + width
        # a window that would leave less than twice its width is stretched to the end
        if stop + 2 * width > end:
            stop = end
        windows.append((start, stop))
        start = stop
        width *= 2
    return windows


# --- trajectory -------------------------------------------------------------------

@dataclass
class _Point:
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    left: _Point
    right: _Point
    sample: _Point
    log_w: float
    rho: np.ndarray
    n_leapfrog: int
    sum_accept: float
    diverging: bool = False
    turning: bool = False

    @property
    def invalid(self) -> bool:
        return self.diverging or self.turning


def _leapfrog(vg: ValueAndGrad, point: _Point, eps: float, inv_mass: np.ndarray) -> _Point:
    p = point.p + 0.5 * eps * point.grad
    q = point.q + eps * inv_mass * p
    logp, grad = vg(q)
    p = p + 0.5 * eps * grad
    return _Point(q, p, logp, grad)


def _kinetic(p: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(np.sum(inv_mass * p * p))


def _is_turning(rho: np.ndarray, left: _Point, right: _Point, inv_mass: np.ndarray) -> bool:
    return float(np.dot(inv_mass * left.p, rho)) <= 0 or float(np.dot(inv_mass * right.p, rho)) <= 0


class NutsKernel:
    def __init__(self, vg: ValueAndGrad, dim: int, max_treedepth: int, rng: np.random.Generator) -> None:
        self.vg = vg
        self.dim = dim
        self.max_treedepth = max_treedepth
        self.rng = rng
        self.inv_mass = np.ones(dim)

    def _build(self, edge: _Point, depth: int, direction: int, eps: float, H0: float) -> _Tree:
        if depth == 0:
            node = _leapfrog(self.vg, edge, direction * eps, self.inv_mass)
            H = -node.logp + _kinetic(node.p, self.inv_mass)
            if not np.isfinite(H):
                H = math.inf
            delta = H - H0
            return _Tree(
                left=node,
                right=node,
                sample=node,
                log_w=-delta,
                rho=node.p.copy(),
                n_leapfrog=1,
                sum_accept=math.exp(min(0.0, -delta)) if np.isfinite(delta) else 0.0,
                diverging=delta > MAX_DELTA_H,
            )
        inner = self._build(edge, depth - 1, direction, eps, H0)
        if inner.invalid:
            return inner
        outer_edge = inner.right if direction > 0 else inner.left
        outer = self._build(outer_edge, depth - 1, direction, eps, H0)
        n_leapfrog = inner.n_leapfrog + outer.n_leapfrog
        sum_accept = inner.sum_accept + outer.sum_accept
        if outer.invalid:
            outer.n_leapfrog, outer.sum_accept = n_leapfrog, sum_accept
            return outer
        log_w = np.logaddexp(inner.log_w, outer.log_w)
        sample = inner.sample
        if math.log(self.rng.uniform()) < outer.log_w - log_w:
            sample = outer.sample
        left, right = (inner.left, outer.right) if direction > 0 else (outer.left, inner.right)
        rho = inner.rho + outer.rho
        return _Tree(
            left=left,
            right=right,
            sample=sample,
            log_w=float(log_w),
            rho=rho,
            n_leapfrog=n_leapfrog,
            sum_accept=sum_accept,
            turning=_is_turning(rho, left, right, self.inv_mass),
        )

    def transition(self, q: np.ndarray, logp: float, grad: np.ndarray, eps: float) -> tuple[_Point, dict]:
        p0 = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_mass)
        start = _Point(q, p0, logp, grad)
        H0 = -logp + _kinetic(p0, self.inv_mass)
        left = right = sample = start
        log_sum_w = 0.0
        rho = p0.copy()
        depth = 0
        n_leapfrog = 0
        sum_accept = 0.0
        diverging = False
        while depth < self.max_treedepth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            edge = right if direction > 0 else left
            tree = self._build(edge, depth, direction, eps, H0)
            n_leapfrog += tree.n_leapfrog
            sum_accept += tree.sum_accept
            depth += 1
            if tree.invalid:
                diverging = tree.diverging
                break
            if direction > 0:
                right = tree.right
            else:
                left = tree.left
            if math.log(self.rng.uniform()) < tree.log_w - log_sum_w:
                sample = tree.sample
            log_sum_w = float(np.logaddexp(log_sum_w, tree.log_w))
            rho = rho + tree.rho
            if _is_turning(rho, left, right, self.inv_mass):
                break
        stats = {
            "accept_stat": sum_accept / max(n_leapfrog, 1),
            "tree_depth": depth,
            "n_leapfrog": n_leapfrog,
            "diverging": diverging,
            "energy": -sample.logp + _kinetic(sample.p, self.inv_mass),
        }
        return sample, stats

    def find_reasonable_step_size(self, q: np.ndarray, logp: float, grad: np.ndarray, eps: float = 1.0) -> float:
        p0 = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_mass)
        start = _Point(q, p0, logp, grad)
        H0 = -logp + _kinetic(p0, self.inv_mass)

        def log_accept(step: float) -> float:
            nxt = _leapfrog(self.vg, start, step, self.inv_mass)
            H = -nxt.logp + _kinetic(nxt.p, self.inv_mass)
            return H0 - H if np.isfinite(H) else -math.inf

        direction = 1.0 if log_accept(eps) > math.log(0.8) else -1.0
        while 1e-8 < eps < 1e3:
            eps *= 2.0 ** direction
            la = log_accept(eps)
            if direction > 0 and not la > math.log(0.8):
                break
            if direction < 0 and la > math.log(0.8):
                break
        return float(eps)


# --- chains -----------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Retained constrained draws of every chain plus sampler statistics."""

    names: list[str]
    draws: np.ndarray
    chain_id: np.ndarray
    diverging: np.ndarray
    step_size: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    accept_stat: np.ndarray
    energy: np.ndarray
    new_cluster_draws: dict[str, np.ndarray] = field(default_factory=dict)
    max_treedepth: int = 10

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain_id).size)

    @property
    def divergence_fraction(self) -> float:
        return float(np.mean(self.diverging)) if self.n_draws else 0.0

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def by_chain(self, name: str) -> np.ndarray:
        """Draws of one parameter as a (chains, iterations) array."""
        values = self.column(name)
        return np.stack([values[self.chain_id == c] for c in np.unique(self.chain_id)])

    def natural(self, layout: ParameterLayout, s: int) -> NaturalParams:
        return layout.from_row(self.draws[s])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.draws, columns=self.names)
        frame.insert(0, "chain", self.chain_id)
        return frame


@retry(
    retry=retry_if_exception_type(NonFiniteInit),
    stop=stop_after_attempt(settings.init_attempts),
    reraise=True,
)
def _initial_point(vg: ValueAndGrad, dim: int, radius: float, rng: np.random.Generator) -> tuple[np.ndarray, float, np.ndarray]:
    q = rng.uniform(-radius, radius, size=dim)
    logp, grad = vg(q)
    if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
        raise NonFiniteInit(f"log posterior not finite at a random initial point (radius {radius})")
    return q, logp, grad


def _new_cluster_draw(layout: ParameterLayout, row: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = layout.from_row(row)
    out = {}
    for re in layout.spec.re_specs:
        cov = np.asarray(params.covariances[re.factor])
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(re.dim))
        out[re.factor] = chol @ rng.standard_normal(re.dim)
    return out


def _run_chain(spec: ModelSpec, data: Dataset, cfg: SamplerConfig, seed: np.random.SeedSequence, chain: int) -> dict:
    rng = np.random.Generator(np.random.Philox(seed))
    posterior = Posterior(spec, data)
    layout = posterior.layout
    dim = layout.size
    kernel = NutsKernel(posterior.value_and_grad, dim, cfg.max_treedepth, rng)
    q, logp, grad = _initial_point(posterior.value_and_grad, dim, cfg.init_radius, rng)

    eps = kernel.find_reasonable_step_size(q, logp, grad)
    adapt = DualAveraging(mu=math.log(10.0 * eps))
    windows = warmup_windows(cfg.warmup)
    window_ends = {stop: start for start, stop in windows}
    window_starts = {start for start, _ in windows}
    variance = RunningVariance(dim)
    logger.debug(f"[sampler] chain {chain}: initial step size {eps:.4g}, warmup windows {windows}")

    for it in range(cfg.warmup):
        point, stats = kernel.transition(q, logp, grad, eps)
        q, logp, grad = point.q, point.logp, point.grad
        eps = adapt.update(stats["accept_stat"], cfg.target_accept)
        if it in window_starts:
            variance = RunningVariance(dim)
        if any(start <= it < stop for start, stop in windows):
            variance.update(q)
        if it + 1 in window_ends:
            kernel.inv_mass = variance.regularized()
            eps = kernel.find_reasonable_step_size(q, logp, grad, eps)
            adapt = DualAveraging(mu=math.log(10.0 * eps))
            logger.debug(f"[sampler] chain {chain}: metric updated after iteration {it + 1}")
    if cfg.warmup > 0:
        eps = adapt.final()

    rows, records = [], []
    new_draws: dict[str, list[np.ndarray]] = {re.factor: [] for re in spec.re_specs}
    for _ in range(cfg.iters):
        point, stats = kernel.transition(q, logp, grad, eps)
        q, logp, grad = point.q, point.logp, point.grad
        row = layout.to_row(q)
        rows.append(row)
        records.append(stats)
        for factor, value in _new_cluster_draw(layout, row, rng).items():
            new_draws[factor].append(value)

    diverging = np.array([r["diverging"] for r in records], dtype=bool)
    saturated = int(sum(r["tree_depth"] >= cfg.max_treedepth for r in records))
    logger.info(f"[sampler] chain {chain} finished: step size {eps:.3g}, {int(diverging.sum())} divergent, {saturated} at max tree depth")
    return {
        "draws": np.array(rows),
        "diverging": diverging,
        "tree_depth": np.array([r["tree_depth"] for r in records]),
        "n_leapfrog": np.array([r["n_leapfrog"] for r in records]),
        "accept_stat": np.array([r["accept_stat"] for r in records]),
        "energy": np.array([r["energy"] for r in records]),
        "step_size": np.full(cfg.iters, eps),
        "new": {f: np.array(v).reshape(cfg.iters, -1) for f, v in new_draws.items()},
        "names": layout.names,
    }


def sample(spec: ModelSpec, data: Dataset, config: SamplerConfig | None = None) -> PosteriorDraws:
    """Run ``chains`` independent NUTS chains; chain c uses the c-th spawned Philox stream."""
    cfg = config or SamplerConfig()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    mode = "prior predictive" if spec.prior_only else "posterior"
    logger.info(f"[sampler] Sampling {mode}: {cfg.chains} chains x ({cfg.warmup} warmup + {cfg.iters} draws), target accept {cfg.target_accept}")
    try:
        if cfg.n_jobs > 1 and cfg.chains > 1:
            with ProcessPoolExecutor(max_workers=min(cfg.n_jobs, cfg.chains)) as pool:
                futures = [pool.submit(_run_chain, spec, data, cfg, seeds[c], c) for c in range(cfg.chains)]
                results = [f.result() for f in futures]
        else:
            results = [_run_chain(spec, data, cfg, seeds[c], c) for c in range(cfg.chains)]
    except Exception as e:
        logger.error(f"[sampler] Sampling failed: {e}")
        raise

    draws = PosteriorDraws(
        names=list(results[0]["names"]),
        draws=np.concatenate([r["draws"] for r in results]),
        chain_id=np.concatenate([np.full(cfg.iters, c) for c in range(cfg.chains)]),
        diverging=np.concatenate([r["diverging"] for r in results]),
        step_size=np.concatenate([r["step_size"] for r in results]),
        tree_depth=np.concatenate([r["tree_depth"] for r in results]),
        n_leapfrog=np.concatenate([r["n_leapfrog"] for r in results]),
        accept_stat=np.concatenate([r["accept_stat"] for r in results]),
        energy=np.concatenate([r["energy"] for r in results]),
        new_cluster_draws={
            re.factor: np.concatenate([r["new"][re.factor] for r in results]) for re in spec.re_specs
        },
        max_treedepth=cfg.max_treedepth,
    )
    n_div = int(draws.diverging.sum())
    if n_div == draws.n_draws:
        logger.error("[sampler] Every post-warmup transition diverged")
        raise AllDivergent(f"all {n_div} post-warmup transitions diverged")
    if n_div:
        logger.warning(f"[sampler] {n_div} divergent transitions after warmup ({100 * draws.divergence_fraction:.1f}%)")
    logger.success(f"[sampler] Collected {draws.n_draws:,} draws of {len(draws.names)} parameters")
    return draws


# --- optimisation -----------------------------------------------------------------

@dataclass
class MapResult:
    params: dict[str, float]
    unconstrained: np.ndarray
    log_posterior: float
    grad_norm: float
    iterations: int
    converged: bool
    message: str


def map_estimate(spec: ModelSpec, data: Dataset, config: MapConfig | None = None) -> MapResult:
    """Quasi-Newton (BFGS) maximization of the log posterior on the unconstrained scale."""
    cfg = config or MapConfig()
    posterior = Posterior(spec, data, jacobian=cfg.jacobian)
    layout = posterior.layout
    if cfg.seed is None:
        x0 = np.zeros(layout.size)
    else:
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        x0, _, _ = _initial_point(posterior.value_and_grad, layout.size, cfg.init_radius, rng)

    def objective(u: np.ndarray) -> tuple[float, np.ndarray]:
        value, grad = posterior.value_and_grad(u)
        if not np.isfinite(value):
            return math.inf, np.zeros_like(u)
        return -value, -grad

    res = minimize(objective, x0, jac=True, method="BFGS", options={"maxiter": cfg.max_iter, "gtol": cfg.gtol})
    grad_norm = float(np.max(np.abs(res.jac))) if res.jac is not None and res.jac.size else 0.0
    if res.status == 1:
        logger.error(f"[map] BFGS hit the iteration limit ({cfg.max_iter}); |grad| = {grad_norm:.3g}")
        raise MaxIterations(f"optimizer stopped after {res.nit} iterations with gradient norm {grad_norm:.3g}")
    if not res.success and grad_norm > 100 * cfg.gtol:
        logger.error(f"[map] Line search failed: {res.message}")
        raise LineSearchFailure(f"{res.message} (gradient norm {grad_norm:.3g})")
    params = dict(zip(layout.names, layout.to_row(res.x)))
    logger.info(f"[map] Converged in {res.nit} iterations, log posterior {-res.fun:.4f}")
    return MapResult(
        params=params,
        unconstrained=res.x,
        log_posterior=float(-res.fun),
        grad_norm=grad_norm,
        iterations=int(res.nit),
        converged=True,
        message=str(res.message),
    )

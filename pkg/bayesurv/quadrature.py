"""
Fixed-order Gauss-Kronrod quadrature on [lower, upper].

The rules are tabulated (non-negative half of each symmetric rule, largest
abscissa first, centre node last) and expanded to full node/weight arrays at
import. An interval may be split into fixed panels at breakpoints where the
integrand has a kink or jump; there is no adaptive subdivision.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteIntegrand, UnsupportedOrder

_KRONROD_TABLES: dict[int, tuple[tuple[float, ...], tuple[float, ...]]] = {
    7: (
        (
            0.960491268708020283423507092629080,
            0.774596669241483377035853079956480,
            0.434243749346802558002071502844628,
            0.000000000000000000000000000000000,
        ),
        (
            0.104656226026467265193823857192073,
            0.268488089868333440728569280666710,
            0.401397414775962222905051818618432,
            0.450916538658474142345110087045571,
        ),
    ),
    11: (
        (
            0.9840853600948424644961729,
            0.9061798459386639927976269,
            0.7541667265708492204408172,
            0.5384693101056830910363144,
            0.2796304131617831934134665,
            0.0000000000000000000000000,
        ),
        (
            0.04258203675108183286450945,
            0.1152333166224733940246188,
            0.1868007965564926574678002,
            0.2410403392286475866999426,
            0.2728498019125589223400631,
            0.2829874178574912132042556,
        ),
    ),
    15: (
        (
            0.991455371120812639206854697526329,
            0.949107912342758524526189684047851,
            0.864864423359769072789712788640926,
            0.741531185599394439863864773280788,
            0.586087235467691130294144845693013,
            0.405845151377397166906606412076961,
            0.207784955007898467600689403773245,
            0.000000000000000000000000000000000,
        ),
        (
            0.022935322010529224963732008058970,
            0.063092092629978553290700663189204,
            0.104790010322250183839876322541518,
            0.140653259715525918745189590510238,
            0.169004726639267902826583426598550,
            0.190350578064785409913256402421014,
            0.204432940075298892414161999234649,
            0.209482141084727828012999174891714,
        ),
    ),
}

SUPPORTED_ORDERS: tuple[int, ...] = tuple(sorted(_KRONROD_TABLES))


@dataclass(frozen=True)
class QuadratureRule:
    """Standardized nodes on (-1, 1) and their weights, ascending by node."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def nodes_on(self, upper: np.ndarray | float, lower: np.ndarray | float = 0.0) -> np.ndarray:
        """Nodes mapped onto [lower, upper]; output shape is ``upper.shape + (Q,)``."""
        upper = np.asarray(upper, dtype=float)[..., None]
        lower = np.asarray(lower, dtype=float)[..., None]
        return lower + 0.5 * (upper - lower) * (1.0 + self.nodes)

    def weights_on(self, upper: np.ndarray | float, lower: np.ndarray | float = 0.0) -> np.ndarray:
        """Weights scaled by the half-width of [lower, upper]."""
        upper = np.asarray(upper, dtype=float)[..., None]
        lower = np.asarray(lower, dtype=float)[..., None]
        return 0.5 * (upper - lower) * self.weights

    def panels_on(
        self,
        upper: np.ndarray | float,
        breaks: Sequence[float] = (),
        lower: np.ndarray | float = 0.0,
    ) -> tuple[np.ndarray, np.ndarray]:
        """
        Composite nodes and weights over [lower, upper] with one panel per gap
        between ``breaks``. Breakpoints are clipped into the interval, so panels
        that fall outside it have zero width and zero weight and every interval
        gets ``(len(breaks) + 1) * Q`` points.
        """
        upper = np.asarray(upper, dtype=float)
        lower = np.broadcast_to(np.asarray(lower, dtype=float), upper.shape)
        inner = np.clip(np.sort(np.asarray(breaks, dtype=float)), lower[..., None], upper[..., None])
        edges = np.concatenate([lower[..., None], inner, upper[..., None]], axis=-1)
        lo, hi = edges[..., :-1], edges[..., 1:]
        shape = upper.shape + (-1,)
        return self.nodes_on(hi, lo).reshape(shape), self.weights_on(hi, lo).reshape(shape)


def _expand(order: int) -> QuadratureRule:
    half_nodes, half_weights = (np.array(a, dtype=float) for a in _KRONROD_TABLES[order])
    nodes = np.concatenate([-half_nodes[:-1], [0.0], half_nodes[:-1][::-1]])
    weights = np.concatenate([half_weights[:-1], half_weights[-1:], half_weights[:-1][::-1]])
    for a in (nodes, weights):
        a.setflags(write=False)
    return QuadratureRule(order=order, nodes=nodes, weights=weights)


_RULES = {order: _expand(order) for order in SUPPORTED_ORDERS}


def make_rule(order: int = 15) -> QuadratureRule:
    if order not in _RULES:
        raise UnsupportedOrder(order, SUPPORTED_ORDERS)
    return _RULES[order]


def integrate(
    rule: QuadratureRule,
    f: Callable[[np.ndarray], np.ndarray],
    upper: float,
    lower: float = 0.0,
    breaks: Sequence[float] = (),
) -> float:
    """(T/2) * sum_q w_q f((T/2)(1 + v_q)) per panel of [lower, upper]; ``f`` receives all nodes at once."""
    x, w = rule.panels_on(upper, breaks, lower)
    values = np.asarray(f(x), dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteIntegrand(int(bad[0]))
    return float(np.sum(w * values))

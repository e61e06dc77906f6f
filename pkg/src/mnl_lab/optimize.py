"""Joint assortment and price optimization through the revenue fixed point.

For utilities h_i(p) that decrease with slope at most -L0, the optimal
expected revenue B solves B = max_{|S| <= K} sum_{i in S} v_i(B), where
v_i(B) is the best value of f_i(p) = -exp(h_i(p)) / h_i'(p) among prices with
p + 1/h_i'(p) = B.  The right-hand side decreases in B, so bisection on
[0, P0] finds the fixed point.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from .model import Offer


class DegenerateBonusError(ValueError):
    """The square-root term is affine; treat the utility as linear instead."""


class UtilityConstructionError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearUtility:
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def slope_bound(self):
        return self.beta

    def value(self, p):
        return self.alpha - self.beta * np.asarray(p, dtype=float)

    def slope(self, p):
        return np.full_like(np.asarray(p, dtype=float), -self.beta)


def degeneracy_threshold(a3, a5):
    return 1e-12 * (1.0 + abs(a3)) * (1.0 + abs(a5))


def knee_price(a2, a3, a4, a5, l0):
    """Price p0 where h~'(p0) = -l0, +inf if h~ is steep everywhere.

    h~'(p) = sqrt(a5) s / sqrt(s^2 + c^2) - a2 with s = p - a4/a5 and
    c^2 = (a3 a5 - a4^2)/a5^2, so the equation inverts in closed form.
    """
    ra5 = math.sqrt(a5)
    if -a2 + ra5 <= -l0:
        return math.inf
    if -a2 - ra5 >= -l0:
        raise UtilityConstructionError(
            f"no price makes the utility slope <= -L0 (a2={a2}, sqrt(a5)={ra5}, L0={l0})")
    r = (a2 - l0) / ra5
    c = math.sqrt(a3 * a5 - a4 * a4) / a5
    return a4 / a5 + r * c / math.sqrt((1.0 - r) * (1.0 + r))


@dataclass(frozen=True)
class ConfUtility:
    """Optimistic utility: convex curve a1 - a2 p + sqrt(a3 - 2 a4 p + a5 p^2)
    up to the knee p0, then the tangent ray of slope -l0."""
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    l0: float
    p0: float = None

    def __post_init__(self):
        if not self.l0 > 0:
            raise ValueError("l0 must be positive")
        if self.a5 < 0 or self.a4 * self.a4 - self.a3 * self.a5 > 0:
            raise UtilityConstructionError("quadratic under the square root must be nonnegative")
        if self.p0 is None:
            if self.degenerate:
                object.__setattr__(self, "p0", math.inf)
            else:
                object.__setattr__(self, "p0", knee_price(self.a2, self.a3, self.a4, self.a5, self.l0))

    @property
    def degenerate(self):
        return self.a3 * self.a5 - self.a4 ** 2 <= degeneracy_threshold(self.a3, self.a5)

    @property
    def slope_bound(self):
        return self.l0

    def row(self):
        return np.array([self.a1, self.a2, self.a3, self.a4, self.a5, self.l0, self.p0])

    def _curve(self, p):
        q = np.maximum(self.a3 - 2 * self.a4 * p + self.a5 * p * p, 0.0)
        return self.a1 - self.a2 * p + np.sqrt(q)

    def _curve_slope(self, p):
        q = self.a3 - 2 * self.a4 * p + self.a5 * p * p
        return (self.a5 * p - self.a4) / np.sqrt(q) - self.a2

    def value(self, p):
        p = np.asarray(p, dtype=float)
        if math.isinf(self.p0):
            return self._curve(p)
        ray = self._curve(self.p0) - self.l0 * (p - self.p0)
        return np.where(p < self.p0, self._curve(np.minimum(p, self.p0)), ray)

    def slope(self, p):
        p = np.asarray(p, dtype=float)
        if math.isinf(self.p0):
            return self._curve_slope(p)
        return np.where(p < self.p0, self._curve_slope(np.minimum(p, self.p0)), -self.l0)


def price_bound(mu, k_cap, l0):
    """(P0, P): P0 bounds the optimal revenue, P = P0 + 1/L0 the optimal prices."""
    if k_cap < 1 or not l0 > 0:
        raise ValueError("need k_cap >= 1 and l0 > 0")
    p0 = math.exp(mu) * (0.6 + math.log(k_cap)) / l0
    return p0, p0 + 1.0 / l0


def candidate_prices_linear(u: LinearUtility, b):
    return [b + 1.0 / u.beta]


def candidate_prices_conf(u: ConfUtility, b):
    if u.degenerate:
        raise DegenerateBonusError("a3 a5 - a4^2 is numerically zero")
    out = np.empty(_kernel.MAX_CAND)
    n = _kernel.candidates(u.row(), float(b), out)
    return sorted(out[:n].tolist())


def _f(u, p):
    return float(np.exp(u.value(p)) / -u.slope(p))


def item_value(u, b):
    """(v, p_best) with v = max f over candidate prices, (0, None) if none."""
    if isinstance(u, LinearUtility):
        p = b + 1.0 / u.beta
        return math.exp(u.alpha - u.beta * b - 1.0) / u.beta, p
    if isinstance(u, ConfUtility):
        if u.degenerate:
            raise DegenerateBonusError("a3 a5 - a4^2 is numerically zero")
        v, p = _kernel.item_values(u.row()[None, :], float(b))
        return (float(v[0]), float(p[0])) if v[0] > 0 else (0.0, None)
    cands = u.candidate_prices(b)
    if not cands:
        return 0.0, None
    vals = [_f(u, p) for p in cands]
    j = int(np.argmax(vals))
    return vals[j], cands[j]


def top_k_values(values, k_cap):
    """Indices of the k largest positive values (lowest index wins ties) and their sum."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(-values, kind="stable")[:k_cap]
    idx = [int(i) for i in order if values[i] > 0]
    return idx, float(np.sum(values[idx])) if idx else 0.0


class _Batch:
    """Utilities split by type so every value evaluation is vectorized."""

    def __init__(self, utilities):
        self.n = len(utilities)
        lin, conf, other = [], [], []
        for i, u in enumerate(utilities):
            if isinstance(u, LinearUtility):
                lin.append(i)
            elif isinstance(u, ConfUtility) and not u.degenerate:
                conf.append(i)
            elif isinstance(u, ConfUtility):
                raise DegenerateBonusError(f"item {i}: degenerate confidence bonus")
            else:
                other.append(i)
        self.lin = np.array(lin, dtype=int)
        self.alpha = np.array([utilities[i].alpha for i in lin])
        self.beta = np.array([utilities[i].beta for i in lin])
        self.conf = np.array(conf, dtype=int)
        self.rows = (np.array([utilities[i].row() for i in conf])
                     if conf else np.zeros((0, 7)))
        self.other = [(i, utilities[i]) for i in other]

    def values(self, b):
        v = np.zeros(self.n)
        p = np.full(self.n, np.nan)
        if self.lin.size:
            v[self.lin] = np.exp(self.alpha - self.beta * b - 1.0) / self.beta
            p[self.lin] = b + 1.0 / self.beta
        if self.conf.size:
            v[self.conf], p[self.conf] = _kernel.item_values(self.rows, b)
        for i, u in self.other:
            vi, pi = item_value(u, b)
            v[i] = vi
            p[i] = np.nan if pi is None else pi
        return v, p


@dataclass(frozen=True)
class OptimizationResult:
    revenue: float
    assortment: tuple
    prices: tuple
    iterations: int
    residual: float
    values: tuple = field(default=(), repr=False)

    @property
    def offer(self):
        return Offer(self.assortment, self.prices)


def utility_mu(utilities):
    """mu = max_i h_i(0) - 1, clamped at 0."""
    h0 = max(float(u.value(0.0)) for u in utilities)
    return max(h0 - 1.0, 0.0)


def search_interval(utilities, k_cap):
    l0 = min(u.slope_bound for u in utilities)
    return price_bound(utility_mu(utilities), k_cap, l0)[0]


def fixed_point_solve(utilities, k_cap, epsilon=None, p0_interval=None):
    """Bisection on the revenue fixed point; returns the optimal offer.

    p0_interval defaults to P0(mu) from the utilities themselves. Without an
    explicit epsilon the tolerance is 1e-6 max(B_r, 1) for the current upper
    bracket B_r, never looser than 1e-6 max(P0, 1); P0 can exceed the optimum
    by many orders of magnitude when utilities are inflated.
    """
    if len(utilities) == 0:
        raise ValueError("no utilities to optimize over")
    if p0_interval is None:
        p0_interval = search_interval(utilities, k_cap)
    relative = epsilon is None
    if relative:
        epsilon = 1e-6 * max(p0_interval, 1.0)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    batch = _Batch(utilities)
    max_iter = math.ceil(math.log2(max(p0_interval / epsilon, 1.0))) + 8
    if relative:
        max_iter += math.ceil(math.log2(max(p0_interval, 1.0)))
    b_l, b_r = 0.0, float(p0_interval)
    it = 0
    while b_r - b_l > (1e-6 * max(b_r, 1.0) if relative else epsilon):
        if it >= max_iter:
            raise NonConvergenceError(f"bisection did not converge in {max_iter} steps")
        b = 0.5 * (b_l + b_r)
        v, _ = batch.values(b)
        _, rhs = top_k_values(v, k_cap)
        if b > rhs:
            b_r = b
        else:
            b_l = b
        it += 1
    b = 0.5 * (b_l + b_r)
    v, p = batch.values(b)
    idx, rhs = top_k_values(v, k_cap)
    return OptimizationResult(b, tuple(idx), tuple(float(p[i]) for i in idx), it,
                              abs(b - rhs), tuple(v.tolist()))


def revenue_under(utilities, assortment, prices):
    """Expected revenue when item i's utility at price p is utilities[i].value(p)."""
    if len(assortment) == 0:
        return 0.0
    h = np.array([float(utilities[i].value(p)) for i, p in zip(assortment, prices)])
    m = max(h.max(), 0.0)
    w = np.exp(h - m)
    return float(np.dot(prices, w) / (np.exp(-m) + w.sum()))

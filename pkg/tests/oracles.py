"""Independent reference computations used only by the tests."""
import itertools
import math

import numpy as np
from scipy.optimize import brentq, minimize_scalar


def lambert_w(z, tol=1e-15):
    """Principal branch of w e^w = z for z >= 0 by Newton's method."""
    w = math.log1p(z)
    for _ in range(100):
        ew = math.exp(w)
        step = (w * ew - z) / (ew * (w + 1.0))
        w -= step
        if abs(step) <= tol * max(1.0, abs(w)):
            break
    return w


def identical_items_revenue(alpha, beta, k):
    return lambert_w(k * math.exp(alpha - 1.0)) / beta


def mnl_revenue(alpha, beta, prices):
    u = alpha - beta * prices
    m = max(u.max(), 0.0)
    w = np.exp(u - m)
    return float(prices @ w / (math.exp(-m) + w.sum()))


def coordinate_ascent(revenue, starts, p_max, grid=2001, sweeps=200):
    """Maximize revenue(prices) by coordinate ascent: a grid search per
    coordinate, then a bounded 1-D refine on the neighbouring grid cells.
    Returns the best value over all starting points."""
    best, best_p = -1.0, None
    g = np.linspace(0.0, p_max, grid)
    for start in starts:
        p = np.array(start, dtype=float)
        val = revenue(p)
        for _ in range(sweeps):
            old = val
            for i in range(p.size):
                def r(x):
                    q = p.copy()
                    q[i] = x
                    return revenue(q)
                vals = [r(x) for x in g]
                j = int(np.argmax(vals))
                lo, hi = g[max(j - 1, 0)], g[min(j + 1, grid - 1)]
                res = minimize_scalar(lambda x: -r(x), bounds=(lo, hi), method="bounded",
                                      options={"xatol": 1e-10})
                p[i] = res.x if -res.fun >= vals[j] else g[j]
                val = r(p[i])
            if val - old <= 1e-13:
                break
        if val > best:
            best, best_p = val, p.copy()
    return best, best_p


def best_prices(alpha, beta, p_max, grid=4001, sweeps=500):
    """Coordinate ascent for linear-utility MNL prices. With the other prices
    fixed, revenue in p_i is (A + p e^{u_i(p)}) / (1 + W + e^{u_i(p)}), so each
    coordinate is a vectorized grid search plus a bounded refine."""
    alpha, beta = np.asarray(alpha, float), np.asarray(beta, float)
    g = np.linspace(0.0, p_max, grid)
    best, best_p = -1.0, None
    for start in (1.0 / beta, np.full(alpha.size, 0.5 * p_max)):
        p = np.array(start, dtype=float)
        val = mnl_revenue(alpha, beta, p)
        for _ in range(sweeps):
            old = val
            for i in range(p.size):
                w = np.exp(alpha - beta * p)
                A = p @ w - p[i] * w[i]
                W = w.sum() - w[i]

                def r(x):
                    e = np.exp(alpha[i] - beta[i] * x)
                    return (A + x * e) / (1.0 + W + e)
                vals = r(g)
                j = int(np.argmax(vals))
                lo, hi = g[max(j - 1, 0)], g[min(j + 1, grid - 1)]
                res = minimize_scalar(lambda x: -r(x), bounds=(lo, hi), method="bounded",
                                      options={"xatol": 1e-12})
                p[i] = res.x if -res.fun >= vals[j] else g[j]
            val = mnl_revenue(alpha, beta, p)
            if val - old <= 1e-14:
                break
        if val > best:
            best, best_p = val, p.copy()
    return best, best_p


def brute_force(alpha, beta, k_cap, p_max):
    """Exhaustive assortment enumeration with per-assortment price search."""
    alpha, beta = np.asarray(alpha, float), np.asarray(beta, float)
    n = alpha.size
    best = (0.0, (), ())
    for size in range(1, k_cap + 1):
        for s in itertools.combinations(range(n), size):
            idx = list(s)
            rev, p = best_prices(alpha[idx], beta[idx], p_max)
            if rev > best[0]:
                best = (rev, s, tuple(p))
    return best


def grid_candidates(value_slope, b, p_hi, n=400_001):
    """Solutions of p + 1/h'(p) = b located by sign changes on a dense grid
    of p in (b, p_hi], refined with Brent's method."""
    def r(p):
        return p + 1.0 / value_slope(p) - b

    ps = np.linspace(b + 1e-6, p_hi, n)
    rs = np.array([r(p) for p in ps]) if n < 1000 else r(ps)
    out = []
    s = np.sign(rs)
    for j in np.nonzero(s[:-1] * s[1:] < 0)[0]:
        out.append(brentq(r, ps[j], ps[j + 1], xtol=1e-14))
    out.extend(ps[np.nonzero(rs == 0)[0]].tolist())
    return sorted(out)


def brute_force_general(utilities, k_cap, p_max, grid=801):
    """Same enumeration for arbitrary utility objects with a ``value`` method."""
    n = len(utilities)
    best = (0.0, (), ())
    for size in range(1, k_cap + 1):
        for s in itertools.combinations(range(n), size):
            def revenue(p):
                h = np.array([float(utilities[i].value(x)) for i, x in zip(s, p)])
                m = max(h.max(), 0.0)
                w = np.exp(h - m)
                return float(p @ w / (math.exp(-m) + w.sum()))
            starts = (np.full(size, 1.0), np.full(size, 0.5 * p_max))
            rev, p = coordinate_ascent(revenue, starts, p_max, grid=grid)
            if rev > best[0]:
                best = (rev, s, tuple(p))
    return best

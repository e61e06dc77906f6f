"""Compiled per-item kernels for the confidence-inflated utility.

Row layout of the parameter array: (a1, a2, a3, a4, a5, l0, p0) with
h~(p) = a1 - a2 p + sqrt(a3 - 2 a4 p + a5 p^2) for p < p0 and the linear ray
of slope -l0 beyond p0.
"""
import numpy as np
from numba import njit

MAX_CAND = 8


@njit(cache=True)
def h_curved(a1, a2, a3, a4, a5, p):
    q = a3 - 2.0 * a4 * p + a5 * p * p
    return a1 - a2 * p + np.sqrt(max(q, 0.0))


@njit(cache=True)
def slope_curved(a2, a3, a4, a5, p):
    q = a3 - 2.0 * a4 * p + a5 * p * p
    return (a5 * p - a4) / np.sqrt(q) - a2


@njit(cache=True)
def _horner(c, deg, x):
    r = c[deg]
    for k in range(deg - 1, -1, -1):
        r = r * x + c[k]
    return r


@njit(cache=True)
def _bisect_poly(c, deg, a, b, fa):
    for _ in range(200):
        m = 0.5 * (a + b)
        if m <= a or m >= b:
            break
        fm = _horner(c, deg, m)
        if fm == 0.0:
            return m
        if (fm > 0.0) == (fa > 0.0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


@njit(cache=True)
def poly_real_roots(coef, lo, hi, out):
    """Real roots of a monic-leading polynomial inside (lo, hi).

    coef is lowest-order first.  Roots of each derivative split the interval
    into monotone pieces for the next-higher derivative (Rolle), from the
    linear derivative up to the polynomial itself.  Returns the root count,
    roots sorted ascending in out[:count].
    """
    deg = coef.size - 1
    # derivs[k] holds the (deg-k)-th derivative, degree k
    derivs = np.zeros((deg + 1, deg + 1))
    for j in range(deg + 1):
        derivs[deg, j] = coef[j]
    for k in range(deg - 1, 0, -1):
        for j in range(k + 1):
            derivs[k, j] = (j + 1) * derivs[k + 1, j + 1]
    roots = np.empty(deg + 2)
    n = 0
    c1 = derivs[1]
    if c1[1] != 0.0:
        r = -c1[0] / c1[1]
        if lo < r < hi:
            roots[0] = r
            n = 1
    pts = np.empty(deg + 2)
    for k in range(2, deg + 1):
        c = derivs[k]
        pts[0] = lo
        for j in range(n):
            pts[j + 1] = roots[j]
        pts[n + 1] = hi
        m = 0
        fa = _horner(c, k, pts[0])
        for j in range(n + 1):
            a, b = pts[j], pts[j + 1]
            fb = _horner(c, k, b)
            if fa == 0.0 and a > lo:
                if m == 0 or roots[m - 1] < a:
                    roots[m] = a
                    m += 1
            elif fa * fb < 0.0:
                roots[m] = _bisect_poly(c, k, a, b, fa)
                m += 1
            fa = fb
        n = m
    for j in range(n):
        out[j] = roots[j]
    return n


@njit(cache=True)
def _z(a2, a3, a4, a5, b, y):
    # h~'(p) + 1/(p - b) at p = b + y
    return slope_curved(a2, a3, a4, a5, b + y) + 1.0 / y


@njit(cache=True)
def candidates(row, b, out):
    """All solutions of p + 1/h'(p) = b; returns count, prices in out."""
    a2, a3, a4, a5, l0, p0 = row[1], row[2], row[3], row[4], row[5], row[6]
    n = 0
    p_lin = b + 1.0 / l0
    if p0 > b:
        # curved-branch roots satisfy 0 < p - b < 1/l0
        ymax = min(p0, p_lin) - b
        if ymax > 0.0:
            disc = a3 * a5 - a4 * a4
            e = a4 / a5 - b
            c2 = disc / (a5 * a5)
            # ((y - e)^2 + c2)^3 - a5 c2^2 y^4: stationary points of z in y = p - b
            base = np.array([e * e + c2, -2.0 * e, 1.0])
            sq = np.zeros(5)
            for i in range(3):
                for j in range(3):
                    sq[i + j] += base[i] * base[j]
            poly = np.zeros(7)
            for i in range(5):
                for j in range(3):
                    poly[i + j] += sq[i] * base[j]
            poly[4] -= a5 * c2 * c2
            delta = min(1e-9 * ymax, 0.5 / (a2 + np.sqrt(a5) + l0))
            crit = np.empty(8)
            ncrit = poly_real_roots(poly, delta, ymax, crit)
            pts = np.empty(ncrit + 2)
            pts[0] = delta
            for j in range(ncrit):
                pts[j + 1] = crit[j]
            pts[ncrit + 1] = ymax
            za = _z(a2, a3, a4, a5, b, pts[0])
            for j in range(ncrit + 1):
                ya, yb = pts[j], pts[j + 1]
                zb = _z(a2, a3, a4, a5, b, yb)
                root = -1.0
                if za == 0.0:
                    root = ya
                elif za * zb < 0.0:
                    lo_, hi_, zlo = ya, yb, za
                    for _ in range(200):
                        mid = 0.5 * (lo_ + hi_)
                        if mid <= lo_ or mid >= hi_:
                            break
                        zm = _z(a2, a3, a4, a5, b, mid)
                        if zm == 0.0:
                            lo_ = hi_ = mid
                            break
                        if (zm > 0.0) == (zlo > 0.0):
                            lo_, zlo = mid, zm
                        else:
                            hi_ = mid
                    root = 0.5 * (lo_ + hi_)
                if root > 0.0 and b + root < p0 and n < out.size:
                    out[n] = b + root
                    n += 1
                za = zb
    if p_lin >= p0 and n < out.size:
        out[n] = p_lin
        n += 1
    return n


@njit(cache=True)
def value_at(row, p):
    """f(p) = -exp(h(p)) / h'(p)."""
    a1, a2, a3, a4, a5, l0, p0 = row[0], row[1], row[2], row[3], row[4], row[5], row[6]
    if p < p0:
        return -np.exp(h_curved(a1, a2, a3, a4, a5, p)) / slope_curved(a2, a3, a4, a5, p)
    h0 = h_curved(a1, a2, a3, a4, a5, p0)
    return np.exp(h0 - l0 * (p - p0)) / l0


@njit(cache=True)
def item_values(params, b):
    n = params.shape[0]
    v = np.zeros(n)
    p = np.full(n, np.nan)
    buf = np.empty(MAX_CAND)
    for i in range(n):
        row = params[i]
        m = candidates(row, b, buf)
        best = -1.0
        for j in range(m):
            f = value_at(row, buf[j])
            if f > best:
                best = f
                p[i] = buf[j]
        if m > 0:
            v[i] = best
    return v, p

"""Parameter learning for the contextual MNL model.

Extended features x~ = (x, -p x) make every utility the inner product
<theta, x~> with theta = (psi, phi).  This module holds the likelihood, its
derivatives, the ball-constrained Newton MLE, the information matrix V and
the optimism / online-Newton machinery built on it.
"""
import math
from dataclasses import dataclass, replace

import numpy as np

from .model import OUTSIDE, ParamVector, default_sigma0
from .optimize import ConfUtility, LinearUtility, degeneracy_threshold, price_bound

RIDGE = 1e-8


def extended_feature(x, p):
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, -p * x], axis=-1)


def extended_features(contexts, prices):
    """Rows (x_i, -p_i x_i) for a stack of contexts and matching prices."""
    contexts = np.asarray(contexts, dtype=float)
    prices = np.asarray(prices, dtype=float)[:, None]
    return np.hstack([contexts, -prices * contexts])


@dataclass(frozen=True)
class InteractionRecord:
    features: np.ndarray  # (m, 2d), one row per offered item
    chosen: int = OUTSIDE  # position in the offer or OUTSIDE

    def __post_init__(self):
        f = np.array(self.features, dtype=float, ndmin=2)
        f.setflags(write=False)
        object.__setattr__(self, "features", f)
        if self.chosen != OUTSIDE and not 0 <= self.chosen < f.shape[0]:
            raise ValueError("chosen must index an offered item or be OUTSIDE")


class RecordBatch:
    """Records padded to a common width: X (n, K, D), mask (n, K), chosen (n,)."""

    def __init__(self, X, mask, chosen, chosen_sum=None):
        self.X, self.mask, self.chosen = X, mask, chosen
        if chosen_sum is None:
            chosen_sum = np.zeros(X.shape[2])
            rows = np.nonzero(chosen >= 0)[0]
            if rows.size:
                chosen_sum = X[rows, chosen[rows]].sum(axis=0)
        self.chosen_sum = chosen_sum

    def __len__(self):
        return self.X.shape[0]

    @classmethod
    def from_records(cls, records, dim2=None):
        records = list(records)
        if dim2 is None:
            dim2 = records[0].features.shape[1] if records else 0
        k = max((r.features.shape[0] for r in records), default=1)
        n = len(records)
        X = np.zeros((n, k, dim2))
        mask = np.zeros((n, k), dtype=bool)
        chosen = np.full(n, OUTSIDE, dtype=int)
        for t, r in enumerate(records):
            m = r.features.shape[0]
            X[t, :m] = r.features
            mask[t, :m] = True
            chosen[t] = r.chosen
        return cls(X, mask, chosen)


class History:
    """Growable record store; keeps the padded arrays and the running sum of
    chosen features so likelihood terms cost one pass over the data."""

    def __init__(self, dim2, k_cap, capacity=256):
        self.dim2, self.k_cap = dim2, k_cap
        self._X = np.zeros((capacity, k_cap, dim2))
        self._mask = np.zeros((capacity, k_cap), dtype=bool)
        self._chosen = np.full(capacity, OUTSIDE, dtype=int)
        self._chosen_sum = np.zeros(dim2)
        self.n = 0

    def __len__(self):
        return self.n

    def append(self, record: InteractionRecord):
        m = record.features.shape[0]
        if m > self.k_cap:
            raise ValueError("record wider than the assortment cap")
        if self.n == self._X.shape[0]:
            grow = self._X.shape[0]
            self._X = np.concatenate([self._X, np.zeros_like(self._X[:grow])])
            self._mask = np.concatenate([self._mask, np.zeros_like(self._mask[:grow])])
            self._chosen = np.concatenate([self._chosen, np.full(grow, OUTSIDE)])
        self._X[self.n, :m] = record.features
        self._mask[self.n, :m] = True
        self._chosen[self.n] = record.chosen
        if record.chosen != OUTSIDE:
            self._chosen_sum += record.features[record.chosen]
        self.n += 1

    def batch(self):
        n = self.n
        return RecordBatch(self._X[:n], self._mask[:n], self._chosen[:n], self._chosen_sum.copy())


def as_batch(records):
    if isinstance(records, RecordBatch):
        return records
    if isinstance(records, History):
        return records.batch()
    if isinstance(records, InteractionRecord):
        return RecordBatch.from_records([records])
    return RecordBatch.from_records(records)


def _theta(theta):
    return theta.theta if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)


def _log_probs(batch, th):
    """Utilities U (n, K), log partition (n,) and probabilities q (n, K)."""
    U = batch.X @ th
    U = np.where(batch.mask, U, -np.inf)
    m = np.maximum(U.max(axis=1), 0.0)
    z = np.exp(-m) + np.exp(U - m[:, None]).sum(axis=1)
    logz = m + np.log(z)
    q = np.exp(U - logz[:, None])
    return U, logz, q


def _nll_value(batch, th, U=None, logz=None):
    if U is None:
        U, logz, _ = _log_probs(batch, th)
    rows = np.nonzero(batch.chosen >= 0)[0]
    return float(logz.sum() - U[rows, batch.chosen[rows]].sum())


def nll(records, theta):
    batch = as_batch(records)
    if len(batch) == 0:
        return 0.0
    return _nll_value(batch, _theta(theta))


def nll_grad(records, theta):
    batch = as_batch(records)
    th = _theta(theta)
    if len(batch) == 0:
        return np.zeros_like(th)
    _, _, q = _log_probs(batch, th)
    return np.einsum("nk,nkd->d", q, batch.X) - batch.chosen_sum


def _hessian(batch, q):
    D = batch.X.shape[2]
    Xf = batch.X.reshape(-1, D)
    M = np.einsum("nk,nkd->nd", q, batch.X)
    return (Xf * q.reshape(-1, 1)).T @ Xf - M.T @ M


def nll_hessian(records, theta):
    batch = as_batch(records)
    _, _, q = _log_probs(batch, _theta(theta))
    H = _hessian(batch, q)
    return 0.5 * (H + H.T)


def fisher_matrix(record: InteractionRecord, theta):
    """X~ᵀ (diag q - q qᵀ) X~ for one record."""
    X = record.features
    u = X @ _theta(theta)
    m = max(u.max(), 0.0)
    w = np.exp(u - m)
    q = w / (np.exp(-m) + w.sum())
    Xq = X.T * q
    H = Xq @ X - np.outer(Xq.sum(axis=1), Xq.sum(axis=1))
    return 0.5 * (H + H.T)


def per_round_grad(record: InteractionRecord, theta):
    X = record.features
    u = X @ _theta(theta)
    m = max(u.max(), 0.0)
    w = np.exp(u - m)
    q = w / (np.exp(-m) + w.sum())
    g = q @ X
    if record.chosen != OUTSIDE:
        g = g - X[record.chosen]
    return g


class InfoMatrix:
    """Symmetric PSD accumulator V with cached ridge-regularized inverse."""

    def __init__(self, dim2_or_mat):
        if np.ndim(dim2_or_mat) == 0:
            self.mat = np.zeros((int(dim2_or_mat), int(dim2_or_mat)))
        else:
            self.mat = np.array(dim2_or_mat, dtype=float)
        self._inv = None

    @property
    def dim2(self):
        return self.mat.shape[0]

    def copy(self):
        return InfoMatrix(self.mat.copy())

    def add(self, inc):
        inc = np.asarray(inc, dtype=float)
        self.mat += 0.5 * (inc + inc.T)
        self._inv = None
        return self

    def add_outer(self, feats, weight=1.0):
        feats = np.atleast_2d(feats)
        return self.add(weight * feats.T @ feats)

    def ridge(self):
        return RIDGE * max(np.trace(self.mat), 1.0)

    def regularized(self):
        return self.mat + self.ridge() * np.eye(self.dim2)

    def inverse(self):
        if self._inv is None:
            A = self.regularized()
            try:
                L = np.linalg.cholesky(A)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError("information matrix is not positive definite") from exc
            Linv = np.linalg.solve(L, np.eye(self.dim2))
            inv = Linv.T @ Linv
            self._inv = 0.5 * (inv + inv.T)
        return self._inv

    def solve(self, b):
        return self.inverse() @ b

    def quad_form(self, v):
        """vᵀ V v."""
        v = np.asarray(v, dtype=float)
        return float(v @ self.mat @ v)

    def inv_quad_form(self, v):
        """vᵀ V⁻¹ v with the ridge."""
        v = np.asarray(v, dtype=float)
        return float(v @ self.inverse() @ v)

    def min_eig(self):
        return float(np.linalg.eigvalsh(self.mat)[0])

    def inverse_blocks(self):
        d = self.dim2 // 2
        inv = self.inverse()
        return inv[:d, :d], inv[:d, d:], inv[d:, d:]


@dataclass(frozen=True)
class EstimatorConfig:
    """None entries are filled from the instance by ``resolved``."""
    sigma0: float = None
    alpha_scale: float = 1.0
    gamma: float = None
    theta_cap: float = 2.0
    tol_grad: float = 1e-7
    max_newton_iter: int = 50
    l0_floor: float = 1e-3

    def resolved(self, dim, k_cap, l0):
        sigma0 = self.sigma0 if self.sigma0 is not None else default_sigma0(dim, l0)
        gamma = self.gamma if self.gamma is not None else default_gamma(k_cap, l0)
        cfg = replace(self, sigma0=sigma0, gamma=gamma)
        for name in ("sigma0", "gamma", "theta_cap", "tol_grad", "l0_floor"):
            if not getattr(cfg, name) > 0:
                raise ValueError(f"{name} must be positive")
        if cfg.alpha_scale < 0 or cfg.max_newton_iter < 1:
            raise ValueError("alpha_scale must be >= 0 and max_newton_iter >= 1")
        return cfg


def default_gamma(k_cap, l0):
    """log 2 / (8 (1 + P)) with P the optimal-price bound at mu = 1."""
    return math.log(2.0) / (8.0 * (1.0 + price_bound(1.0, k_cap, l0)[1]))


@dataclass(frozen=True)
class NewtonResult:
    theta: np.ndarray
    iterations: int
    converged: bool
    value: float
    grad_norm: float


def _project(th, cap):
    r = np.linalg.norm(th)
    return th * (cap / r) if r > cap else th


def _kkt_residual(g, th, cap):
    r = np.linalg.norm(th)
    if r >= cap * (1 - 1e-10):
        n = th / r
        gn = g @ n
        if gn < 0:  # pushing outward is blocked by the ball
            return float(np.linalg.norm(g - gn * n))
    return float(np.linalg.norm(g))


def newton_mle(records, warm_start, theta_cap=2.0, tol_grad=1e-7, max_iter=50):
    """Damped Newton on the NLL restricted to the ball ||theta|| <= theta_cap.

    Each step minimizes the local quadratic model inside the ball, then
    backtracks (Armijo) along the segment towards that point.
    """
    batch = as_batch(records)
    th = _project(_theta(warm_start).astype(float).copy(), theta_cap)
    U, logz, q = _log_probs(batch, th)
    f = _nll_value(batch, th, U, logz)
    g = np.einsum("nk,nkd->d", q, batch.X) - batch.chosen_sum
    D = th.size
    origin = np.zeros(D)
    it = 0
    converged = False
    while True:
        res = _kkt_residual(g, th, theta_cap)
        if res <= tol_grad:
            converged = True
            break
        if it >= max_iter:
            break
        H = _hessian(batch, q)
        H = 0.5 * (H + H.T)
        H[np.diag_indices(D)] += RIDGE * max(np.trace(H), 1.0)
        direction = _ball_qp(H, g, th, origin, theta_cap) - th
        slope = min(g @ direction, 0.0)
        step_ok = False
        tau = 1.0
        while tau > 1e-10:
            cand = _project(th + tau * direction, theta_cap)  # guards rounding only
            Uc, logzc, qc = _log_probs(batch, cand)
            fc = _nll_value(batch, cand, Uc, logzc)
            if fc <= f + 1e-4 * tau * slope and fc <= f:
                step_ok = True
            elif tau == 1.0 and fc <= f + 1e-12 * (1.0 + abs(f)):
                # rounding tie: accept only if the optimality residual clearly improves
                gc = np.einsum("nk,nkd->d", qc, batch.X) - batch.chosen_sum
                step_ok = _kkt_residual(gc, cand, theta_cap) < 0.5 * res
            if step_ok:
                break
            tau *= 0.5
        it += 1
        if not step_ok:
            break
        th, q, f = cand, qc, fc
        g = np.einsum("nk,nkd->d", q, batch.X) - batch.chosen_sum
    return NewtonResult(th, it, converged, f, _kkt_residual(g, th, theta_cap))


def mle_fit(records, config: EstimatorConfig, warm_start) -> ParamVector:
    res = newton_mle(records, warm_start, config.theta_cap, config.tol_grad,
                     config.max_newton_iter)
    return ParamVector.from_theta(res.theta)


def confidence_radius(t, d, horizon, config: EstimatorConfig):
    if t < 1:
        raise ValueError("t must be >= 1")
    core = math.sqrt(d * math.log1p(2.0 * t ** 3 / d)) + math.log(horizon) / config.sigma0
    return config.alpha_scale * core


def conf_bonus_coeffs(context, info: InfoMatrix):
    """(c1, c2, c3) with ||(x, -p x)||²_{V⁻¹} = c1 - 2 c2 p + c3 p²."""
    A, B, C = info.inverse_blocks()
    x = np.asarray(context, dtype=float)
    return float(x @ A @ x), float(x @ (0.5 * (B + B.T)) @ x), float(x @ C @ x)


def conf_bonus_coeffs_batch(contexts, info: InfoMatrix):
    A, B, C = info.inverse_blocks()
    X = np.asarray(contexts, dtype=float)
    Bs = 0.5 * (B + B.T)
    return np.stack([np.einsum("ni,ij,nj->n", X, M, X) for M in (A, Bs, C)], axis=1)


def bonus(c, alpha, p):
    """g(p) = alpha sqrt(c1 - 2 c2 p + c3 p²)."""
    c1, c2, c3 = c
    p = np.asarray(p, dtype=float)
    return alpha * np.sqrt(np.maximum(c1 - 2 * c2 * p + c3 * p * p, 0.0))


def tighten_utility(psi_hat_dot_x, phi_hat_dot_x, c, alpha, l0):
    """Tightest majorant of <psi^,x> - <phi^,x> p + g(p) with slope <= -l0.

    A vanishing bonus returns the plain linear estimate.  When the quadratic
    under the root is a perfect square (the bonus is affine on each side of a
    kink) a3 is nudged up by a relative 1e-12, which only enlarges the bound.
    """
    a1, a2 = float(psi_hat_dot_x), float(phi_hat_dot_x)
    s = alpha * alpha
    a3, a4, a5 = s * c[0], s * c[1], s * c[2]
    if a5 <= 1e-300 or (a3 <= 0 and a5 <= degeneracy_threshold(a3, a5)):
        if a2 < l0:
            raise_construction(a2, 0.0, l0)
        return LinearUtility(a1 + math.sqrt(max(a3, 0.0)), a2)
    if -a2 - math.sqrt(a5) >= -l0:
        raise_construction(a2, a5, l0)
    while a3 * a5 - a4 * a4 <= degeneracy_threshold(a3, a5):
        a3 = a3 + 4 * degeneracy_threshold(a3, a5) / a5
    return ConfUtility(a1, a2, a3, a4, a5, l0)


def raise_construction(a2, a5, l0):
    from .optimize import UtilityConstructionError
    raise UtilityConstructionError(
        f"utility estimate cannot be made decreasing: a2={a2:.4g}, sqrt(a5)={math.sqrt(a5):.4g}, L0={l0}")


def _ball_qp(M, lin, base, center, radius):
    """argmin 1/2 (x - base)ᵀ M (x - base) + linᵀ (x - base) s.t. ||x - center|| <= radius,
    M symmetric positive definite. The returned point is always feasible."""
    free = base - np.linalg.solve(M, lin)
    if np.linalg.norm(free - center) <= radius:
        return free
    w, Q = np.linalg.eigh(M)
    b = Q.T @ (M @ (base - center) - lin)

    def offset(lam):
        return b / (w + lam)

    lo = max(0.0, -w.min())
    hi = lo + np.linalg.norm(b) / radius + 1e-300
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        n = np.linalg.norm(offset(mid))
        if n > radius:
            lo = mid
        else:
            hi = mid
            if radius - n <= 1e-12 * radius:
                break
    return center + Q @ offset(hi)


def ons_update(theta_prev, grad, v: InfoMatrix, theta0, gamma):
    """argmin 1/2 ||theta - theta_prev||²_V + 4 (theta - theta_prev)ᵀ g
    subject to ||theta - theta0|| <= gamma / 2."""
    g = np.asarray(grad, dtype=float)
    out = _ball_qp(v.regularized(), 4.0 * g, _theta(theta_prev), _theta(theta0), 0.5 * gamma)
    return ParamVector.from_theta(out)


def estimate_l0(phi_hat, contexts_seen, sigma0, k_cap, horizon, l0_floor=1e-3):
    phi = _theta(phi_hat)
    X = np.asarray(contexts_seen, dtype=float).reshape(-1, phi.size)
    if X.shape[0] == 0:
        raise ValueError("no pilot contexts")
    est = float((X @ phi).min()) - horizon ** -0.25 * math.sqrt(k_cap / sigma0)
    return max(est, l0_floor)

"""Decision policies: CAP, CAP-ONS and the oracle / random / greedy baselines.

Every policy exposes ``act(round) -> Offer`` and
``update(round, offer, chosen)``; learners also expose their ``state``.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import (EstimatorConfig, History, InfoMatrix, InteractionRecord,
                         conf_bonus_coeffs_batch, confidence_radius, estimate_l0,
                         extended_features, fisher_matrix, mle_fit, ons_update,
                         per_round_grad, tighten_utility)
from .model import OUTSIDE, ContextRound, Offer, ParamVector, ProblemInstance
from .optimize import (LinearUtility, UtilityConstructionError, fixed_point_solve,
                       price_bound, utility_mu)

log = logging.getLogger(__name__)

INIT, LEARN = "initialization", "learning"


@dataclass(frozen=True)
class PolicyConfig:
    t0: object = "auto"  # "auto" or a positive int
    t0_scale: float = 2.0
    epsilon_opt: float = None  # None: relative 1e-6 tolerance (see fixed_point_solve)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    ons_alpha_scale: float = None  # None: same as estimator.alpha_scale
    l0_mode: str = "known"
    refit_every: int = 1

    def __post_init__(self):
        if self.t0 != "auto" and not (isinstance(self.t0, (int, np.integer)) and self.t0 >= 1):
            raise ValueError(f"t0 must be 'auto' or a positive integer, got {self.t0!r}")
        if self.l0_mode not in ("known", "estimated"):
            raise ValueError("l0_mode must be 'known' or 'estimated'")
        if self.refit_every < 1 or not self.t0_scale > 0:
            raise ValueError("refit_every >= 1 and t0_scale > 0 required")


def resolve_t0(config: PolicyConfig, dim, k_cap, horizon):
    if config.t0 != "auto":
        return int(config.t0)
    t0 = math.ceil(config.t0_scale * dim * k_cap * math.log(max(horizon, 2)))
    return int(min(max(t0, 2 * dim), max(horizon // 4, 1)))


@dataclass
class PolicyState:
    phase: str
    v: InfoMatrix
    theta_hat: ParamVector
    records: object  # History (CAP) or last InteractionRecord (CAP-ONS)
    round: int

    def nbytes(self):
        size = self.v.mat.nbytes + self.theta_hat.psi.nbytes + self.theta_hat.phi.nbytes
        if isinstance(self.records, History):
            size += self.records.n * self.records.k_cap * self.records.dim2 * 8
        elif isinstance(self.records, InteractionRecord):
            size += self.records.features.nbytes
        return size


def random_assortment(n_items, k_cap, rng):
    size = int(rng.integers(1, k_cap + 1))
    return tuple(sorted(int(i) for i in rng.choice(n_items, size=size, replace=False)))


def true_utilities(instance: ProblemInstance, rnd: ContextRound):
    X = rnd.contexts
    return [LinearUtility(a, b) for a, b in zip(X @ instance.psi_star, X @ instance.phi_star)]


def solve_offer(utilities, k_cap, l0, epsilon=None, index=None):
    """Run the optimizer on utilities; map positions back through index."""
    if not utilities:
        return Offer(), None
    p0 = price_bound(utility_mu(utilities), k_cap, l0)[0]
    res = fixed_point_solve(utilities, k_cap, epsilon, p0)
    s = res.assortment if index is None else tuple(int(index[i]) for i in res.assortment)
    order = np.argsort(s, kind="stable")
    return Offer(tuple(s[j] for j in order), tuple(res.prices[j] for j in order)), res


class OraclePolicy:
    name = "oracle"

    def __init__(self, instance, config=None, rng=None):
        self.instance = instance
        self.config = config or PolicyConfig()

    def act(self, rnd):
        utils = true_utilities(self.instance, rnd)
        l0 = min(u.beta for u in utils)
        return solve_offer(utils, self.instance.assort_cap, l0, self.config.epsilon_opt)[0]

    def update(self, rnd, offer, chosen):
        pass


class RandomPolicy:
    name = "random"

    def __init__(self, instance, config=None, rng=None):
        self.instance = instance
        self.rng = rng if rng is not None else np.random.default_rng()
        self.p_max = price_bound(1.0, instance.assort_cap, instance.l0)[1]

    def act(self, rnd):
        s = random_assortment(self.instance.n_items, self.instance.assort_cap, self.rng)
        return Offer(s, self.rng.uniform(0.0, self.p_max, size=len(s)))

    def update(self, rnd, offer, chosen):
        pass


class CapPolicy:
    """Optimistic assortment pricing: random initialization, then per round an
    MLE refit, confidence-inflated utilities and the exact optimizer."""
    name = "cap"

    def __init__(self, instance: ProblemInstance, config: PolicyConfig = None, rng=None):
        self.config = config = config or PolicyConfig()
        self.n, self.k, self.d = instance.n_items, instance.assort_cap, instance.dim
        self.horizon = instance.horizon
        self.rng = rng if rng is not None else np.random.default_rng()
        self.l0 = instance.l0
        t0 = resolve_t0(config, self.d, self.k, self.horizon)
        if config.l0_mode == "estimated":
            t0 = max(t0, math.ceil(math.sqrt(self.horizon)))
            self._pilot_contexts = []
        self.t0 = t0
        self.est = config.estimator.resolved(self.d, self.k, self.l0)
        self.alpha_scale = self.est.alpha_scale
        self.v = InfoMatrix(2 * self.d)
        self.history = History(2 * self.d, self.k)
        self.theta_hat = ParamVector.zeros(self.d)
        self.round = 0
        self.alpha = 0.0
        self.excluded = 0
        self.lambda_min_t0 = None
        self._acting_theta = None

    # -- bookkeeping ---------------------------------------------------------
    @property
    def phase(self):
        return INIT if self.round + 1 < self.t0 else LEARN

    @property
    def state(self):
        return PolicyState(self.phase, self.v, self.theta_hat, self.history, self.round)

    def diagnostics(self):
        return {"lambda_min_v_t0": self.lambda_min_t0, "excluded_items": self.excluded,
                "t0": self.t0, "l0_used": self.l0}

    def _check_round(self, rnd):
        if rnd.round_index != self.round + 1:
            raise ValueError(f"expected round {self.round + 1}, got {rnd.round_index}")

    # -- acting --------------------------------------------------------------
    def act(self, rnd: ContextRound) -> Offer:
        self._check_round(rnd)
        t = rnd.round_index
        if t < self.t0:
            if self.config.l0_mode == "estimated":
                self._pilot_contexts.append(np.array(rnd.contexts))
            s = random_assortment(self.n, self.k, self.rng)
            return Offer(s, self.rng.uniform(1.0, 2.0, size=len(s)))
        if t == self.t0:
            self._start_learning()
        self._refresh_estimate(t)
        self.alpha = confidence_radius(t, self.d, self.horizon, self._radius_config())
        self._acting_theta = self.theta_hat
        utils, index = self._utilities(rnd)
        return solve_offer(utils, self.k, self.l0, self.config.epsilon_opt, index)[0]

    def _radius_config(self):
        return self.est

    def _start_learning(self):
        self.lambda_min_t0 = self.v.min_eig()
        if self.config.l0_mode == "estimated":
            pilot = mle_fit(self.history, self.est, self.theta_hat)
            ctx = np.concatenate(self._pilot_contexts) if self._pilot_contexts else np.zeros((0, self.d))
            self.l0 = estimate_l0(pilot.phi, ctx, self.est.sigma0, self.k, self.horizon,
                                  self.est.l0_floor)
            self.est = self.config.estimator.resolved(self.d, self.k, self.l0)
            self._pilot_contexts = []

    def _refresh_estimate(self, t):
        if (t - self.t0) % self.config.refit_every == 0 and len(self.history):
            self.theta_hat = mle_fit(self.history, self.est, self.theta_hat)

    def _utilities(self, rnd):
        X = rnd.contexts
        a1 = X @ self.theta_hat.psi
        a2 = X @ self.theta_hat.phi
        C = conf_bonus_coeffs_batch(X, self.v)
        utils, index = [], []
        for i in range(self.n):
            try:
                utils.append(tighten_utility(a1[i], a2[i], C[i], self.alpha, self.l0))
                index.append(i)
            except UtilityConstructionError as exc:
                self.excluded += 1
                log.info("round %d: item %d excluded (%s)", rnd.round_index, i, exc)
        return utils, index

    # -- learning ------------------------------------------------------------
    def _record(self, rnd, offer, chosen):
        feats = extended_features(rnd.contexts[list(offer.assortment)], offer.prices)
        pos = OUTSIDE if chosen == OUTSIDE else offer.assortment.index(chosen)
        return InteractionRecord(feats, pos)

    def update(self, rnd, offer, chosen):
        self._check_round(rnd)
        if not offer.assortment:
            self.round += 1
            return
        rec = self._record(rnd, offer, chosen)
        if rnd.round_index < self.t0:
            self.v.add_outer(rec.features, 1.0 / self.k ** 2)
        else:
            self.v.add(fisher_matrix(rec, self._acting_theta))
        self._store(rec)
        self.round += 1

    def _store(self, rec):
        self.history.append(rec)

    def confidence_check(self, theta_star: ParamVector):
        """(||theta_hat - theta*||_V, alpha_t) for the estimate used to act."""
        if self._acting_theta is None:
            return None
        diff = self._acting_theta.theta - theta_star.theta
        return math.sqrt(max(self.v.quad_form(diff), 0.0)), self.alpha


class GreedyPolicy(CapPolicy):
    """Plug-in estimate without optimism, price sensitivity floored at L0."""
    name = "greedy"

    def _utilities(self, rnd):
        X = rnd.contexts
        a1 = X @ self.theta_hat.psi
        a2 = np.maximum(X @ self.theta_hat.phi, self.l0)
        return [LinearUtility(a, b) for a, b in zip(a1, a2)], list(range(self.n))


class CapOnsPolicy(CapPolicy):
    """CAP with one projected online-Newton step per round instead of a refit.
    After initialization only the last record is kept."""
    name = "cap-ons"

    def __init__(self, instance, config=None, rng=None):
        super().__init__(instance, config, rng)
        self.theta0 = None
        self.last_record = None
        self._fresh = False  # a record arrived since the last ONS step
        s = self.config.ons_alpha_scale
        self._ons_est = self.est if s is None else EstimatorConfig(
            **{**self.est.__dict__, "alpha_scale": s})

    @property
    def state(self):
        recs = self.history if self.theta0 is None else self.last_record
        return PolicyState(self.phase, self.v, self.theta_hat, recs, self.round)

    def _radius_config(self):
        return self._ons_est

    def _start_learning(self):
        super()._start_learning()
        s = self.config.ons_alpha_scale
        self._ons_est = self.est if s is None else EstimatorConfig(
            **{**self.est.__dict__, "alpha_scale": s})

    def _refresh_estimate(self, t):
        if self.theta0 is None:
            if len(self.history):
                self.theta_hat = mle_fit(self.history, self.est, self.theta_hat)
            self.theta0 = self.theta_hat
            self.history = None  # pilot data no longer needed
            return
        if self._fresh:
            g = per_round_grad(self.last_record, self.theta_hat)
            self.theta_hat = ons_update(self.theta_hat, g, self.v, self.theta0, self.est.gamma)
            self._fresh = False

    def _store(self, rec):
        if self.theta0 is None:
            self.history.append(rec)
        self.last_record = rec
        self._fresh = self.theta0 is not None


POLICIES = {"cap": CapPolicy, "cap-ons": CapOnsPolicy, "oracle": OraclePolicy,
            "random": RandomPolicy, "greedy": GreedyPolicy}


def make_policy(name, instance, config=None, rng=None):
    try:
        cls = POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None
    return cls(instance, config, rng)

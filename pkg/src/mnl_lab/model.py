"""Ground-truth MNL choice model and the synthetic instance generator."""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .rng import substream

OUTSIDE = -1  # choice marker for the no-purchase option


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ParamVector:
    psi: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        psi, phi = _frozen(self.psi).ravel(), _frozen(self.phi).ravel()
        if psi.shape != phi.shape:
            raise ValueError("psi and phi must have the same length")
        if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(phi))):
            raise ValueError("parameter entries must be finite")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "phi", phi)

    @property
    def dim(self):
        return self.psi.size

    @property
    def theta(self):
        return np.concatenate([self.psi, self.phi])

    @classmethod
    def from_theta(cls, theta):
        theta = np.asarray(theta, dtype=float)
        d = theta.size // 2
        return cls(theta[:d], theta[d:])

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d), np.zeros(d))


@dataclass(frozen=True)
class InstanceConfig:
    n_items: int
    assort_cap: int
    dim: int
    l0: float
    horizon: int

    def __post_init__(self):
        if self.assort_cap < 1 or self.n_items < self.assort_cap:
            raise ValueError("need 1 <= K <= N")
        if self.dim < 1:
            raise ValueError("need d >= 1")
        if not self.l0 > 0:
            raise ValueError("need L0 > 0")
        if self.l0 > 0.5:
            raise ValueError(f"L0 = {self.l0} > 1/2 leaves an empty context interval")
        if self.horizon < 1:
            raise ValueError("need T >= 1")

    def context_interval(self):
        return context_interval(self.dim, self.l0)


def context_interval(dim, l0):
    """Support [lo, hi] of every context / phi* coordinate."""
    lo = np.sqrt(l0 / dim)
    hi = np.sqrt(1.0 / (2 * dim))
    if lo > hi:
        if l0 > 0.5:
            raise ValueError(f"L0 = {l0} > 1/2 leaves an empty context interval")
        hi = lo  # rounding when L0 == 1/2
    return lo, hi


def default_sigma0(dim, l0):
    lo, hi = context_interval(dim, l0)
    return dim * (0.5 * (lo + hi)) ** 2


@dataclass(frozen=True)
class ProblemInstance:
    n_items: int
    assort_cap: int
    dim: int
    psi_star: np.ndarray
    phi_star: np.ndarray
    l0: float
    horizon: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "psi_star", _frozen(self.psi_star))
        object.__setattr__(self, "phi_star", _frozen(self.phi_star))
        if self.assort_cap < 1 or self.n_items < self.assort_cap:
            raise ValueError("need 1 <= K <= N")
        if self.psi_star.size != self.dim or self.phi_star.size != self.dim:
            raise ValueError("parameter length must equal dim")
        if not self.l0 > 0:
            raise ValueError("need L0 > 0")

    @property
    def theta(self):
        return ParamVector(self.psi_star, self.phi_star)

    @property
    def config(self):
        return InstanceConfig(self.n_items, self.assort_cap, self.dim, self.l0, self.horizon)


@dataclass(frozen=True)
class ContextRound:
    contexts: np.ndarray  # (N, d)
    round_index: int = 1

    def __post_init__(self):
        c = _frozen(self.contexts)
        if c.ndim != 2:
            raise ValueError("contexts must be an (N, d) array")
        object.__setattr__(self, "contexts", c)


@dataclass(frozen=True)
class Offer:
    assortment: tuple = ()
    prices: tuple = ()

    def __post_init__(self):
        s = tuple(int(i) for i in self.assortment)
        p = tuple(float(v) for v in np.atleast_1d(np.asarray(self.prices, dtype=float)))
        if len(s) != len(p):
            raise ValueError("one price per offered item is required")
        if len(set(s)) != len(s):
            raise ValueError("assortment items must be distinct")
        if any(not (v >= 0) for v in p):
            raise ValueError("prices must be nonnegative")
        object.__setattr__(self, "assortment", s)
        object.__setattr__(self, "prices", p)

    def __len__(self):
        return len(self.assortment)

    def validate(self, rnd: ContextRound, k_cap=None):
        n = rnd.contexts.shape[0]
        if any(i < 0 or i >= n for i in self.assortment):
            raise ValueError("offer references an item outside the catalog")
        if k_cap is not None and len(self) > k_cap:
            raise ValueError(f"offer has {len(self)} items, cap is {k_cap}")


def utility(theta: ParamVector, x, p):
    x = np.asarray(x, dtype=float)
    return x @ theta.psi - (x @ theta.phi) * p


def offer_utilities(offer: Offer, theta: ParamVector, rnd: ContextRound):
    if not offer.assortment:
        return np.zeros(0)
    x = rnd.contexts[list(offer.assortment)]
    return x @ theta.psi - (x @ theta.phi) * np.asarray(offer.prices)


def choice_probabilities(offer: Offer, theta: ParamVector, rnd: ContextRound):
    """Choice probabilities with the outside option first.

    Returns an array of length |S|+1: entry 0 is the no-purchase probability,
    entry j+1 belongs to ``offer.assortment[j]``.
    """
    u = np.concatenate([[0.0], offer_utilities(offer, theta, rnd)])
    return np.exp(u - logsumexp(u))


def expected_revenue(offer: Offer, theta: ParamVector, rnd: ContextRound):
    if not offer.assortment:
        return 0.0
    q = choice_probabilities(offer, theta, rnd)
    return float(np.dot(offer.prices, q[1:]))


def sample_choice(offer: Offer, theta: ParamVector, rnd: ContextRound, rng):
    """Catalog index of the purchased item, or OUTSIDE.

    Always consumes exactly one uniform draw so the stream stays aligned
    regardless of the offer.
    """
    u = rng.random()
    q = choice_probabilities(offer, theta, rnd)
    j = int(np.searchsorted(np.cumsum(q), u, side="right"))
    j = min(j, q.size - 1)
    while q[j] == 0.0:  # never land on a zero-probability slot via rounding
        j -= 1
    return OUTSIDE if j == 0 else offer.assortment[j - 1]


def generate_instance(config: InstanceConfig, seed: int) -> ProblemInstance:
    rng = substream(seed, "instance")
    d = config.dim
    z = rng.standard_normal(d)
    psi = 0.5 * z / np.linalg.norm(z)
    lo, hi = config.context_interval()
    phi = rng.uniform(lo, hi, size=d) if hi > lo else np.full(d, lo)
    return ProblemInstance(config.n_items, config.assort_cap, d, psi, phi,
                           config.l0, config.horizon, seed)


def generate_contexts(instance: ProblemInstance, t: int, rng) -> ContextRound:
    lo, hi = context_interval(instance.dim, instance.l0)
    shape = (instance.n_items, instance.dim)
    # draw even when the interval is a single point to keep streams aligned
    x = lo + (hi - lo) * rng.random(shape)
    return ContextRound(x, t)

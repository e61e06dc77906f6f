"""Seeded simulation runs, regret accounting and multi-seed aggregation."""
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import (InstanceConfig, expected_revenue, generate_contexts,
                    generate_instance, sample_choice)
from .policies import PolicyConfig, make_policy, solve_offer, true_utilities
from .rng import substream

THREADS_ENV = "MNL_LAB_THREADS"


class InsufficientDataError(ValueError):
    pass


class RoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunSpec:
    instance: InstanceConfig
    policy: str = "cap"
    config: PolicyConfig = field(default_factory=PolicyConfig)
    seeds: tuple = (0,)
    trace_level: str = "summary"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.trace_level not in ("summary", "per_round"):
            raise ValueError("trace_level must be 'summary' or 'per_round'")


@dataclass
class RegretTrace:
    """Rows at checkpoint rounds (summary) or every round (per_round)."""
    t: np.ndarray
    optimal_revenue: np.ndarray
    policy_revenue: np.ndarray
    gap: np.ndarray
    realized_choice: np.ndarray
    cum_regret: np.ndarray
    seconds: np.ndarray = None  # policy act+update wall time, per_round only


@dataclass
class RunSummary:
    seed: int
    final_regret: float
    checkpoints: tuple  # ((t, cum_regret), ...) ascending
    wall_time: float
    diagnostics: dict = field(default_factory=dict)

    def checkpoint_dict(self):
        return dict(self.checkpoints)


def checkpoint_rounds(horizon):
    ts = [2 ** k for k in range(int(math.log2(horizon)) + 1) if 2 ** k <= horizon]
    if ts[-1] != horizon:
        ts.append(horizon)
    return ts


def oracle_offer(instance, rnd, epsilon=None):
    utils = true_utilities(instance, rnd)
    l0 = min(u.beta for u in utils)
    return solve_offer(utils, instance.assort_cap, l0, epsilon)[0]


def oracle_track(instance_config: InstanceConfig, seed, epsilon=None):
    """Optimal expected revenue of every round; policy-independent given the seed."""
    inst = generate_instance(instance_config, seed)
    ctx_rng = substream(seed, "contexts")
    out = np.empty(inst.horizon)
    for t in range(1, inst.horizon + 1):
        rnd = generate_contexts(inst, t, ctx_rng)
        out[t - 1] = expected_revenue(oracle_offer(inst, rnd, epsilon), inst.theta, rnd)
    return out


def run_single(spec: RunSpec, seed, oracle_revenues=None, timing=False):
    inst = generate_instance(spec.instance, seed)
    theta = inst.theta
    ctx_rng = substream(seed, "contexts")
    choice_rng = substream(seed, "choices")
    policy = make_policy(spec.policy, inst, spec.config, substream(seed, "policy"))
    T = inst.horizon
    eps = spec.config.epsilon_opt
    per_round = spec.trace_level == "per_round"
    keep = np.arange(1, T + 1) if per_round else np.array(checkpoint_rounds(T))
    keep_mask = np.zeros(T + 1, dtype=bool)
    keep_mask[keep] = True
    rows = {k: [] for k in ("opt", "pol", "gap", "choice", "cum")}
    seconds = np.empty(T) if (timing or per_round) else None
    cum = 0.0
    min_raw_gap = math.inf
    checks, inside = 0, 0
    start = time.perf_counter()
    for t in range(1, T + 1):
        try:
            rnd = generate_contexts(inst, t, ctx_rng)
            if oracle_revenues is None:
                opt = expected_revenue(oracle_offer(inst, rnd, eps), theta, rnd)
            else:
                opt = float(oracle_revenues[t - 1])
            tic = time.perf_counter()
            offer = policy.act(rnd)
            offer.validate(rnd, inst.assort_cap)
            pol = expected_revenue(offer, theta, rnd)
            choice = sample_choice(offer, theta, rnd, choice_rng)
            conf = policy.confidence_check(theta) if hasattr(policy, "confidence_check") else None
            if conf is not None:
                checks += 1
                inside += conf[0] <= conf[1]
            policy.update(rnd, offer, choice)
            if seconds is not None:
                seconds[t - 1] = time.perf_counter() - tic
        except Exception as exc:
            raise RoundError(f"seed {seed}, round {t}: {type(exc).__name__}: {exc}") from exc
        raw = opt - pol
        min_raw_gap = min(min_raw_gap, raw)
        gap = raw if raw > 0.0 else 0.0  # negative only within oracle tolerance
        cum += gap
        if keep_mask[t]:
            rows["opt"].append(opt)
            rows["pol"].append(pol)
            rows["gap"].append(gap)
            rows["choice"].append(choice)
            rows["cum"].append(cum)
    wall = time.perf_counter() - start
    trace = RegretTrace(keep, np.array(rows["opt"]), np.array(rows["pol"]), np.array(rows["gap"]),
                        np.array(rows["choice"], dtype=int), np.array(rows["cum"]), seconds)
    cps = checkpoint_rounds(T)
    cum_at = dict(zip(trace.t.tolist(), trace.cum_regret.tolist()))
    diag = dict(policy.diagnostics()) if hasattr(policy, "diagnostics") else {}
    diag["min_raw_gap"] = float(min_raw_gap)
    if hasattr(policy, "theta_hat"):
        diag["theta_error"] = float(np.linalg.norm(policy.theta_hat.theta - theta.theta))
    diag["ellipsoid_frequency"] = inside / checks if checks else None
    summary = RunSummary(int(seed), float(cum), tuple((t, cum_at[t]) for t in cps), wall, diag)
    return trace, summary


def fit_slope(checkpoints):
    """Least-squares slope of log cum_regret against log t over the second half
    of the horizon on the log scale (t >= sqrt(T))."""
    if isinstance(checkpoints, RunSummary):
        checkpoints = checkpoints.checkpoints
    if isinstance(checkpoints, dict):
        checkpoints = sorted(checkpoints.items())
    pts = np.array([(t, r) for t, r in checkpoints], dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise InsufficientDataError("no checkpoints")
    horizon = pts[:, 0].max()
    sel = pts[(pts[:, 0] >= math.sqrt(horizon)) & (pts[:, 1] > 0)]
    if sel.shape[0] < 4:
        raise InsufficientDataError(
            f"need >= 4 positive checkpoints with t >= sqrt(T), have {sel.shape[0]}")
    return float(np.polyfit(np.log(sel[:, 0]), np.log(sel[:, 1]), 1)[0])


def _mean_std(values):
    # fsum is exactly rounded, so the result does not depend on seed order
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1) if n > 1 else 0.0
    return mean, math.sqrt(var)


def aggregate(summaries):
    """{t: (mean, std)} of cum_regret over runs; sample std (0 for one run)."""
    if not summaries:
        return {}
    ts = [t for t, _ in summaries[0].checkpoints]
    per = [s.checkpoint_dict() for s in summaries]
    return {t: _mean_std([p[t] for p in per]) for t in ts}


@dataclass
class BatchResult:
    spec: RunSpec
    summaries: list  # successful runs, in spec seed order
    traces: dict  # seed -> RegretTrace
    aggregate: dict
    failures: dict  # seed -> error message

    def slopes(self):
        out = {}
        for s in self.summaries:
            try:
                out[s.seed] = fit_slope(s)
            except InsufficientDataError:
                out[s.seed] = None
        return out


def worker_count(n_tasks):
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if cap < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
    else:
        cap = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    return max(1, min(cap or 1, n_tasks))


def _run_task(args):
    spec, seed, oracle_revenues = args
    try:
        return seed, run_single(spec, seed, oracle_revenues), None
    except Exception as exc:  # reported as a partial failure
        return seed, None, f"{type(exc).__name__}: {exc}"


def run_batch(spec: RunSpec, workers=None, oracle_tracks=None):
    """Run every seed (in worker processes when workers > 1) and aggregate."""
    oracle_tracks = oracle_tracks or {}
    tasks = [(spec, s, oracle_tracks.get(s)) for s in spec.seeds]
    workers = worker_count(len(tasks)) if workers is None else max(1, min(workers, len(tasks)))
    if workers == 1:
        results = [_run_task(a) for a in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks))
    by_seed = {seed: (res, err) for seed, res, err in results}
    summaries, traces, failures = [], {}, {}
    for s in spec.seeds:
        res, err = by_seed[s]
        if err is not None:
            failures[s] = err
        else:
            traces[s] = res[0]
            summaries.append(res[1])
    return BatchResult(spec, summaries, traces, aggregate(summaries), failures)

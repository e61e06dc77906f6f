import math
import random

import numpy as np
import pytest

from mnl_lab import policies
from mnl_lab.harness import (InsufficientDataError, RoundError, RunSpec, RunSummary, aggregate,
                             checkpoint_rounds, fit_slope, oracle_track, run_batch, run_single,
                             worker_count)
from mnl_lab.estimation import EstimatorConfig
from mnl_lab.model import InstanceConfig
from mnl_lab.optimize import price_bound
from mnl_lab.policies import PolicyConfig

SMALL = InstanceConfig(n_items=5, assort_cap=2, dim=2, l0=0.3, horizon=256)


def test_checkpoints():
    assert checkpoint_rounds(256) == [1, 2, 4, 8, 16, 32, 64, 128, 256]
    assert checkpoint_rounds(100) == [1, 2, 4, 8, 16, 32, 64, 100]
    assert checkpoint_rounds(1) == [1]


def test_oracle_has_no_regret():
    spec = RunSpec(SMALL, "oracle", seeds=(3,), trace_level="per_round")
    trace, summary = run_single(spec, 3)
    eps = 1e-6 * max(price_bound(1.0, SMALL.assort_cap, SMALL.l0)[0], 1.0)
    assert summary.final_regret <= 5 * eps * SMALL.horizon
    assert summary.diagnostics["min_raw_gap"] >= -5 * eps


def test_trace_invariants_and_additivity():
    spec = RunSpec(SMALL, "cap", PolicyConfig(t0=20), seeds=(4,), trace_level="per_round")
    trace, summary = run_single(spec, 4)
    assert trace.t.tolist() == list(range(1, 257))
    assert np.all(np.diff(trace.cum_regret) >= 0)
    np.testing.assert_allclose(trace.cum_regret, np.cumsum(trace.gap), rtol=0,
                               atol=1e-9 * SMALL.horizon)
    assert np.all(trace.optimal_revenue >= trace.policy_revenue - 1e-9)
    assert [t for t, _ in summary.checkpoints] == checkpoint_rounds(256)
    assert summary.final_regret == trace.cum_regret[-1]
    assert trace.seconds.shape == (256,)
    d = summary.diagnostics
    assert d["lambda_min_v_t0"] > 0 and d["theta_error"] >= 0
    assert 0 <= d["ellipsoid_frequency"] <= 1


def test_replay_is_identical():
    spec = RunSpec(SMALL, "cap", PolicyConfig(t0=20), seeds=(5,))
    a, sa = run_single(spec, 5)
    b, sb = run_single(spec, 5)
    for name in ("t", "optimal_revenue", "policy_revenue", "gap", "realized_choice", "cum_regret"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert sa.checkpoints == sb.checkpoints


def test_shared_oracle_track_changes_nothing():
    spec = RunSpec(SMALL, "random", seeds=(6,))
    own, _ = run_single(spec, 6)
    shared, _ = run_single(spec, 6, oracle_revenues=oracle_track(SMALL, 6))
    assert own.cum_regret.tobytes() == shared.cum_regret.tobytes()


def test_fit_slope_synthetic():
    T = 8192
    cps = [(t, math.sqrt(t)) for t in checkpoint_rounds(T)]
    assert fit_slope(cps) == pytest.approx(0.5, abs=1e-6)
    assert fit_slope({t: float(t) for t in checkpoint_rounds(T)}) == pytest.approx(1.0, abs=1e-9)
    # only the late checkpoints count
    bent = [(t, 1000.0 if t < math.sqrt(T) else t ** 0.7) for t in checkpoint_rounds(T)]
    assert fit_slope(bent) == pytest.approx(0.7, abs=1e-9)
    with pytest.raises(InsufficientDataError):
        fit_slope([(t, math.sqrt(t)) for t in checkpoint_rounds(32)])
    with pytest.raises(InsufficientDataError):
        fit_slope([(t, 0.0) for t in checkpoint_rounds(T)])


def test_random_regret_in_pilot_band():
    # pilot = first 100 rounds of the same seeded stream
    cfg = InstanceConfig(6, 3, 2, 0.3, 4096)
    trace, summary = run_single(RunSpec(cfg, "random", seeds=(0,), trace_level="per_round"), 0)
    rate = trace.gap[:100].mean()
    assert 0.2 * rate * 4096 <= summary.final_regret <= 1.0 * rate * 4096
    assert fit_slope(summary) == pytest.approx(1.0, abs=0.05)


def test_aggregate_single_and_permutation():
    spec = RunSpec(SMALL, "random", seeds=tuple(range(10)))
    res = run_batch(spec, workers=1)
    assert not res.failures and len(res.summaries) == 10
    one = aggregate(res.summaries[:1])
    assert all(one[t] == (c, 0.0) for t, c in res.summaries[0].checkpoints)
    assert res.aggregate[256][1] > 0
    shuffled = list(res.summaries)
    random.Random(0).shuffle(shuffled)
    assert aggregate(shuffled) == res.aggregate


def test_concurrent_matches_sequential():
    cfg = PolicyConfig(t0=20, estimator=EstimatorConfig(alpha_scale=0.1))
    spec = RunSpec(SMALL, "cap", cfg, seeds=(1, 2, 3))
    seq = run_batch(spec, workers=1)
    par = run_batch(spec, workers=3)
    assert seq.aggregate == par.aggregate
    for s in spec.seeds:
        assert seq.traces[s].cum_regret.tobytes() == par.traces[s].cum_regret.tobytes()


class _Broken(policies.RandomPolicy):
    def act(self, rnd):
        if self.instance.seed == 2 and rnd.round_index == 5:
            raise FloatingPointError("boom")
        return super().act(rnd)


def test_partial_failures_are_reported(monkeypatch):
    monkeypatch.setitem(policies.POLICIES, "broken", _Broken)
    spec = RunSpec(SMALL, "broken", seeds=(1, 2, 3))
    with pytest.raises(RoundError, match="round 5"):
        run_single(spec, 2)
    res = run_batch(spec, workers=1)
    assert list(res.failures) == [2] and "round 5" in res.failures[2]
    assert [s.seed for s in res.summaries] == [1, 3]


def test_worker_count(monkeypatch):
    monkeypatch.setenv("MNL_LAB_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2
    monkeypatch.setenv("MNL_LAB_THREADS", "zero")
    with pytest.raises(ValueError):
        worker_count(4)
    monkeypatch.delenv("MNL_LAB_THREADS")
    assert worker_count(1) == 1


def test_runspec_validation():
    with pytest.raises(ValueError):
        RunSpec(SMALL, seeds=())
    with pytest.raises(ValueError):
        RunSpec(SMALL, trace_level="everything")
    s = RunSummary(0, 1.0, ((1, 0.5), (2, 1.0)), 0.0)
    assert s.checkpoint_dict() == {1: 0.5, 2: 1.0}

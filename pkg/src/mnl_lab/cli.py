"""mnl-lab command line: run simulations, solve single rounds, summarize traces.

Exit codes: 0 success, 1 configuration or input error, 2 some seeds failed.
"""
import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .estimation import EstimatorConfig
from .harness import (InsufficientDataError, RunSpec, checkpoint_rounds, fit_slope, run_batch,
                      _mean_std)
from .model import InstanceConfig
from .optimize import LinearUtility, fixed_point_solve
from .policies import POLICIES, PolicyConfig

CSV_HEADER = ["run_id", "seed", "t", "optimal_revenue", "policy_revenue", "gap", "cum_regret"]
SCHEMA_PATH = Path(__file__).with_name("data") / "summary.schema.json"


class ConfigError(ValueError):
    pass


def fmt(x):
    return format(float(x), ".17g")


# ---------------------------------------------------------------- parsing helpers
def _pos_int(v):
    if isinstance(v, bool):
        raise ValueError("expected a positive integer")
    i = int(v)
    if i != float(v) or i < 1:
        raise ValueError("expected a positive integer")
    return i


def _pos_float(v):
    f = float(v)
    if not f > 0 or not math.isfinite(f):
        raise ValueError("expected a positive number")
    return f


def _nonneg_float(v):
    f = float(v)
    if not f >= 0 or not math.isfinite(f):
        raise ValueError("expected a nonnegative number")
    return f


def _t0(v):
    if str(v).strip().lower() == "auto":
        return "auto"
    return _pos_int(v)


def _seeds(v):
    items = v if isinstance(v, (list, tuple)) else str(v).split(",")
    out = []
    for s in items:
        s = int(str(s).strip())
        if not 0 <= s < 2**64:
            raise ValueError("seeds must be unsigned 64-bit integers")
        out.append(s)
    if not out:
        raise ValueError("at least one seed is required")
    return out


def _choice(options):
    def parse(v):
        v = str(v)
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


# field -> (parser, required)
RUN_FIELDS = {
    "items": (_pos_int, True),
    "cap": (_pos_int, True),
    "dim": (_pos_int, True),
    "l0": (_pos_float, True),
    "horizon": (_pos_int, True),
    "policy": (_choice(sorted(POLICIES)), True),
    "seeds": (_seeds, True),
    "out": (str, True),
    "t0": (_t0, False),
    "t0_scale": (_pos_float, False),
    "alpha_scale": (_nonneg_float, False),
    "ons_alpha_scale": (_nonneg_float, False),
    "gamma": (_pos_float, False),
    "sigma0": (_pos_float, False),
    "epsilon": (_pos_float, False),
    "l0_mode": (_choice(["known", "estimated"]), False),
    "refit_every": (_pos_int, False),
    "format": (_choice(["csv", "json", "both"]), False),
    "trace": (_choice(["summary", "per_round"]), False),
}


def load_config_file(path):
    """Flat key-value YAML document -> {field: (raw value, line)}."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config file ({exc.strerror})") from None
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: {getattr(exc, 'problem', exc)}") from None
    if node is None:
        return {}
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{path}: expected a flat key: value mapping")
    out = {}
    for knode, vnode in node.value:
        line = knode.start_mark.line + 1
        key = str(knode.value).replace("-", "_")
        if key not in RUN_FIELDS:
            raise ConfigError(f"{path} line {line}: unknown field '{knode.value}'")
        if isinstance(vnode, yaml.SequenceNode) and key == "seeds":
            value = [v.value for v in vnode.value]
        elif isinstance(vnode, yaml.ScalarNode):
            value = yaml.safe_load(yaml.serialize(vnode))
        else:
            raise ConfigError(f"{path} line {line}: field '{key}' must be a scalar")
        out[key] = (value, line)
    return out


def resolve_run_config(args):
    raw = load_config_file(args.config) if args.config else {}
    merged = {}
    for key, (value, line) in raw.items():
        merged[key] = (value, f"{args.config} line {line}")
    for key in RUN_FIELDS:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = (v, f"--{key.replace('_', '-')}")
    cfg = {}
    for key, (parser, required) in RUN_FIELDS.items():
        if key not in merged:
            if required:
                raise ConfigError(f"missing required setting --{key.replace('_', '-')}")
            continue
        value, where = merged[key]
        try:
            cfg[key] = parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: field '{key}': {exc}") from None
    return cfg


def build_spec(cfg):
    try:
        inst = InstanceConfig(cfg["items"], cfg["cap"], cfg["dim"], cfg["l0"], cfg["horizon"])
        est = EstimatorConfig(sigma0=cfg.get("sigma0"), gamma=cfg.get("gamma"),
                              alpha_scale=cfg.get("alpha_scale", 1.0))
        est.resolved(cfg["dim"], cfg["cap"], cfg["l0"])
        pcfg = PolicyConfig(t0=cfg.get("t0", "auto"), t0_scale=cfg.get("t0_scale", 2.0),
                            epsilon_opt=cfg.get("epsilon"), estimator=est,
                            ons_alpha_scale=cfg.get("ons_alpha_scale"),
                            l0_mode=cfg.get("l0_mode", "known"),
                            refit_every=cfg.get("refit_every", 1))
        return RunSpec(inst, cfg["policy"], pcfg, tuple(cfg["seeds"]), cfg.get("trace", "summary"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- writers
def run_id(policy, seed):
    return f"{policy}-{seed}"


def write_trace_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in result.summaries:
            tr = result.traces[s.seed]
            rid = run_id(result.spec.policy, s.seed)
            for j in range(tr.t.size):
                w.writerow([rid, s.seed, int(tr.t[j]), fmt(tr.optimal_revenue[j]),
                            fmt(tr.policy_revenue[j]), fmt(tr.gap[j]), fmt(tr.cum_regret[j])])


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def summary_document(cfg, result):
    slopes = result.slopes()
    vals = [v for v in slopes.values() if v is not None]
    runs = []
    for s in result.summaries:
        runs.append({
            "run_id": run_id(result.spec.policy, s.seed),
            "seed": s.seed,
            "final_regret": s.final_regret,
            "checkpoints": [{"t": t, "cum_regret": c} for t, c in s.checkpoints],
            "wall_time": s.wall_time,
            "slope": slopes.get(s.seed),
            "diagnostics": s.diagnostics,
        })
    doc = {
        "config": {k: v for k, v in cfg.items()},
        "runs": runs,
        "aggregate": [{"t": t, "mean": m, "std": sd} for t, (m, sd) in sorted(result.aggregate.items())],
        "slope": {"mean": (math.fsum(vals) / len(vals)) if vals else None,
                  "per_seed": {str(k): v for k, v in slopes.items()}},
        "failures": [{"seed": s, "error": e} for s, e in result.failures.items()],
    }
    return _plain(doc)


# ---------------------------------------------------------------- commands
def cmd_run(args):
    cfg = resolve_run_config(args)
    spec = build_spec(cfg)
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"--out {out}: not writable ({exc.strerror})") from None
    result = run_batch(spec)
    fmt_ = cfg.get("format", "both")
    if fmt_ in ("csv", "both"):
        write_trace_csv(out / "trace.csv", result)
    if fmt_ in ("json", "both"):
        with open(out / "summary.json", "w") as fh:
            json.dump(summary_document(cfg, result), fh, indent=2, sort_keys=True)
            fh.write("\n")
    for seed, err in result.failures.items():
        print(f"seed {seed} failed: {err}", file=sys.stderr)
    n_ok = len(result.summaries)
    print(f"{n_ok}/{len(spec.seeds)} runs finished; output in {out}")
    return 2 if result.failures else 0


def _float_list(text, name):
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise ConfigError(f"--{name}: expected comma-separated numbers") from None
    return vals


def cmd_oracle(args):
    if args.instance:
        try:
            data = yaml.safe_load(Path(args.instance).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{args.instance}: cannot read instance file ({exc})") from None
        if not isinstance(data, dict) or "alpha" not in data or "beta" not in data:
            raise ConfigError(f"{args.instance}: needs 'alpha' and 'beta' lists")
        alpha, beta = list(map(float, data["alpha"])), list(map(float, data["beta"]))
        cap = args.cap if args.cap is not None else data.get("cap")
    else:
        if args.alpha is None or args.beta is None:
            raise ConfigError("missing required setting --alpha/--beta (or --instance)")
        alpha, beta = _float_list(args.alpha, "alpha"), _float_list(args.beta, "beta")
        cap = args.cap
    if cap is None:
        raise ConfigError("missing required setting --cap")
    cap = int(cap)
    if len(alpha) != len(beta) or not alpha:
        raise ConfigError("alpha and beta need the same, nonzero length")
    if cap < 1:
        raise ConfigError("--cap must be >= 1")
    bad = [j for j, b in enumerate(beta) if not b > 0]
    if bad:
        raise ConfigError(f"beta must be positive (item {bad[0]} has {beta[bad[0]]})")
    res = fixed_point_solve([LinearUtility(a, b) for a, b in zip(alpha, beta)], cap, args.epsilon)
    print(json.dumps({"revenue": res.revenue, "assortment": list(res.assortment),
                      "prices": list(res.prices), "iterations": res.iterations,
                      "residual": res.residual}))
    return 0


def read_trace(path):
    """{run_id: [(t, cum_regret), ...]} from one CSV trace file."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    if not rows:
        raise ConfigError(f"{path}: empty file")
    if rows[0] != CSV_HEADER:
        raise ConfigError(f"{path}: unexpected header {','.join(rows[0])}")
    if len(rows) == 1:
        raise ConfigError(f"{path}: no data rows")
    runs = {}
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise ConfigError(f"{path} line {n}: expected {len(CSV_HEADER)} fields")
        try:
            t, cum = int(row[2]), float(row[6])
        except ValueError:
            raise ConfigError(f"{path} line {n}: malformed number") from None
        runs.setdefault(row[0], []).append((t, cum))
    return runs


def cmd_report(args):
    runs = {}
    for path in args.traces:
        for rid, pts in read_trace(path).items():
            runs[f"{path}:{rid}"] = sorted(pts)
    horizon = min(max(t for t, _ in pts) for pts in runs.values())
    cps = checkpoint_rounds(horizon)
    curves = {}
    for rid, pts in runs.items():
        d = dict(pts)
        missing = [t for t in cps if t not in d]
        if missing:
            raise ConfigError(f"{rid.rsplit(':', 1)[0]}: run {rid} lacks checkpoint t={missing[0]}")
        curves[rid] = [(t, d[t]) for t in cps]
    table = []
    for j, t in enumerate(cps):
        m, sd = _mean_std([c[j][1] for c in curves.values()])
        table.append((t, m, sd))
    slopes = []
    for c in curves.values():
        try:
            slopes.append(fit_slope(c))
        except InsufficientDataError:
            pass
    final_m, final_sd = table[-1][1], table[-1][2]
    slope = math.fsum(slopes) / len(slopes) if slopes else None
    if args.json:
        print(json.dumps({"runs": len(curves), "slope": slope,
                          "final_regret": {"mean": final_m, "two_sigma": 2 * final_sd},
                          "checkpoints": [{"t": t, "mean": m, "std": s} for t, m, s in table]}))
        return 0
    print(f"runs: {len(curves)}")
    print("slope: " + (f"{slope:.4f}" if slope is not None else "n/a (too few checkpoints)"))
    print(f"final cum_regret: {final_m:.6g} +/- {2 * final_sd:.6g} (mean +/- 2 sd)")
    print(f"{'t':>8}  {'mean':>14}  {'std':>14}")
    for t, m, s in table:
        print(f"{t:>8}  {m:>14.6g}  {s:>14.6g}")
    return 0


# ---------------------------------------------------------------- entry point
def build_parser():
    p = argparse.ArgumentParser(prog="mnl-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a policy over one or more seeds")
    r.add_argument("--config", help="flat key: value YAML file; flags override it")
    r.add_argument("--items", type=str)
    r.add_argument("--cap", type=str)
    r.add_argument("--dim", type=str)
    r.add_argument("--l0", type=str)
    r.add_argument("--horizon", type=str)
    r.add_argument("--policy", type=str, help=f"one of {', '.join(sorted(POLICIES))}")
    r.add_argument("--seeds", type=str, help="comma-separated unsigned integers")
    r.add_argument("--t0", type=str, help="'auto' or a positive integer")
    r.add_argument("--t0-scale", dest="t0_scale", type=str)
    r.add_argument("--alpha-scale", dest="alpha_scale", type=str)
    r.add_argument("--ons-alpha-scale", dest="ons_alpha_scale", type=str)
    r.add_argument("--gamma", type=str)
    r.add_argument("--sigma0", type=str)
    r.add_argument("--epsilon", type=str)
    r.add_argument("--l0-mode", dest="l0_mode", type=str)
    r.add_argument("--refit-every", dest="refit_every", type=str)
    r.add_argument("--out", type=str)
    r.add_argument("--format", type=str, help="csv, json or both (default both)")
    r.add_argument("--trace", type=str, help="summary or per_round (default summary)")
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("oracle", help="solve one round for linear utilities")
    o.add_argument("--alpha", help="comma-separated base valuations")
    o.add_argument("--beta", help="comma-separated price sensitivities")
    o.add_argument("--cap", type=int)
    o.add_argument("--instance", help="YAML/JSON file with alpha, beta and optionally cap")
    o.add_argument("--epsilon", type=float)
    o.set_defaults(func=cmd_oracle)

    rep = sub.add_parser("report", help="summarize CSV traces")
    rep.add_argument("traces", nargs="+")
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

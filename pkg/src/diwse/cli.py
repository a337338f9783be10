"""Command-line front end.

``diwse <command> [--config FILE] [--seed N] [--runs N] [--out PATH] [--format json|csv]``

Exit codes: 0 success, 2 configuration or geometry error, 3 a self-check failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, bounds, checks
from .devices import build_strategy
from .errors import ConfigError, GeometryError
from .params import WseParams
from .pv import CheatScenario, PvScenario, cheat_policy, run_pv_cheat, run_pv_honest, timing_feasible
from .qcore import RngStream
from .stats import EstimateWithCI, hoeffding_half_width
from .wse import run_wse

COMMANDS = ("simulate-wse", "rates", "attack-demo", "simulate-pv", "check-bounds")
RATE_COLUMNS = (
    "n", "mu", "delta", "eps", "d", "h", "grad_norm", "vbar", "lambda", "n_tilde",
    "hmax_bound", "alice_abort_bound", "bob_threshold", "min_n",
)
PARAM_KEYS = ("n", "mu", "delta", "eps", "d")
COMMON_KEYS = {"command", "params", "strategy", "runs", "seed", "output", "format", "engine", "workers", "confidence"}
EXTRA_KEYS = {
    "simulate-wse": set(),
    "rates": {"sweep"},
    "attack-demo": set(),
    "simulate-pv": {"scenario", "cheats"},
    "check-bounds": {"faults"},
}
SCENARIO_KEYS = {"x_v1", "x_p", "x_v2", "delta_t", "x_m1", "x_m2", "prover_position"}

DEFAULTS = {
    "simulate-wse": {
        "params": {"n": 2618, "mu": 0.2, "delta": 0.8, "eps": 0.05, "d": 1},
        "strategy": {"name": "honest"},
        "runs": 200,
        "format": "json",
    },
    "rates": {
        "sweep": {
            "n": [10**3, 10**4, 10**5, 10**6, 10**7, 10**8, 10**9],
            "mu": [0.01, 0.1],
            "delta": [0.76, 0.8, 0.85],
            "eps": [1e-6, 0.05],
            "d": [1, 2],
        },
        "format": "csv",
    },
    "attack-demo": {
        "params": {"n": 200, "mu": 0.2, "delta": 0.8, "eps": 0.05, "d": 2},
        "strategy": {"name": "sequential-source-attack"},
        "runs": 500,
        "format": "json",
    },
    "simulate-pv": {
        "params": {"n": 20, "mu": 0.5, "delta": 0.8, "eps": 0.05, "d": 1},
        "strategy": {"name": "honest"},
        "scenario": {"x_v1": 0.0, "x_p": 1.0, "x_v2": 2.0, "delta_t": 2.0, "x_m1": 0.5, "x_m2": 1.5},
        "cheats": ["measure-immediately", "random-guess"],
        "runs": 1000,
        "format": "json",
    },
    "check-bounds": {"faults": {"swap_test_bases": False}, "format": "json"},
}
BASE_DEFAULTS = {"seed": 0, "output": None, "engine": "vector", "workers": 1, "confidence": 0.99}


def load_config(command: str, path: str | None, overrides: dict) -> dict:
    """Merge defaults, the JSON file and CLI overrides; reject unknown keys."""
    cfg = copy.deepcopy({**BASE_DEFAULTS, **DEFAULTS[command]})
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}", field="config") from None
        if not isinstance(user, dict):
            raise ConfigError("top level must be a JSON object", field="config")
        allowed = COMMON_KEYS | EXTRA_KEYS[command]
        unknown = sorted(set(user) - allowed)
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown} for {command}", field="config")
        if "command" in user and user["command"] != command:
            raise ConfigError(f"config is for {user['command']!r}, not {command!r}", field="command")
        for key, value in user.items():
            if key in ("params", "scenario", "sweep", "faults") and isinstance(cfg.get(key), dict):
                if not isinstance(value, dict):
                    raise ConfigError("must be an object", field=key)
                cfg[key] = {**cfg[key], **value}
            else:
                cfg[key] = value
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    cfg["command"] = command
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    cmd = cfg["command"]
    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"must be an unsigned 64-bit integer, got {seed!r}", field="seed")
    if cfg["format"] not in ("json", "csv"):
        raise ConfigError(f"must be 'json' or 'csv', got {cfg['format']!r}", field="format")
    if cfg["format"] == "csv" and cmd in ("simulate-pv", "check-bounds"):
        raise ConfigError(f"{cmd} only writes JSON", field="format")
    if cfg["engine"] not in ("vector", "rounds"):
        raise ConfigError(f"must be 'vector' or 'rounds', got {cfg['engine']!r}", field="engine")
    w = cfg["workers"]
    if isinstance(w, bool) or not isinstance(w, int) or w < 1:
        raise ConfigError(f"must be a positive integer, got {w!r}", field="workers")
    c = cfg["confidence"]
    if not isinstance(c, (int, float)) or not 0 < c < 1:
        raise ConfigError(f"must lie in (0, 1), got {c!r}", field="confidence")
    if "runs" in cfg:
        r = cfg["runs"]
        if isinstance(r, bool) or not isinstance(r, int) or r < 1:
            raise ConfigError(f"must be a positive integer, got {r!r}", field="runs")
    if "params" in cfg:
        p = cfg["params"]
        unknown = sorted(set(p) - set(PARAM_KEYS))
        if unknown:
            raise ConfigError(f"unknown parameter(s) {unknown}", field="params")
        params_of(cfg)
    if "strategy" in cfg:
        s = cfg["strategy"]
        if not isinstance(s, dict) or "name" not in s:
            raise ConfigError("must be an object with a 'name'", field="strategy")
        try:
            strategy_of(cfg)
        except ValueError as exc:
            raise ConfigError(str(exc), field="strategy") from None
    if cmd == "rates":
        sweep = cfg["sweep"]
        unknown = sorted(set(sweep) - set(PARAM_KEYS))
        if unknown:
            raise ConfigError(f"unknown sweep axis {unknown}", field="sweep")
        for k in PARAM_KEYS:
            if not isinstance(sweep.get(k), list) or not sweep[k]:
                raise ConfigError(f"axis {k!r} must be a nonempty list", field="sweep")
        for combo in _sweep(sweep):
            _wse_params(dict(zip(PARAM_KEYS, combo)), "sweep")
    if cmd == "simulate-pv":
        unknown = sorted(set(cfg["scenario"]) - SCENARIO_KEYS)
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown}", field="scenario")
        if not isinstance(cfg["cheats"], list):
            raise ConfigError("must be a list of policy names", field="cheats")
        for name in cfg["cheats"]:
            try:
                cheat_policy(name)
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc), field="cheats") from None
    if cmd == "check-bounds":
        unknown = sorted(set(cfg["faults"]) - {"swap_test_bases"})
        if unknown:
            raise ConfigError(f"unknown fault(s) {unknown}", field="faults")


def _wse_params(p: dict, where: str) -> WseParams:
    try:
        return WseParams(**p)
    except ConfigError as exc:
        raise ConfigError(str(exc), field=where) from None
    except TypeError as exc:
        raise ConfigError(str(exc), field=where) from None


def params_of(cfg: dict) -> WseParams:
    return _wse_params(cfg["params"], "params")


def strategy_of(cfg: dict):
    s = dict(cfg["strategy"])
    return build_strategy(s.pop("name"), **s)


def _sweep(sweep: dict):
    return itertools.product(*(sweep[k] for k in PARAM_KEYS))


def _estimate(successes: int, trials: int, confidence: float) -> dict:
    return EstimateWithCI(successes / trials, hoeffding_half_width(trials, confidence), confidence, trials).to_dict()


def _wse_job(args):
    params_dict, strategy_cfg, seed, index, engine = args
    strategy = build_strategy(**strategy_cfg)
    tr = run_wse(WseParams(**params_dict), strategy, RngStream(seed, (index,)), engine=engine)
    tr.check_consistency()
    row = {"run": index, **tr.summary(), "guess_correct": tr.guess_correct, "max_stored_qubits": tr.max_stored_qubits}
    return row


def _run_wse_many(cfg: dict) -> list[dict]:
    jobs = [(cfg["params"], cfg["strategy"], cfg["seed"], i, cfg["engine"]) for i in range(cfg["runs"])]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            rows = list(pool.map(_wse_job, jobs, chunksize=16))
    else:
        rows = [_wse_job(j) for j in jobs]
    return sorted(rows, key=lambda r: r["run"])


def _bounds_summary(p: WseParams) -> dict:
    rep = bounds.lambda_rate(p)
    return {
        "rate_report": _rate_dict(rep),
        "alice_abort_exact": bounds.alice_abort_exact(p.n, p.mu, p.delta, bounds.P_OPT, strict=True),
        "bob_abort_exact": bounds.bob_abort_exact(p.n, p.mu, p.eps),
        "two_eps": 2 * p.eps,
    }


def _rate_dict(rep) -> dict:
    d = {k: getattr(rep, k) for k in rep.__dataclass_fields__}
    d["lambda"] = d.pop("lambda_")
    return d


def cmd_simulate_wse(cfg: dict) -> dict:
    p = params_of(cfg)
    rows = _run_wse_many(cfg)
    runs, conf = cfg["runs"], cfg["confidence"]
    aborted = sum(r["alice_aborted"] or r["bob_aborted"] for r in rows)
    matches = [r["match_rate"] for r in rows if r["match_rate"] is not None]
    return {
        "runs": rows,
        "aggregate": {
            "abort_fraction": _estimate(aborted, runs, conf),
            "alice_abort_fraction": sum(r["alice_aborted"] for r in rows) / runs,
            "bob_abort_fraction": sum(r["bob_aborted"] for r in rows) / runs,
            "match_rate_min": min(matches) if matches else None,
            "match_rate_mean": sum(matches) / len(matches) if matches else None,
            "completed_runs": runs - aborted,
        },
        "bounds": _bounds_summary(p),
    }


def cmd_attack_demo(cfg: dict) -> dict:
    p = params_of(cfg)
    rows = _run_wse_many(cfg)
    runs, conf = cfg["runs"], cfg["confidence"]
    aborted = sum(r["alice_aborted"] or r["bob_aborted"] for r in rows)
    success = sum(r["guess_correct"] for r in rows)
    return {
        "runs": rows,
        "aggregate": {
            "guess_success_fraction": _estimate(success, runs, conf),
            "abort_fraction": _estimate(aborted, runs, conf),
            "max_stored_qubits": max(r["max_stored_qubits"] for r in rows),
        },
        "bounds": {
            "eps": p.eps,
            "min_rounds_for_correctness": bounds.min_rounds_for_correctness(p.eps, p.mu, p.delta),
            **_bounds_summary(p),
        },
    }


def cmd_rates(cfg: dict) -> dict:
    rows = []
    for combo in _sweep(cfg["sweep"]):
        p = WseParams(**dict(zip(PARAM_KEYS, combo)))
        r = bounds.lambda_rate(p)
        rows.append({
            "n": p.n, "mu": p.mu, "delta": p.delta, "eps": p.eps, "d": p.d, "h": r.h,
            "grad_norm": r.grad_inf_norm, "vbar": r.vbar, "lambda": r.lambda_, "n_tilde": r.n_tilde,
            "hmax_bound": r.hmax_bound, "alice_abort_bound": r.alice_abort_bound,
            "bob_threshold": r.bob_threshold, "min_n": r.min_n_correctness,
        })
    first_positive = {}
    for row in rows:
        key = f"mu={row['mu']!r},delta={row['delta']!r},eps={row['eps']!r},d={row['d']}"
        first_positive.setdefault(key, None)
        if row["lambda"] > 0 and (first_positive[key] is None or row["n"] < first_positive[key]):
            first_positive[key] = row["n"]
    return {"rows": rows, "smallest_n_with_positive_lambda": first_positive}


def _scenario(cfg: dict) -> tuple[PvScenario, dict]:
    sc = dict(cfg["scenario"])
    try:
        s = PvScenario(sc["x_v1"], sc["x_p"], sc["x_v2"], sc["delta_t"], params_of(cfg))
    except KeyError as exc:
        raise ConfigError(f"missing {exc.args[0]!r}", field="scenario") from None
    return s, sc


def cmd_simulate_pv(cfg: dict) -> dict:
    s, sc = _scenario(cfg)
    if not timing_feasible(s):
        raise GeometryError("infeasible timing window: " + s.light_cone_note())
    strategy = strategy_of(cfg)
    runs, conf, root = cfg["runs"], cfg["confidence"], RngStream(cfg["seed"])
    honest = [run_pv_honest(s, strategy, root.child(0, i), sc.get("prover_position")) for i in range(runs)]
    kept = [t for t in honest if not t.aborted]
    out = {
        "honest": {
            "abort_fraction": _estimate(sum(t.aborted for t in honest), runs, conf),
            "acceptance_among_completed": (sum(t.accepted for t in kept) / len(kept)) if kept else None,
            "completed_runs": len(kept),
            "timing": {"v1_elapsed": honest[0].timing.v1_elapsed, "v2_elapsed": honest[0].timing.v2_elapsed,
                       "timing_ok": honest[0].timing_ok},
        },
        "cheats": {},
    }
    per_round = {"measure-immediately": 0.75, "random-guess": 0.5}
    if "x_m1" in sc and "x_m2" in sc:
        for j, name in enumerate(cfg["cheats"]):
            cheat = CheatScenario(sc["x_m1"], sc["x_m2"], cheat_policy(name), d=s.params.d)
            trs = [run_pv_cheat(s, cheat, strategy, root.child(1 + j, i)) for i in range(runs)]
            entry = {
                "success_fraction": _estimate(sum(t.accepted for t in trs), runs, conf),
                "mean_untested_rounds": float(np.mean([t.n_untested for t in trs])),
                "timing_ok": trs[0].timing_ok,
                "timing": {"v1_elapsed": trs[0].timing.v1_elapsed, "v2_elapsed": trs[0].timing.v2_elapsed},
            }
            if name in per_round:
                q = per_round[name]
                probs = [(q ** t.n_untested) * (not t.aborted) * t.timing_ok for t in trs]
                entry["product_rule_expected"] = float(sum(probs) / runs)
            out["cheats"][name] = entry
    bound = bounds.pv_bound_from_rate(s.params)
    out["analytic_bound"] = None if bound is None else {"bound": bound.bound, "kappa": bound.kappa, "kappa_sup": bound.kappa_sup}
    return out


def cmd_check_bounds(cfg: dict) -> dict:
    results = checks.run_all(swap_test_bases=bool(cfg["faults"].get("swap_test_bases", False)))
    return {"checks": [r.to_dict() for r in results], "all_passed": all(r.passed for r in results)}


HANDLERS = {
    "simulate-wse": cmd_simulate_wse,
    "rates": cmd_rates,
    "attack-demo": cmd_attack_demo,
    "simulate-pv": cmd_simulate_pv,
    "check-bounds": cmd_check_bounds,
}


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return "" if v is None else str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".12g")


def _csv_text(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default, allow_nan=False) + "\n"


def render(cfg: dict, result: dict) -> tuple[str, str | None]:
    """Main output text and, for CSV, the metadata sidecar text."""
    # Where the file goes and how many workers ran it do not change the results.
    embedded = {k: v for k, v in cfg.items() if k not in ("output", "workers")}
    meta = {"command": cfg["command"], "version": __version__, "seed": cfg["seed"], "config": embedded}
    if cfg["format"] == "json":
        return _json_text({**meta, "results": result}), None
    if cfg["command"] == "rates":
        body = _csv_text(result["rows"], RATE_COLUMNS)
        extra = {"smallest_n_with_positive_lambda": result["smallest_n_with_positive_lambda"]}
    else:
        rows = result["runs"]
        body = _csv_text(rows, list(rows[0]))
        extra = {"aggregate": result["aggregate"], "bounds": result["bounds"]}
    return body, _json_text({**meta, **extra})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diwse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"diwse {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file; defaults are used when omitted")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--runs", type=int)
        sp.add_argument("--out", help="output path (stdout when omitted)")
        sp.add_argument("--format", choices=("json", "csv"))
        sp.add_argument("--workers", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "runs": args.runs, "output": args.out, "format": args.format, "workers": args.workers}
    try:
        if args.runs is not None and args.command in ("rates", "check-bounds"):
            raise ConfigError(f"{args.command} does not take runs", field="runs")
        cfg = load_config(args.command, args.config, overrides)
        result = HANDLERS[args.command](cfg)
    except (ConfigError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    body, sidecar = render(cfg, result)
    if cfg["output"]:
        out = Path(cfg["output"])
        out.write_text(body, newline="\n")
        if sidecar is not None:
            out.with_name(out.name + ".meta.json").write_text(sidecar, newline="\n")
    else:
        sys.stdout.write(body)
    if args.command == "check-bounds" and not result["all_passed"]:
        failed = [c["name"] for c in result["checks"] if not c["passed"]]
        print(f"self-check failed: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

    koopman-uq expect   --scenario bouncing_ball --rtol 1e-2 --atol 1e-2
    koopman-uq moments  --scenario bouncing_ball_optimized --n 5
    koopman-uq mc       --scenario bouncing_ball --n 100000 --seed 7 --checkpoints 10,100,1000
    koopman-uq compare  --scenario bouncing_ball --n 100000 --seed 7
    koopman-uq optimize --bounds=-100:0,1:3,10:50 --x0 0,2,50 --ftol-rel 1e-3
    koopman-uq oracle   --scenario bouncing_ball

Results go to stdout as JSON.  Exit status: 0 success, 1 usage or
configuration error, 2 non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import mc as mc_mod
from .config import DEFAULT_CHECKPOINTS, ScenarioConfig
from .koopman import central_moments, koopman_expectation
from .scenarios import SCENARIOS, BouncingBallParams, get_scenario

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _bounds(text: str) -> list:
    out = []
    for part in text.split(","):
        lo, hi = part.split(":")
        out.append([float(lo), float(hi)])
    return out


def _ints(text: str) -> list:
    return [int(float(v)) for v in text.split(",") if v.strip()]


def _override(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="koopman-uq", description="Koopman expectations for uncertain dynamical systems")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, tolerances=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--scenario", choices=sorted(SCENARIOS))
        p.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                       metavar="KEY=VALUE", help="override a scenario parameter (JSON value)")
        p.add_argument("--noise", help='process noise as JSON, e.g. \'{"type":"kl","K":4,"component":0}\'')
        p.add_argument("--json-out", help="also write the JSON result to this file")
        if tolerances:
            p.add_argument("--rtol", type=float)
            p.add_argument("--atol", type=float)
            p.add_argument("--max-evals", type=float)

    p = sub.add_parser("expect", help="Koopman expectation of the scenario observable")
    common(p)

    p = sub.add_parser("moments", help="central moments 2..n of the scenario observable")
    common(p)
    p.add_argument("--n", type=int, dest="order", help="highest moment order (2..8)")

    p = sub.add_parser("mc", help="seeded Monte Carlo baseline")
    common(p, tolerances=False)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoints", type=_ints)
    p.add_argument("--csv", help="write the convergence series (n, estimate, std_error)")

    p = sub.add_parser("compare", help="Koopman expectation against Monte Carlo")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoints", type=_ints)
    p.add_argument("--csv", help="write the Monte Carlo convergence series")

    p = sub.add_parser("optimize", help="choose the launch state minimising the expected miss")
    common(p)
    p.add_argument("--bounds", type=_bounds, help="lo:hi per decision, comma separated")
    p.add_argument("--x0", type=_floats, help="initial decision vector")
    p.add_argument("--ftol-rel", type=float, help="relative decision-change stopping tolerance")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--trace-csv", help="write the per-iteration trace")

    p = sub.add_parser("oracle", help="closed-form value of the scenario expectation")
    common(p, tolerances=False)
    return parser


def _config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig()
    data = cfg.to_dict()
    flag_map = {
        "scenario": "scenario", "rtol": "rtol", "atol": "atol", "max_evals": "max_evals",
        "seed": "seed", "checkpoints": "checkpoints", "x0": "x0", "bounds": "bounds",
        "ftol_rel": "ftol_rel", "max_iter": "max_iter",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            data[key] = v
    if args.command in ("mc", "compare") and args.n is not None:
        data["n"] = args.n
    if args.command == "moments" and args.order is not None:
        data["moments"] = args.order
    if args.overrides:
        data["overrides"] = {**data["overrides"], **dict(args.overrides)}
    if args.noise:
        data["noise"] = json.loads(args.noise)
    outputs = dict(data["outputs"])
    for attr, key in (("json_out", "json"), ("csv", "convergence_csv"), ("trace_csv", "trace_csv")):
        v = getattr(args, attr, None)
        if v:
            outputs[key] = v
    data["outputs"] = outputs
    if isinstance(data["max_evals"], float):
        data["max_evals"] = int(data["max_evals"])
    return ScenarioConfig.from_dict(data)


def _problem(cfg: ScenarioConfig, ode_rtol: float = 1e-8):
    sc = get_scenario(cfg.scenario, cfg.overrides)
    prob, g = sc.problem(ode_rtol, ode_rtol)
    if cfg.noise:
        from .noise import noise_from_config, noisy_problem

        spec = dict(cfg.noise)
        comp = int(spec.pop("component", 0))
        scale = float(spec.pop("scale", 1.0))
        m = prob.map
        noise = noise_from_config(spec, m.t_max - m.t0)
        dim = m.dim
        if not 0 <= comp < dim:
            raise ValueError(f"noise component {comp} outside the state dimension {dim}")
        psi = np.zeros(dim)
        psi[comp] = scale
        prob = noisy_problem(prob, noise, lambda t, y, p: psi)
        sc = replace(sc, analytic=None)
    return sc, prob, g


def _coupled(rtol: float) -> float:
    return min(1e-8, rtol / 100)


def _write_csv(path, header, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _emit(result: dict, cfg: ScenarioConfig, out) -> None:
    text = json.dumps(result, indent=2, default=_jsonable)
    print(text, file=out)
    if cfg.outputs.get("json"):
        Path(cfg.outputs["json"]).write_text(text + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def cmd_expect(cfg, out):
    sc, prob, g = _problem(cfg, _coupled(cfg.rtol))
    res = koopman_expectation(prob, g, cfg.rtol, cfg.atol, max_evals=cfg.max_evals)
    _emit({
        "command": "expect", "scenario": cfg.scenario, "labels": list(g.labels),
        "value": res.value, "error": res.error, "simulations": res.evals,
        "regions": res.n_regions, "wall_time": res.wall_time, "converged": res.converged,
    }, cfg, out)
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_moments(cfg, out):
    sc, prob, g = _problem(cfg, _coupled(cfg.rtol))
    t0 = time.perf_counter()
    mom = central_moments(prob, g, cfg.moments, cfg.rtol, cfg.atol, max_evals=cfg.max_evals)
    wall = time.perf_counter() - t0
    res = mom.expectation
    _emit({
        "command": "moments", "scenario": cfg.scenario, "mean": mom.mean,
        "orders": list(mom.orders), "central_moments": mom.values, "errors": mom.errors,
        "raw_moments": res.value, "simulations": res.evals, "wall_time": wall, "converged": res.converged,
    }, cfg, out)
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def _convergence_rows(result):
    return [(k, float(est[0]), float(se[0])) for k, est, se in (result.convergence or [])]


def cmd_mc(cfg, out):
    sc, prob, g = _problem(cfg)
    cps = cfg.checkpoints if cfg.checkpoints is not None else [c for c in DEFAULT_CHECKPOINTS if c <= cfg.n]
    res = mc_mod.mc_expectation(prob, g, cfg.n, cfg.seed, cps)
    if cfg.outputs.get("convergence_csv"):
        _write_csv(cfg.outputs["convergence_csv"], ["n", "estimate", "std_error"], _convergence_rows(res))
    _emit({
        "command": "mc", "scenario": cfg.scenario, "estimate": res.estimate, "std_error": res.std_error,
        "n": res.n, "seed": res.seed, "failed": res.n_failed, "wall_time": res.wall_time,
        "convergence": [[k, e, s] for k, e, s in _convergence_rows(res)],
    }, cfg, out)
    return EXIT_OK


def cmd_compare(cfg, out):
    sc, prob, g = _problem(cfg)
    ref = sc.oracle() if sc.analytic is not None else None
    cps = cfg.checkpoints if cfg.checkpoints is not None else [c for c in DEFAULT_CHECKPOINTS if c <= cfg.n]
    comp = mc_mod.compare(prob, g, cfg.rtol, cfg.atol, cfg.n, cfg.seed, ref, cps, max_evals=cfg.max_evals)
    if cfg.outputs.get("convergence_csv"):
        _write_csv(cfg.outputs["convergence_csv"], ["n", "estimate", "std_error"], _convergence_rows(comp.mc))
    _emit({"command": "compare", "scenario": cfg.scenario, **comp.to_dict()}, cfg, out)
    return EXIT_OK if comp.koopman.converged else EXIT_NONCONVERGED


def cmd_optimize(cfg, out):
    from .optuu import ball_opt_problem, optimize

    sc = get_scenario(cfg.scenario, cfg.overrides)
    if not isinstance(sc.params, BouncingBallParams):
        raise ValueError("optimize supports the bouncing-ball scenarios only")
    if len(cfg.bounds) != 3:
        raise ValueError("optimize needs three decisions (x0, xdot0, z0)")
    p = ball_opt_problem(tuple(map(tuple, cfg.bounds)), tuple(cfg.x0), sc.params)
    t0 = time.perf_counter()
    rep = optimize(p, xtol_rel=cfg.ftol_rel, max_iter=cfg.max_iter)
    wall = time.perf_counter() - t0
    if cfg.outputs.get("trace_csv"):
        rows = [(i, *u.tolist(), f) for i, (u, f, _) in enumerate(rep.trace)]
        _write_csv(cfg.outputs["trace_csv"], ["iteration", *p.names, "objective"], rows)
    _emit({"command": "optimize", "scenario": cfg.scenario, **rep.to_dict(p.names), "wall_time": wall}, cfg, out)
    return EXIT_OK if rep.converged else EXIT_NONCONVERGED


def cmd_oracle(cfg, out):
    sc, prob, g = _problem(cfg)
    if sc.analytic is None:
        raise ValueError(f"scenario {cfg.scenario} has no closed-form oracle")
    result = {"command": "oracle", "scenario": cfg.scenario, "value": sc.oracle()}
    if isinstance(sc.params, BouncingBallParams):
        from .scenarios import two_bounce_threshold

        result["two_bounce_threshold"] = two_bounce_threshold(sc.params)
    _emit(result, cfg, out)
    return EXIT_OK


COMMANDS = {
    "expect": cmd_expect, "moments": cmd_moments, "mc": cmd_mc,
    "compare": cmd_compare, "optimize": cmd_optimize, "oracle": cmd_oracle,
}


def cli_main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

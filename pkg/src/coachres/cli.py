"""Command-line entry point: ``coachres {gen,offline,simulate,bounds,report}``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

from . import bounds as B
from .data import BUILTINS, builtin
from .domain import Instance, make_requests
from .offline import FCFSConfig, build_offline_model, solve_offline, solve_offline_fcfs
from .policies import POLICY_NAMES
from .sim import audit_fcfs, generate_instance, run_experiment, RunTrace, TraceRecord

__all__ = ["main", "build_parser"]

# flag name -> default, used to merge a JSON config under command-line flags
SIM_DEFAULTS = {
    "builtin": None,
    "instance": None,
    "policies": "RandomFit",
    "seed": None,
    "replications": 1,
    "days": 30,
    "out": "runs",
    "name": "experiment",
    "parallel": 1,
    "q": None,
    "theta": None,
    "psi_threshold": None,
    "block_length": None,
    "stride": None,
}


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _default_seed() -> int:
    return int(os.environ.get("COACHRES_SEED", "0"))


def _load_instance(args) -> Instance:
    if getattr(args, "builtin", None):
        return builtin(args.builtin)
    if getattr(args, "instance", None):
        return Instance.load(args.instance)
    raise SystemExit("error: give --builtin NAME or --instance PATH")


def _add_instance_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--builtin", choices=sorted(BUILTINS), help="builtin instance")
    src.add_argument("--instance", metavar="PATH", help="instance JSON file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coachres", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write an instance JSON file")
    p.add_argument("--builtin", choices=sorted(BUILTINS), required=True, help="builtin instance")
    p.add_argument("--realize", action="store_true", help="draw an arrival sequence with --seed")
    p.add_argument("--seed", type=int, default=None, help="seed for --realize (default $COACHRES_SEED or 0)")
    p.add_argument("--out", metavar="PATH", help="output file (default: stdout)")

    p = sub.add_parser("offline", help="solve offline models on a fixed arrival sequence")
    _add_instance_args(p)
    p.add_argument("--seed", type=int, default=None, help="draw arrivals when the instance has none")
    p.add_argument("--order", metavar="LIST",
                   help="comma-separated 1-based positions giving the arrival order, e.g. 2,3,1")
    p.add_argument("--mode", choices=["plain", "fcfs", "both"], default="both")
    p.add_argument("--time-limit", type=float, default=30.0, help="seconds for the FCFS search")
    p.add_argument("--node-limit", type=int, default=50_000, help="node limit for the FCFS search")
    p.add_argument("--method", choices=["highs", "bnb"], default="highs", help="MIP backend")
    p.add_argument("--cuts", choices=["first", "all"], default="first",
                   help="fairness cuts per round: earliest rejection only, or every one")
    p.add_argument("--dump-lp", metavar="PATH", help="write the plain model in LP format")

    p = sub.add_parser("simulate", help="run a policy roster over seeded instances")
    _add_instance_args(p)
    p.add_argument("--config", metavar="PATH", help="JSON file with any of these options")
    p.add_argument("--policies", help=f"comma-separated roster from {sorted(POLICY_NAMES)}")
    p.add_argument("--seed", type=int, help="first seed (default $COACHRES_SEED or 0)")
    p.add_argument("--replications", type=int, help="number of seeds")
    p.add_argument("--days", type=int, help="days in the selling horizon")
    p.add_argument("--out", help="results root directory")
    p.add_argument("--name", help="experiment name (subdirectory of --out)")
    p.add_argument("--parallel", type=int, help="worker processes")
    p.add_argument("--q", type=float, help="sampling fraction for ROM policies")
    p.add_argument("--theta", type=float, help="offer scaling for the Lambda policy")
    p.add_argument("--psi-threshold", type=float, help="copy probability cut-off for a-priori plans")
    p.add_argument("--block-length", type=int, help="steps between FCFS-policy re-solves")
    p.add_argument("--stride", type=int, help="LP re-solve stride for ROM policies")

    p = sub.add_parser("bounds", help="print theoretical guarantees")
    p.add_argument("--delta", type=float, default=0.06, help="largest group over coach size")
    p.add_argument("--coaches", type=int, default=20)
    p.add_argument("--omega", type=int, default=100, help="coach capacity")
    p.add_argument("--legs", type=int, default=4)
    p.add_argument("--theta", type=float, default=None, help="evaluate the scaled policy at this theta")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")

    p = sub.add_parser("report", help="summarize a metrics.json file")
    p.add_argument("metrics", help="path to metrics.json or its experiment directory")
    return parser


# ---------------------------------------------------------------------------
def cmd_gen(args) -> int:
    inst = builtin(args.builtin)
    if args.realize:
        seed = _default_seed() if args.seed is None else args.seed
        inst = generate_instance(inst, seed)
    text = json.dumps(inst.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _arrival_sequence(inst: Instance, args) -> Instance:
    if inst.arrivals is None:
        seed = _default_seed() if args.seed is None else args.seed
        inst = generate_instance(inst, seed)
    if args.order:
        pos = [int(k) for k in args.order.split(",")]
        if sorted(pos) != list(range(1, len(inst.arrivals) + 1)):
            raise SystemExit("error: --order must be a permutation of 1..number of arrivals")
        inst.arrivals = [inst.arrivals[k - 1] for k in pos]
    return inst


def cmd_offline(args) -> int:
    inst = _arrival_sequence(_load_instance(args), args)
    reqs = inst.requests()
    if not reqs:
        raise SystemExit("error: the instance has no arrivals")
    out = {"instance": inst.name, "requests": len(reqs)}
    if args.dump_lp:
        Path(args.dump_lp).write_text(build_offline_model(reqs, inst.train).to_lp_string())
    if args.mode in ("plain", "both"):
        t0 = time.monotonic()
        plan, value = solve_offline(reqs, inst.train)
        out["plain"] = {"objective": value, "accepted": len(plan.assignments),
                        "runtime": time.monotonic() - t0}
    if args.mode in ("fcfs", "both"):
        cfg = FCFSConfig(time_limit=args.time_limit, node_limit=args.node_limit, method=args.method,
                         seed=_default_seed() if args.seed is None else args.seed,
                         cuts_per_round=args.cuts)
        res = solve_offline_fcfs(reqs, inst.train, cfg)
        trace = RunTrace("offline", 0, n_legs=inst.n_legs, assignments=dict(res.plan.assignments))
        for r in reqs:
            c = res.plan.assignments.get(r)
            trace.records.append(TraceRecord(r.arrival_index, r, "accept" if c else "reject", c, "", 0))
        info = res.to_dict()
        info["audit_violations"] = len(audit_fcfs(trace, inst.train, inst.n_legs))
        out["fcfs"] = info
    print(json.dumps(out, indent=2, sort_keys=True))
    for key in ("plain", "fcfs"):
        if key in out:
            print(f"{key}: objective {_fmt(float(out[key]['objective']))}", file=sys.stderr)
    return 0


def _merge_config(args) -> dict:
    cfg = dict(SIM_DEFAULTS)
    if args.config:
        data = json.loads(Path(args.config).read_text())
        unknown = set(data) - set(SIM_DEFAULTS)
        if unknown:
            raise SystemExit(f"error: unknown config keys {sorted(unknown)}")
        cfg.update(data)
    for key in SIM_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["seed"] is None:
        cfg["seed"] = _default_seed()
    if isinstance(cfg["policies"], str):
        cfg["policies"] = [p.strip() for p in cfg["policies"].split(",") if p.strip()]
    return cfg


def _roster(cfg: dict) -> list[tuple[str, dict]]:
    roster = []
    for name in cfg["policies"]:
        if name not in POLICY_NAMES:
            raise SystemExit(f"error: unknown policy {name!r}; choose from {sorted(POLICY_NAMES)}")
        params = {}
        if name in ("ROM", "AdaptiveROM"):
            if cfg["q"] is not None:
                params["q"] = cfg["q"]
            if cfg["stride"] is not None:
                params["stride"] = cfg["stride"]
        if name == "Lambda" and cfg["theta"] is not None:
            params["theta"] = cfg["theta"]
        if name in ("Fixed", "FCFS") and cfg["psi_threshold"] is not None:
            params["psi_threshold"] = cfg["psi_threshold"]
        if name == "FCFS" and cfg["block_length"] is not None:
            params["block_length"] = cfg["block_length"]
        roster.append((name, params))
    if not roster:
        raise SystemExit("error: the roster needs at least one policy")
    return roster


def cmd_simulate(args) -> int:
    cfg = _merge_config(args)
    if cfg["builtin"]:
        inst = builtin(cfg["builtin"])
    elif cfg["instance"]:
        inst = Instance.load(cfg["instance"])
    else:
        raise SystemExit("error: give --builtin NAME or --instance PATH")
    seeds = [cfg["seed"] + k for k in range(int(cfg["replications"]))]
    res = run_experiment(inst, _roster(cfg), seeds, name=cfg["name"], days=int(cfg["days"]),
                         parallel=int(cfg["parallel"]))
    root = res.write(cfg["out"])
    _print_report(res.report())
    print(f"results in {root}", file=sys.stderr)
    return 1 if any(res.errors.values()) else 0


def cmd_bounds(args) -> int:
    rows = []
    try:
        rows.append(("rom_ratio", B.rom_ratio(args.delta)))
        rows.append(("optimal_q", B.optimal_q(args.delta)))
        rows.append(("naori_baseline", B.naori_baseline(args.legs)))
        inputs = B.BoundInputs(args.delta, args.coaches, args.omega, args.legs)
        try:
            g = B.fluid_guarantee(inputs)
            rows.append(("fluid_guarantee", g.factor))
            rows.append(("fluid_guarantee_vacuous", g.vacuous))
        except B.HypothesisViolated as exc:
            rows.append(("fluid_guarantee", f"n/a ({exc})"))
        theta, factor = B.optimize_theta(inputs)
        rows.append(("theta_star", theta))
        rows.append(("theta_factor", factor))
        if args.theta is not None:
            rows.append(("theta_guarantee", B.theta_guarantee(inputs, args.theta).factor))
        rows.append(("safe_assignment_threshold", B.safe_assignment_threshold(args.delta, args.coaches)))
    except B.DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps(dict(rows), indent=2))
    else:
        width = max(len(k) for k, _ in rows)
        for k, v in rows:
            print(f"{k:<{width}}  {_fmt(v)}")
    return 0


def _print_report(rep: dict) -> None:
    print(f"experiment {rep['experiment']}  seeds {len(rep['seeds'])}")
    print(f"{'policy':<12} {'mean':>10} {'sd':>10} {'min':>10} {'fcfs_viol':>10} {'sfcfs_viol':>10}")
    for label, m in rep["policies"].items():
        cells = [m["mean"], m["sd"], m["min"]]
        cells = [("n/a" if c is None else _fmt(float(c))) for c in cells]
        fv = m.get("audit_fcfs_violations")
        sv = m.get("audit_sfcfs_violations")
        print(f"{label:<12} {cells[0]:>10} {cells[1]:>10} {cells[2]:>10} "
              f"{'-' if fv is None else fv:>10} {'-' if sv is None else sv:>10}")


def cmd_report(args) -> int:
    path = Path(args.metrics)
    if path.is_dir():
        path = path / "metrics.json"
    _print_report(json.loads(path.read_text()))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "offline": cmd_offline,
    "simulate": cmd_simulate,
    "bounds": cmd_bounds,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Exit codes: 0 success, 1 usage or parse error, 2 assumption failure,
3 solver non-convergence, 4 infeasibility. Set ``DYNGAME_LOG`` to a logging
level name (e.g. ``INFO``) for progress messages on stderr.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .clne import solve_clne
from .errors import DyngameError, ValidationError
from .fhvi import build_vi, diagnose_monotonicity, solve_vi
from .game_model import (bundled_scenario, build_platooning, dump_scenario, fmt, load_scenario,
                         platoon_physical, SolverSettings)
from .olne import build_cost_to_go, check_assumptions, check_cl_assumptions, solve_olne
from .rhc import PerturbationConfig, RhcConfig, run_perturbation_experiment, run_rhc
from .terminal_set import compute_terminal_set, euclidean_distance

log = logging.getLogger("dyngame")

KIND_TO_CONTROLLER = {"ol": "olne", "cl": "clne_surrogate", "none": "no_terminal"}


class UsageError(DyngameError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _dumps(obj):
    """JSON with 17-significant-digit floats."""
    def conv(o):
        if isinstance(o, (float, np.floating)):
            v = float(o) + 0.0
            return v if np.isfinite(v) else None
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.bool_,)):
            return bool(o)
        if isinstance(o, np.ndarray):
            return conv(o.tolist())
        if isinstance(o, dict):
            return {str(k): conv(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [conv(v) for v in o]
        return o

    text = json.dumps(conv(obj), indent=1, sort_keys=True)
    # json uses repr (shortest round-trip); rewrite floats to 17 significant digits
    return _fix_floats(text) + "\n"


def _fix_floats(text):
    import re

    def sub(m):
        s = m.group(0)
        if re.fullmatch(r"-?\d+", s):
            return s
        return fmt(float(s))

    return re.sub(r"(?<![\w.\"])-?\d+\.\d+(?:[eE][-+]?\d+)?|(?<![\w.\"])-?\d+[eE][-+]?\d+", sub, text)


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


def write_manifest(path, command, config, seed, outputs, started):
    cfg_hash = _sha(config) if config and Path(config).exists() else None
    doc = {
        "command": command,
        "config": str(config) if config else None,
        "config_sha256": cfg_hash,
        "seed": seed,
        "tool_version": __version__,
        "started": started,
        "finished": _timestamp(),
        "outputs": [{"path": str(p), "sha256": _sha(p)} for p in outputs],
    }
    _write(path, _dumps(doc))


def _emit(args, payload, started):
    text = _dumps(payload)
    if args.out:
        _write(args.out, text)
        write_manifest(str(args.out) + ".manifest.json", args.command_line, getattr(args, "config", None),
                       getattr(args, "seed", None), [args.out], started)
    else:
        sys.stdout.write(text)


def _scenario(args):
    if not args.config:
        args.config = str(bundled_scenario("platooning"))
    return load_scenario(args.config)


def _parse_vec(text, n, what="x0"):
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"{what}: expected comma-separated numbers") from exc
    if v.size != n:
        raise UsageError(f"{what}: expected {n} entries, got {v.size}")
    return v


def _x0(args, sc):
    if getattr(args, "x0", None):
        return _parse_vec(args.x0, sc.game.n)
    if "x0" in sc.metadata:
        return np.asarray(sc.metadata["x0"], dtype=float)
    raise UsageError("no --x0 given and the scenario has no metadata.x0")


# --- subcommands -------------------------------------------------------------

REQUIRE_CHOICES = ("2i", "2ii", "3", "4")


def cmd_check(args, started):
    sc = _scenario(args)
    rep = check_assumptions(sc.game)
    cl = check_cl_assumptions(sc.game)
    req = set(args.require or sc.metadata.get("require") or REQUIRE_CHOICES)
    failures = []
    for f in rep.failures():
        tag = f.split(":")[0].replace("Assumption ", "").replace("(", "").replace(")", "")
        if tag in req:
            failures.append(f)
    if "4" in req:
        if not cl["stabilizable"]:
            failures.append("Assumption 4: (A, row B_i) not stabilizable")
        if not cl["detectable"]:
            failures.append("Assumption 4: (A, sum Q_i) not detectable")
    payload = {"assumptions": rep.to_dict(), "closed_loop": cl, "required": sorted(req),
               "failures": failures, "ok": not failures}
    _emit(args, payload, started)
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    if not failures:
        print("all required assumptions hold", file=sys.stderr)
    return 0 if not failures else 2


def cmd_solve_ol(args, started):
    sc = _scenario(args)
    sol = solve_olne(sc.game, tol=args.tol, max_iter=args.max_iter)
    ctg = build_cost_to_go(sc.game, sol)
    payload = sol.to_dict()
    payload["cost_to_go"] = ctg.to_dict()
    _emit(args, payload, started)
    return 0


def cmd_solve_cl(args, started):
    sc = _scenario(args)
    sol = solve_clne(sc.game, method=args.method, tol=args.tol, max_iter=args.max_iter)
    _emit(args, sol.to_dict(), started)
    return 0


def _controller_data(sc, kind):
    if kind == "ol":
        sol = solve_olne(sc.game)
        return sol, build_cost_to_go(sc.game, sol), compute_terminal_set(sol.Abar_ol, sc.spec, sol.K_ol)
    if kind == "cl":
        sol = solve_clne(sc.game)
        return sol, None, compute_terminal_set(sol.Abar_cl, sc.spec, sol.K_cl)
    sol = solve_olne(sc.game)
    return sol, None, compute_terminal_set(sol.Abar_ol, sc.spec, sol.K_ol)


def cmd_solve_fh(args, started):
    sc = _scenario(args)
    x0 = _x0(args, sc)
    sol, ctg, ts = _controller_data(sc, args.kind)
    values = {"ol": ctg, "cl": sol, "none": None}[args.kind]
    vi = build_vi(sc.game, values, sc.spec, terminal=ts if args.enforce_terminal else None,
                  kind={"ol": "olne_terminal", "cl": "clne_surrogate", "none": "no_terminal"}[args.kind])
    tol = args.tol if args.tol is not None else sc.solver.tol
    res = solve_vi(vi, x0, tol=tol, max_iter=sc.solver.max_iter, step=sc.solver.step_size)
    U = vi.inputs_by_time(res.u)
    g = sc.game
    header = ["t"] + [f"u_{i + 1},{k}" for i in range(g.N) for k in range(g.m)]
    rows = [[str(t)] + [fmt(v) for v in U[t]] for t in range(vi.T)]
    summary = {"residual": res.residual, "iterations": res.iterations, "converged": res.converged,
               "method": res.method, "monotonicity": diagnose_monotonicity(vi).to_dict(),
               "max_violation": vi.feasible.violation(res.u, x0)}
    outputs = _write_csv_and_summary(args, header, rows, summary)
    if outputs:
        write_manifest(str(args.out) + ".manifest.json", args.command_line, args.config, None, outputs, started)
    return 0 if res.converged else 3


def _write_csv_and_summary(args, header, rows, summary):
    if not args.out:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        sys.stdout.write("# " + json.dumps(json.loads(_dumps(summary)), sort_keys=True) + "\n")
        return []
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    side = str(args.out) + ".json"
    _write(side, _dumps(summary))
    return [args.out, side]


def cmd_terminal_set(args, started):
    sc = _scenario(args)
    if args.which == "ol":
        sol = solve_olne(sc.game)
        ts = compute_terminal_set(sol.Abar_ol, sc.spec, sol.K_ol)
    else:
        sol = solve_clne(sc.game)
        ts = compute_terminal_set(sol.Abar_cl, sc.spec, sol.K_cl)
    _emit(args, ts.to_dict(), started)
    return 0


def _simulate(sc, kind, x0, steps, enforce_terminal=False):
    sol, ctg, ts = _controller_data(sc, kind)
    cfg = RhcConfig(KIND_TO_CONTROLLER[kind], steps, enforce_terminal, True, sc.solver.tol, sc.solver.max_iter)
    tlog, diag = run_rhc(sc.game, sc.spec, sol, ctg, ts, x0, cfg)
    return tlog, diag, ts


def cmd_simulate(args, started):
    sc = _scenario(args)
    x0 = _x0(args, sc)
    steps = args.steps or int(sc.metadata.get("steps", 300))
    tlog, diag, _ = _simulate(sc, args.kind, x0, steps, args.enforce_terminal)
    out = args.out or "trajectory.csv"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    tlog.to_csv(out, sc.game)
    side = str(out) + ".json"
    _write(side, _dumps(diag.to_dict()))
    write_manifest(str(out) + ".manifest.json", args.command_line, args.config, args.seed, [out, side], started)
    return 0 if not diag.nonconverged_steps else 3


def _perturb_rows(sc, variances, trials, seed, steps, jobs):
    sol, ctg, ts = _controller_data(sc, "ol")
    x0 = np.asarray(sc.metadata["x0"], dtype=float)
    cfg = RhcConfig("olne", steps, False, True, sc.solver.tol, sc.solver.max_iter,
                    PerturbationConfig(tuple(variances), trials, seed, jobs))
    rows, _ = run_perturbation_experiment(sc.game, sc.spec, sol, ctg, ts, x0, cfg)
    return rows


def _write_perturb_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variance", "trial", "max_relative_deviation", "stable", "failed"])
        for r in rows:
            w.writerow([fmt(r.variance), r.trial, fmt(r.deviation), int(r.stable), int(r.failed)])


def cmd_experiment(args, started):
    sc = _scenario(args)
    try:
        variances = [float(v) for v in args.variances.split(",")]
    except ValueError as exc:
        raise UsageError("--variances: expected comma-separated numbers") from exc
    steps = args.steps or int(sc.metadata.get("steps", 300))
    rows = _perturb_rows(sc, variances, args.trials, args.seed, steps, args.jobs)
    out = args.out or "perturbation.csv"
    _write_perturb_csv(out, rows)
    write_manifest(str(out) + ".manifest.json", args.command_line, args.config, args.seed, [out], started)
    return 0


def cmd_reproduce(args, started):
    cfg_path = bundled_scenario("platooning")
    sc = load_scenario(cfg_path)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = int(sc.metadata.get("steps", 300))
    outputs = []
    if args.figure == "platooning":
        x0 = np.asarray(sc.metadata["x0"], dtype=float)
        tlog, diag, ts = _simulate(sc, "ol", x0, steps)
        md = sc.metadata["platooning"]
        p, v = platoon_physical(tlog.states, md["v_ref"], md["h"], md["d"], sc.game.N)
        dt = md["tau"]
        traj = out_dir / "trajectory.csv"
        tlog.to_csv(traj, sc.game)
        pv = out_dir / "positions_velocities.csv"
        with open(pv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time"] + [f"p_{i + 1}" for i in range(sc.game.N)] + [f"v_{i + 1}" for i in range(sc.game.N)])
            for t in range(tlog.states.shape[0]):
                w.writerow([fmt(t * dt)] + [fmt(a) for a in p[t]] + [fmt(a) for a in v[t]])
        td = out_dir / "terminal_distance.csv"
        with open(td, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "gauge_distance", "euclidean_distance"])
            for k, (u, xT) in enumerate(tlog.solutions):
                w.writerow([fmt(k * dt), fmt(tlog.terminal_distance[k]), fmt(euclidean_distance(ts, xT))])
        diag_path = out_dir / "diagnostics.json"
        _write(diag_path, _dumps(diag.to_dict()))
        outputs = [traj, pv, td, diag_path]
    else:
        pert = sc.metadata.get("perturbation", {})
        rows = _perturb_rows(sc, pert.get("variances", [0.01]), args.trials or pert.get("trials", 100),
                             args.seed, steps, args.jobs)
        path = out_dir / "perturbation.csv"
        _write_perturb_csv(path, rows)
        outputs = [path]
    write_manifest(out_dir / "manifest.json", args.command_line, cfg_path, args.seed, outputs, started)
    return 0


def cmd_export_scenario(args, started):
    if args.name == "platooning":
        h, d = args.headway, args.distance
        game, spec, K = build_platooning(args.vehicles, args.tau, h, d, args.v_ref, args.d_min, args.v_min,
                                         args.v_max, args.u_min, args.u_max, args.horizon)
        x0 = np.zeros(game.n)
        x0[1] = args.v_ref  # platoon at rest with the desired standstill gaps
        meta = {
            "name": "platooning",
            "x0": x0.tolist(),
            "steps": 300,
            "prestabilizer": [k.tolist() for k in K],
            "platooning": {"N": args.vehicles, "tau": args.tau, "h": h, "d": d, "v_ref": args.v_ref,
                           "d_min": args.d_min, "v_min": args.v_min, "v_max": args.v_max,
                           "u_min": args.u_min, "u_max": args.u_max},
            "perturbation": {"variances": [0.01], "trials": 100},
            "require": ["2ii", "3", "4"],
            "note": ("A is singular by construction (the leader's gap coordinate is identically zero); "
                     "the stable-subspace test uses the equivalent matrix pencil instead of H"),
        }
        dump_scenario(args.out, game, spec, SolverSettings(), meta)
    else:
        sc = load_scenario(bundled_scenario(args.name))
        dump_scenario(args.out, sc.game, sc.spec, sc.solver, sc.metadata)
    return 0


def build_parser():
    p = _Parser(prog="dyngame", description="Nash equilibria and receding-horizon control for LQ dynamic games.")
    p.add_argument("--version", action="version", version=f"dyngame {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="scenario JSON (default: bundled platooning)")
        if out:
            sp.add_argument("--out", help="output path (default: stdout)")

    s = sub.add_parser("check", help="verify the standing assumptions")
    common(s)
    s.add_argument("--require", action="append", choices=REQUIRE_CHOICES,
                   help="assumption to require (repeatable; default: the scenario's metadata.require, else all)")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("solve-ol", help="open-loop Nash equilibrium (Stein recursion)")
    common(s)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--max-iter", type=int, default=10000)
    s.set_defaults(func=cmd_solve_ol)

    s = sub.add_parser("solve-cl", help="closed-loop Nash equilibrium")
    common(s)
    s.add_argument("--method", choices=("riccati", "lyapunov"), default="lyapunov")
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--max-iter", type=int, default=10000)
    s.set_defaults(func=cmd_solve_cl)

    s = sub.add_parser("solve-fh", help="finite-horizon game at one state")
    common(s)
    s.add_argument("--x0", help="comma-separated initial state (default: scenario metadata)")
    s.add_argument("--kind", choices=("ol", "cl", "none"), default="ol")
    s.add_argument("--tol", type=float)
    s.add_argument("--enforce-terminal", action="store_true")
    s.set_defaults(func=cmd_solve_fh)

    s = sub.add_parser("terminal-set", help="ellipsoidal terminal set")
    common(s)
    s.add_argument("--which", choices=("ol", "cl"), default="ol")
    s.set_defaults(func=cmd_terminal_set)

    s = sub.add_parser("simulate", help="receding-horizon closed loop")
    common(s)
    s.add_argument("--x0")
    s.add_argument("--kind", choices=("ol", "cl", "none"), default="ol")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--enforce-terminal", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("experiment", help="experiments")
    esub = s.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    e = esub.add_parser("perturb", help="terminal-cost perturbation sweep")
    common(e)
    e.add_argument("--variances", default="0.01", help="comma-separated, relative to max |P_OL|")
    e.add_argument("--trials", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_experiment)

    s = sub.add_parser("reproduce", help="regenerate the bundled experiment data")
    s.add_argument("figure", choices=("platooning", "perturbation"))
    s.add_argument("--out-dir", default="results")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_reproduce)

    s = sub.add_parser("export-scenario", help="write a scenario JSON")
    s.add_argument("name", choices=("platooning", "power_system_template"))
    s.add_argument("--out", required=True)
    s.add_argument("--vehicles", type=int, default=4)
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--headway", type=float, default=0.2)
    s.add_argument("--distance", type=float, default=5.0)
    s.add_argument("--v-ref", type=float, default=20.0)
    s.add_argument("--d-min", type=float, default=2.0)
    s.add_argument("--v-min", type=float, default=0.0)
    s.add_argument("--v-max", type=float, default=30.0)
    s.add_argument("--u-min", type=float, default=-5.0)
    s.add_argument("--u-max", type=float, default=5.0)
    s.add_argument("--horizon", type=int, default=10)
    s.set_defaults(func=cmd_export_scenario)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("DYNGAME_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _timestamp()
    try:
        args = build_parser().parse_args(argv)
        args.command_line = ["dyngame"] + argv
        return args.func(args, started)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DyngameError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

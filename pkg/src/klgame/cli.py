"""``klgame`` command-line entry point.

Exit codes: 0 success, 2 config or validation error, 3 solver failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import ConfigError, RunConfig, dump_config, load_config
from .core import KLGameError
from .ilq import LQLConfig, solve
from .scenario import solve_mm
from .sim import METHODS, build_problem, run_batch, write_json, write_trajectory_csv

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("klgame")


def _policy_dict(policies) -> list[dict]:
    return [{"K": p.K.tolist(), "kappa": p.kappa.tolist(), "cov": p.cov.tolist(),
             "deterministic": bool(p.deterministic)} for p in policies]


def cmd_solve(cfg: RunConfig, out: Path, method: str | None = None) -> int:
    """One open-loop solve over the whole simulation length."""
    method = method or cfg.method
    spec = dataclasses.replace(cfg.scenario, planning_horizon=cfg.scenario.sim_length,
                               replan_interval=min(cfg.scenario.replan_interval, cfg.scenario.sim_length))
    problem, lam, gmm = build_problem(spec, method)
    config = LQLConfig(max_iterations=spec.max_iterations)
    x0 = spec.initial_state()
    out.mkdir(parents=True, exist_ok=True)
    if method == "mm-klgame":
        sol = solve_mm(problem, x0, gmm, lam, config, player=spec.reference.player,
                       branching=min(spec.branching, gmm.n_modes))
        branches = sol.tree.branches()
        trajs = [sol.tree.branch_trajectory(b) for b in branches]
        best = int(np.argmax([sol.tree.nodes[b[1]].weight[spec.reference.player] for b in branches]))
        nominal = trajs[best]
        if cfg.emit["trajectories"]:
            for k, tr in enumerate(trajs):
                write_trajectory_csv(out / f"trajectory_branch{k}.csv", tr.states, tr.controls, spec.dt)
        policy = {
            str(node): [{"child": c.child, "weight": c.weight.tolist(), "control": c.control.tolist(),
                         "origin": c.origin.tolist(), "players": _policy_dict(c.policies)} for c in comps]
            for node, comps in sol.policy.components.items() if len(comps) > 1 or node == 0
        }
    else:
        sol = solve(problem, x0, None, lam, config)
        nominal = sol.nominal
        policy = {"players": _policy_dict(sol.policies)}
    write_trajectory_csv(out / "trajectory.csv", nominal.states, nominal.controls, spec.dt)
    write_json(out / "policy.json", policy)
    if cfg.emit["solver_trace"]:
        write_json(out / "trace.json", {
            "method": method,
            "iterations": sol.iterations_used,
            "converged": bool(sol.converged),
            "social_cost_history": [float(c) for c in sol.social_cost_history],
        })
    print(f"{method}: {sol.iterations_used} iterations, converged={sol.converged}, output in {out}")
    return EXIT_OK


def _table(batches) -> tuple[dict, str]:
    cols = [("CR", "coordinated"), ("SR", "safe"), ("Prog", "progress"), ("Cost", "time_avg_cost")]
    table = {b.method: {name: b.stats[key] for name, key in cols} for b in batches}
    lines = ["| method | " + " | ".join(c for c, _ in cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for b in batches:
        cells = [f"{b.stats[k]['mean']:.2f} ± {b.stats[k]['std']:.2f}" for _, k in cols]
        lines.append(f"| {b.method} | " + " | ".join(cells) + " |")
    return table, "\n".join(lines) + "\n"


def cmd_batch(cfg: RunConfig, out: Path, n_trials: int, seed: int, method: str | None = None) -> int:
    if n_trials < 1:
        raise ConfigError("--trials", "must be >= 1")
    methods = [method] if method else list(cfg.methods)
    out.mkdir(parents=True, exist_ok=True)
    batches = []
    for m in methods:
        b = run_batch(cfg.scenario, m, n_trials, seed)
        batches.append(b)
        if cfg.emit["stats"]:
            write_json(out / f"batch_{m}.json", b.to_dict(include_trials=True))
        if cfg.emit["trajectories"]:
            tdir = out / f"trajectories_{m}"
            tdir.mkdir(exist_ok=True)
            for k, tr in enumerate(b.trials):
                write_trajectory_csv(tdir / f"trial{k:04d}.csv", tr.states, tr.controls, cfg.scenario.dt)
        log.info("%s: %s", m, b.stats)
    table, md = _table(batches)
    write_json(out / "table.json", {"n_trials": n_trials, "seed": seed, "rows": table})
    (out / "table.md").write_text(md)
    print(md, end="")
    return EXIT_OK


def cmd_bench_scaling(out: Path, max_players: int, branches: list[int], repeats: int, iterations: int,
                      halvings: int, state_dim: int, horizon: int) -> int:
    if max_players < 2:
        raise ConfigError("--max-players", "must be >= 2")
    out.mkdir(parents=True, exist_ok=True)
    kw = dict(repeats=repeats, iterations=iterations, halvings=halvings, state_per_player=state_dim, horizon=horizon)
    players = [n for n in (2, 3, 4, 6, 8, 12, 16) if n <= max_players]
    if max_players not in players:
        players.append(max_players)
    rows_n = bench.run_scaling(players, [1], **kw)
    bench.write_rows(out / "scaling_players.csv", rows_n)
    rows_h = bench.run_scaling([2], branches, **kw)
    bench.write_rows(out / "scaling_branches.csv", rows_h)
    for r in rows_n + rows_h:
        print(f"N={r.n_players} H={r.branches}: mean {r.mean:.4f}s std {r.std:.4f}s worst {r.worst:.4f}s")
    if len(rows_n) > 1:
        print(f"log-log slope in N: {bench.loglog_slope(players, [r.per_iteration for r in rows_n]):.2f}")
    if len(rows_h) > 1:
        print(f"log-log slope in H: {bench.loglog_slope(branches, [r.per_iteration for r in rows_h]):.2f}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="klgame", description="KL-regularized dynamic game solver and tollbooth benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("solve", help="one solve from the configured initial state")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="out")
    s.add_argument("--method")

    b = sub.add_parser("batch", help="Monte Carlo comparison of methods")
    b.add_argument("--config", required=True)
    b.add_argument("--out", default="out")
    b.add_argument("--trials", type=int, default=100)
    b.add_argument("--seed", type=_u64)
    b.add_argument("--method")

    c = sub.add_parser("bench-scaling", help="per-iteration timing sweeps over players and branches")
    c.add_argument("--out", default="out")
    c.add_argument("--max-players", type=int, default=4)
    c.add_argument("--branches", type=_int_list, default=[1, 2, 4])
    c.add_argument("--repeats", type=int, default=20)
    c.add_argument("--iterations", type=int, default=15)
    c.add_argument("--halvings", type=int, default=15)
    c.add_argument("--state-dim", type=int, default=24, help="state dimension per player")
    c.add_argument("--horizon", type=int, default=10)

    v = sub.add_parser("validate-config", help="check a config file and print its normalized form")
    v.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "bench-scaling":
            return cmd_bench_scaling(Path(args.out), args.max_players, args.branches, args.repeats,
                                     args.iterations, args.halvings, args.state_dim, args.horizon)
        cfg = load_config(args.config)
        if getattr(args, "method", None) and args.method not in METHODS:
            raise ConfigError("--method", f"unknown method {args.method!r}; expected one of {list(METHODS)}")
        if args.verb == "validate-config":
            print(dump_config(cfg))
            return EXIT_OK
        if args.verb == "solve":
            return cmd_solve(cfg, Path(args.out), args.method)
        seed = cfg.scenario.seed if args.seed is None else args.seed
        return cmd_batch(cfg, Path(args.out), args.trials, seed, args.method)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KLGameError as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

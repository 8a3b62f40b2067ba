"""Per-iteration timing of the multi-modal solver on random LQ games.

Each player owns a ``state_per_player`` block of the joint state, so the
joint state grows with the number of players. Player 0 carries a mixture
reference with one mode per branch.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .cost import quadratic_player_costs
from .dynamics import LinearDynamics
from .ilq import LQLConfig, Problem
from .reference import GaussianRef, GMMRef
from .scenario import solve_mm


@dataclass
class BenchCase:
    problem: Problem
    x0: np.ndarray
    ref: GMMRef
    lam: np.ndarray


def random_lq_case(n_players: int, branches: int, state_per_player: int = 24, control_per_player: int = 4,
                   horizon: int = 10, seed: int = 0) -> BenchCase:
    rng = np.random.default_rng([seed, n_players, branches])
    s, m = state_per_player, control_per_player
    n = s * n_players
    A = np.eye(n) + 0.02 * rng.standard_normal((n, n)) / np.sqrt(n)
    B = []
    for i in range(n_players):
        b = 0.05 * rng.standard_normal((n, m)) / np.sqrt(n)
        b[i * s:i * s + m] += 0.1 * np.eye(m)
        B.append(b)
    dyn = LinearDynamics(A, B, dt=0.1, horizon=horizon)
    Qs, Rs = [], []
    for i in range(n_players):
        G = rng.standard_normal((n, n)) / np.sqrt(n)
        Qs.append(G @ G.T / n + 0.1 * np.eye(n))
        Rs.append([np.eye(m) if j == i else 0.1 * np.eye(m) for j in range(n_players)])
    costs = quadratic_player_costs(dyn.dims, Qs, Rs)
    modes = [GaussianRef.constant(rng.standard_normal(m), 0.5 * np.eye(m), horizon) for _ in range(branches)]
    ref = GMMRef(modes, np.full(branches, 1.0 / branches))
    refs = [ref] + [None] * (n_players - 1)
    lam = np.zeros(n_players)
    lam[0] = 1.0
    return BenchCase(Problem(dyn, costs, refs, horizon), rng.standard_normal(n), ref, lam)


def time_case(case: BenchCase, iterations: int = 15, halvings: int = 15) -> tuple[float, int]:
    """Wall time of one fixed-budget solve and the number of backward passes."""
    config = LQLConfig(max_iterations=iterations, linesearch_max_halvings=halvings, fixed_iterations=True)
    t0 = time.perf_counter()
    sol = solve_mm(case.problem, case.x0, case.ref, case.lam, config, player=0)
    return time.perf_counter() - t0, sol.backward_passes


@dataclass
class TimingRow:
    n_players: int
    branches: int
    repeats: int
    mean: float
    std: float
    worst: float
    per_iteration: float


def run_scaling(players: list[int], branches: list[int], repeats: int = 20, iterations: int = 15,
                halvings: int = 15, **case_kwargs) -> list[TimingRow]:
    """Time every ``(N, H)`` pair in the product of ``players`` and ``branches``."""
    rows = []
    for N in players:
        for H in branches:
            case = random_lq_case(N, H, **case_kwargs)
            time_case(case, iterations, halvings)  # untimed warm-up
            times = []
            for _ in range(repeats):
                dt, passes = time_case(case, iterations, halvings)
                if passes != iterations:
                    raise RuntimeError(f"expected {iterations} backward passes, traced {passes}")
                times.append(dt)
            t = np.array(times)
            rows.append(TimingRow(N, H, repeats, float(t.mean()), float(t.std()), float(t.max()),
                                  float(t.mean() / iterations)))
    return rows


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)[0])


def write_rows(path, rows: list[TimingRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_players", "branches", "repeats", "mean_s", "std_s", "worst_s", "per_iteration_s"])
        for r in rows:
            w.writerow([r.n_players, r.branches, r.repeats, f"{r.mean:.17g}", f"{r.std:.17g}",
                        f"{r.worst:.17g}", f"{r.per_iteration:.17g}"])

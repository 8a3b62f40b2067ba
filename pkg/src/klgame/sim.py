"""Receding-horizon tollbooth simulation, Monte Carlo batches and metrics."""

from __future__ import annotations

import concurrent.futures
import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import KLGameError
from .cost import PlayerCost, TollboothCost
from .dynamics import KinematicBicycle
from .ilq import LQLConfig, LQLSolution, Problem, solve
from .reference import FeedbackGaussianRef, GMMRef, maxent_reference

METHODS = ("ilqgames", "maxent", "klgame", "mm-klgame")
METRICS = ("coordinated", "safe", "progress", "time_avg_cost")


@dataclass
class ReferenceConfig:
    """Lane-change reference for one player.

    ``kind`` is ``none``, ``feedback`` (one lane-tracking mode toward
    ``target_lanes[0]``) or ``gmm`` (one mode per entry of ``target_lanes``
    mixed with ``weights``). Each mode steers the player's yaw rate toward
    the target lane centre with a PD law and its acceleration toward the
    target speed.
    """

    kind: str = "feedback"
    player: int = 0
    target_lanes: tuple[int, ...] = (1,)
    weights: tuple[float, ...] = (1.0,)
    lateral_gain: float = 0.225
    heading_gain: float = 3.0
    speed_gain: float = 0.5
    accel_std: float = 0.05
    yaw_std: float = 0.02

    def __post_init__(self):
        if self.kind not in ("none", "feedback", "gmm"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        self.target_lanes = tuple(int(k) for k in self.target_lanes)
        self.weights = tuple(float(w) for w in self.weights)
        if self.kind != "none":
            if len(self.weights) != len(self.target_lanes):
                raise ValueError("reference weights and target_lanes must have equal length")
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError("reference weights must sum to 1")
        if not (self.accel_std > 0 and self.yaw_std > 0):
            raise ValueError("reference standard deviations must be positive")


@dataclass
class ScenarioSpec:
    n_players: int = 2
    dt: float = 0.1
    planning_horizon: int = 20
    sim_length: int = 45
    replan_interval: int = 1
    seed: int = 0
    initial_gap: float = 8.0
    initial_speed: float = 10.0
    initial_lane: int = 0
    cost: TollboothCost = field(default_factory=TollboothCost)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    lam: tuple[float, ...] = (1.0, 0.0)
    maxent_lam: float = 2.5
    maxent_variance: float = 1e6
    execution: str = "sample"
    max_iterations: int = 30
    branching: int = 2

    def __post_init__(self):
        self.lam = tuple(float(v) for v in self.lam)
        if self.replan_interval < 1:
            raise ValueError("replan_interval must be >= 1")
        if self.planning_horizon < self.replan_interval:
            raise ValueError("planning_horizon must be >= replan_interval")
        if self.sim_length < 1:
            raise ValueError("sim_length must be >= 1")
        if len(self.lam) != self.n_players:
            raise ValueError(f"lam has {len(self.lam)} entries for {self.n_players} players")
        if any(v < 0 for v in self.lam) or self.maxent_lam < 0:
            raise ValueError("KL weights must be nonnegative")
        if self.execution not in ("sample", "mean"):
            raise ValueError("execution must be 'sample' or 'mean'")
        if self.n_players < 1:
            raise ValueError("n_players must be >= 1")

    def initial_state(self) -> np.ndarray:
        y = self.cost.lane_centers[self.initial_lane]
        x = []
        for i in range(self.n_players):
            # player 0 leads; the rest follow at the configured gap
            x += [self.initial_gap * (self.n_players - 1 - i), y, 0.0, self.initial_speed]
        return np.array(x)


@dataclass
class TrialResult:
    method: str
    seed: int
    states: np.ndarray
    controls: np.ndarray
    stage_costs: np.ndarray
    coordinated: bool
    safe: bool
    progress: float
    time_avg_cost: float
    failed: bool = False
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": int(self.seed),
            "coordinated": bool(self.coordinated),
            "safe": bool(self.safe),
            "progress": float(self.progress),
            "time_avg_cost": float(self.time_avg_cost),
            "failed": bool(self.failed),
            "error": self.error,
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "stage_costs": self.stage_costs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialResult":
        return cls(
            d["method"], d["seed"], np.array(d["states"], dtype=float), np.array(d["controls"], dtype=float),
            np.array(d["stage_costs"], dtype=float), d["coordinated"], d["safe"], d["progress"],
            d["time_avg_cost"], d.get("failed", False), d.get("error", ""),
        )


def lane_reference(spec: ScenarioSpec, target_y: float, horizon: int) -> FeedbackGaussianRef:
    """Affine-Gaussian law steering ``spec.reference.player`` toward ``target_y``."""
    rc = spec.reference
    n = 4 * spec.n_players
    p = rc.player
    K = np.zeros((2, n))
    kappa = np.zeros(2)
    # accel = -k_v (v - v_target)
    K[0, 4 * p + 3] = rc.speed_gain
    kappa[0] = -rc.speed_gain * spec.cost.target_speed
    # yaw rate = -k_y (y - target) - k_th heading
    K[1, 4 * p + 1] = rc.lateral_gain
    K[1, 4 * p + 2] = rc.heading_gain
    kappa[1] = -rc.lateral_gain * target_y
    cov = np.diag([rc.accel_std**2, rc.yaw_std**2])
    return FeedbackGaussianRef.constant(K, kappa, cov, horizon)


def build_problem(spec: ScenarioSpec, method: str) -> tuple[Problem, np.ndarray, object]:
    """Return ``(problem, lam, gmm_reference_or_None)`` for ``method``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    T = spec.planning_horizon
    dyn = KinematicBicycle(spec.n_players, spec.dt, T)
    costs = spec.cost.build(dyn.dims)
    N = spec.n_players
    refs: list = [None] * N
    gmm = None
    if method == "ilqgames":
        lam = np.zeros(N)
    elif method == "maxent":
        lam = np.full(N, spec.maxent_lam)
        refs = [maxent_reference(2, T, spec.maxent_variance) for _ in range(N)]
    else:
        rc = spec.reference
        lam = np.array(spec.lam)
        if rc.kind == "none":
            raise ValueError(f"method {method} needs a reference")
        modes = [lane_reference(spec, spec.cost.lane_centers[k], T) for k in rc.target_lanes]
        if method == "klgame":
            refs[rc.player] = modes[0] if len(modes) == 1 else GMMRef(modes, rc.weights)
        else:
            gmm = GMMRef(modes, rc.weights)
            refs[rc.player] = gmm
    return Problem(dyn, costs, refs, T), lam, gmm


def metric_coordinated(states: np.ndarray, cost: TollboothCost, n_players: int = 2) -> bool:
    """Terminal lateral positions lie in pairwise distinct lane bands."""
    ys = states[-1].reshape(n_players, 4)[:, 1]
    if np.any(np.abs(ys) > cost.road_half_width):
        return False
    lanes = [int(np.argmin(np.abs(np.asarray(cost.lane_centers) - y))) for y in ys]
    return len(set(lanes)) == len(lanes)


def metric_safe(states: np.ndarray, cost: TollboothCost, n_players: int = 2) -> bool:
    s = states.reshape(states.shape[0], n_players, 4)
    if np.any(np.abs(s[:, :, 1]) > cost.road_half_width):
        return False
    for i in range(n_players):
        for j in range(i + 1, n_players):
            d = np.linalg.norm(s[:, i, :2] - s[:, j, :2], axis=1)
            if np.min(d) <= cost.collision_radius:
                return False
    return True


def metric_progress(states: np.ndarray) -> float:
    """Longitudinal displacement of the first player."""
    return float(states[-1, 0] - states[0, 0])


def metric_cost(states: np.ndarray, controls: np.ndarray, costs: list[PlayerCost]) -> tuple[float, np.ndarray]:
    """Mean over steps of the summed realized stage costs, and the per-step
    per-player costs."""
    per = np.stack([c.value(states[:-1], controls) for c in costs], axis=1)
    return float(per.sum(axis=1).mean()), per


def first_drop_step(stage_costs: np.ndarray, threshold: float) -> int:
    """First step index whose summed stage cost is below ``threshold``
    (``len`` if never)."""
    total = stage_costs.sum(axis=1)
    below = np.nonzero(total < threshold)[0]
    return int(below[0]) if below.size else len(total)


def _shift(controls: np.ndarray, k: int) -> np.ndarray:
    out = np.empty_like(controls)
    out[:-k] = controls[k:]
    out[-k:] = controls[-1]
    return out


def run_trial(spec: ScenarioSpec, method: str, seed: int | None = None) -> TrialResult:
    """Closed-loop receding-horizon execution of one method."""
    if method == "mm-klgame":
        from .scenario import solve_mm

    seed = spec.seed if seed is None else seed
    problem, lam, gmm = build_problem(spec, method)
    dims = problem.dims
    rng = np.random.default_rng(seed)
    config = LQLConfig(max_iterations=spec.max_iterations)
    x = spec.initial_state()
    xs = [x]
    us = []
    warm = np.zeros((dims.horizon, dims.total_control_dim))
    plan = None
    k_plan = 0
    error = ""
    sample = spec.execution == "sample" and method != "ilqgames"
    try:
        for k in range(spec.sim_length):
            if k % spec.replan_interval == 0:
                if method == "mm-klgame":
                    plan = solve_mm(problem, x, gmm, lam, config, player=spec.reference.player,
                                    branching=min(spec.branching, gmm.n_modes), initial_controls=warm)
                else:
                    plan = solve(problem, x, warm, lam, config)
                k_plan = 0
            if method == "mm-klgame":
                u = plan.sample_root_action(x, rng) if sample else plan.root_mean_action(x)
                nominal_controls = plan.executed_controls()
            else:
                u = plan.sample_control(x, k_plan, rng) if sample else plan.mean_control(x, k_plan)
                nominal_controls = plan.nominal.controls
            us.append(u)
            x = problem.dynamics.step(x, u)
            xs.append(x)
            k_plan += 1
            if (k + 1) % spec.replan_interval == 0:
                warm = _shift(nominal_controls, k_plan)
    except KLGameError as exc:
        error = f"{type(exc).__name__}: {exc}"
    states = np.array(xs)
    controls = np.array(us).reshape(len(us), dims.total_control_dim)
    avg, per = metric_cost(states, controls, problem.costs) if len(us) else (float("nan"), np.zeros((0, spec.n_players)))
    failed = bool(error)
    return TrialResult(
        method, seed, states, controls, per,
        coordinated=not failed and metric_coordinated(states, spec.cost, spec.n_players),
        safe=not failed and metric_safe(states, spec.cost, spec.n_players),
        progress=metric_progress(states),
        time_avg_cost=avg,
        failed=failed,
        error=error,
    )


@dataclass
class BatchResult:
    method: str
    seed: int
    trials: list[TrialResult]
    stats: dict

    def to_dict(self, include_trials: bool = True) -> dict:
        d = {"method": self.method, "seed": int(self.seed), "n_trials": len(self.trials), "stats": self.stats}
        if include_trials:
            d["trials"] = [t.to_dict() for t in self.trials]
        return d


def trial_seeds(seed: int, n_trials: int) -> list[int]:
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n_trials)]


def aggregate(trials: list[TrialResult]) -> dict:
    stats = {}
    for name in METRICS:
        vals = np.array([float(getattr(t, name)) for t in trials])
        stats[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    stats["failed"] = int(sum(t.failed for t in trials))
    return stats


def _is_deterministic(spec: ScenarioSpec, method: str) -> bool:
    return method == "ilqgames" or spec.execution == "mean"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("KLGAME_THREADS", "1")))
    except ValueError:
        return 1


def run_batch(spec: ScenarioSpec, method: str, n_trials: int, seed: int, workers: int | None = None) -> BatchResult:
    """Run ``n_trials`` seeded trials; per-trial seeds derive from ``seed``.

    Deterministic executions (no action sampling) do not depend on the seed,
    so one rollout is computed and shared across trials.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    seeds = trial_seeds(seed, n_trials)
    workers = default_workers() if workers is None else workers
    if _is_deterministic(spec, method):
        base = run_trial(spec, method, seeds[0])
        trials = [replace(base, seed=s) for s in seeds]
    elif workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(run_trial, [spec] * n_trials, [method] * n_trials, seeds))
    else:
        trials = [run_trial(spec, method, s) for s in seeds]
    return BatchResult(method, seed, trials, aggregate(trials))


def trajectory_header(n_players: int) -> list[str]:
    cols = ["t"]
    for i in range(n_players):
        cols += [f"x{i}", f"y{i}", f"theta{i}", f"v{i}"]
    for i in range(n_players):
        cols += [f"accel{i}", f"yaw_rate{i}"]
    return cols


def write_trajectory_csv(path, states: np.ndarray, controls: np.ndarray, dt: float) -> None:
    """One row per state; controls of the final row are left empty."""
    n_players = states.shape[1] // 4
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_header(n_players))
        for k, x in enumerate(states):
            row = [f"{k * dt:.17g}"] + [f"{v:.17g}" for v in x]
            if k < len(controls):
                row += [f"{v:.17g}" for v in controls[k]]
            else:
                row += [""] * controls.shape[1]
            w.writerow(row)


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_players = (len(header) - 1) // 6
    n = 4 * n_players
    t = np.array([float(r[0]) for r in body])
    states = np.array([[float(v) for v in r[1:1 + n]] for r in body])
    controls = np.array([[float(v) for v in r[1 + n:]] for r in body if r[1 + n] != ""])
    return t, states, controls


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def spec_to_dict(spec: ScenarioSpec) -> dict:
    d = asdict(spec)
    d["cost"]["lane_preference"] = {str(k): list(v) for k, v in spec.cost.lane_preference.items()}
    return d

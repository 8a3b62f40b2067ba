"""Iterative linear-quadratic-Laplace solver for nonlinear KL-regularized games.

Each iteration linearizes the dynamics, quadraticizes the costs and fits a
local Gaussian to every reference along the nominal trajectory, solves the
resulting KL-LQ game exactly in deviation coordinates ``dx = x - x_bar``,
``du = u - u_bar``, then line-searches a rollout of the mean deviation policy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DimensionError, KLGameError, NumericalError, Trajectory, make_trajectory
from .cost import PlayerCost, QuadraticStageCost
from .dynamics import Dynamics, LinearGameStage
from .klqg import (
    AffineGaussianPolicy,
    AffineLQGame,
    AffineRefs,
    ValueQuadratic,
    as_weights,
    solve_affine,
)
from .reference import FeedbackGaussianRef, GaussianRef, feedback_fit, gaussian_kl, local_gaussian

log = logging.getLogger(__name__)


class LineSearchFailure(KLGameError):
    pass


@dataclass(frozen=True)
class LQLConfig:
    max_iterations: int = 100
    trajectory_tolerance: float = 1e-3
    cost_tolerance: float = 1e-4
    linesearch_max_halvings: int = 15
    initial_step: float = 1.0
    include_kl_in_social_cost: bool = True
    # run exactly max_iterations backward passes (benchmarking)
    fixed_iterations: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.trajectory_tolerance > 0 and self.cost_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if self.linesearch_max_halvings < 0:
            raise ValueError("linesearch_max_halvings must be >= 0")
        if not 0 < self.initial_step <= 1:
            raise ValueError("initial_step must be in (0, 1]")


@dataclass
class Problem:
    """A nonlinear game: dynamics, per-player costs and optional references.

    ``references[i]`` may be ``None`` (no regularization for that player), a
    Gaussian or feedback-Gaussian reference, or any policy with a
    ``log_density`` (Laplace-fitted along the nominal). With
    ``reference_fit="feedback"`` non-Gaussian references are instead fitted
    as affine-Gaussian laws from ``feedback_samples`` draws per step.
    """

    dynamics: Dynamics
    costs: Sequence[PlayerCost]
    references: Sequence[object | None]
    horizon: int
    terminal_cost: bool = False
    reference_fit: str = "laplace"
    feedback_samples: int = 64
    seed: int = 0

    def __post_init__(self):
        N = self.dynamics.dims.n_players
        if len(self.costs) != N:
            raise DimensionError(f"{len(self.costs)} player costs for {N} players")
        if len(self.references) != N:
            raise DimensionError(f"{len(self.references)} references for {N} players")
        if self.horizon < 1:
            raise DimensionError("horizon must be >= 1")
        if self.reference_fit not in ("laplace", "feedback"):
            raise ValueError("reference_fit must be 'laplace' or 'feedback'")

    @property
    def dims(self):
        return self.dynamics.dims.with_horizon(self.horizon)


@dataclass
class BackwardResult:
    """Local KL-LQ game at a nominal and its exact solution (deviation form)."""

    nominal: Trajectory
    game: AffineLQGame
    refs: AffineRefs
    local_refs: list
    policies: list[AffineGaussianPolicy]
    values: list[ValueQuadratic]

    def stages(self) -> list[LinearGameStage]:
        dims_split = np.cumsum(self.game.control_dims)[:-1]
        return [
            LinearGameStage(self.game.A[t], tuple(np.split(self.game.B[t], dims_split, axis=1)), self.game.d[t])
            for t in range(self.game.horizon)
        ]

    def stage_costs(self) -> list[list[QuadraticStageCost]]:
        sl = self.game.slices()
        out = []
        for i in range(self.game.n_players):
            out.append([
                QuadraticStageCost(
                    self.game.Q[i][t], self.game.q[i][t],
                    tuple(self.game.R[i][t, s, s] for s in sl), tuple(self.game.r[i][t, s] for s in sl),
                )
                for t in range(self.game.horizon)
            ])
        return out


@dataclass
class LQLSolution:
    policies: list[AffineGaussianPolicy]
    nominal: Trajectory
    iterations_used: int
    converged: bool
    social_cost_history: list[float]
    backward: BackwardResult | None = field(default=None, repr=False)
    backward_passes: int = 0

    def mean_control(self, x, t: int) -> np.ndarray:
        """Joint mean control of the deviation policy at state ``x``."""
        dx = np.asarray(x, dtype=float) - self.nominal.states[t]
        du = np.concatenate([-p.K[t] @ dx - p.kappa[t] for p in self.policies])
        return self.nominal.controls[t] + du

    def sample_control(self, x, t: int, rng: np.random.Generator) -> np.ndarray:
        u = self.mean_control(x, t)
        parts, off = [], 0
        for p in self.policies:
            m = p.K.shape[1]
            if p.deterministic:
                parts.append(u[off:off + m])
            else:
                parts.append(rng.multivariate_normal(u[off:off + m], p.cov[t]))
            off += m
        return np.concatenate(parts)

    def absolute_policies(self) -> list[AffineGaussianPolicy]:
        """Policies rewritten as ``u = -K x - kappa`` in absolute coordinates."""
        out = []
        xs, us = self.nominal.states[:-1], self.nominal.controls
        off = 0
        for p in self.policies:
            m = p.K.shape[1]
            kap = p.kappa - np.einsum("tmn,tn->tm", p.K, xs) - us[:, off:off + m]
            out.append(AffineGaussianPolicy(p.K, kap, p.cov, p.deterministic))
            off += m
        return out


def rollout(problem: Problem, x0, controls) -> Trajectory:
    return make_trajectory(problem.dims, x0, controls, problem.dynamics)


def _deviation_ref(ref, nominal: Trajectory, player: int, dims, n: int):
    """Express a local Gaussian reference in deviation coordinates."""
    sl = dims.control_slice(player)
    xs, us = nominal.states[:-1], nominal.controls[:, sl]
    T = nominal.horizon
    m = dims.control_dims[player]
    if isinstance(ref, FeedbackGaussianRef):
        K, kap = ref.K[:T], ref.kappa[:T]
        return K, kap + np.einsum("tmn,tn->tm", K, xs) + us, ref.cov[:T]
    if isinstance(ref, GaussianRef):
        return np.zeros((T, m, n)), us - ref.mean[:T], ref.cov[:T]
    raise TypeError(f"cannot use {type(ref).__name__} as a local reference")


def _fit_reference(problem: Problem, ref, nominal: Trajectory, player: int):
    if ref is None:
        return None
    if problem.reference_fit == "feedback" and not isinstance(ref, (GaussianRef, FeedbackGaussianRef)):
        rng = np.random.default_rng([problem.seed, player])
        return feedback_fit(ref, nominal, player, problem.feedback_samples, problem.dynamics, rng)
    return local_gaussian(ref, nominal, player, problem.dims)


def quadraticize(problem: Problem, nominal: Trajectory, local_refs, lam) -> tuple[AffineLQGame, AffineRefs, tuple]:
    """Build the deviation-coordinate KL-LQ game at ``nominal``."""
    lam = as_weights(lam)
    dims = problem.dims
    n, M = dims.state_dim, dims.total_control_dim
    xs, us = nominal.states, nominal.controls
    T = nominal.horizon
    A, B = problem.dynamics.jacobians_batch(xs[:-1], us)
    d = np.stack([problem.dynamics.step(xs[t], us[t]) for t in range(T)]) - xs[1:]
    Q, q, R, r = [], [], [], []
    for i, c in enumerate(problem.costs):
        Qi, qi, Ri, ri = c.quadraticize_batch(xs[:-1], us)
        Rb = np.zeros((T, M, M))
        for j, Rij in enumerate(Ri):
            sl = dims.control_slice(j)
            Rb[:, sl, sl] = Rij
        Q.append(Qi)
        q.append(qi)
        R.append(Rb)
        r.append(np.concatenate(ri, axis=1))
    game = AffineLQGame(A, B, d, Q, q, R, r, dims.control_dims)
    Kref, kref, Sinv, cov = [], [], [], []
    for i in range(dims.n_players):
        if lam[i] == 0 or local_refs[i] is None:
            Kref.append(None), kref.append(None), Sinv.append(None), cov.append(None)
            continue
        Kr, kr, C = _deviation_ref(local_refs[i], nominal, i, dims, n)
        Kref.append(Kr)
        kref.append(kr)
        cov.append(C)
        Sinv.append(np.linalg.inv(C))
    terminal = None
    if problem.terminal_cost:
        xT = xs[-1:]
        zeros = np.zeros((1, M))
        Zt, zt = [], []
        for c in problem.costs:
            Qi, qi, _, _ = c.quadraticize_batch(xT, zeros)
            Zt.append(Qi[0])
            zt.append(qi[0])
        terminal = (np.array(Zt), np.array(zt))
    return game, AffineRefs(Kref, kref, Sinv, cov), terminal


def backward_pass(nominal: Trajectory, problem: Problem, lam) -> BackwardResult:
    lam = as_weights(lam)
    if lam.lam and len(lam) != problem.dims.n_players:
        raise DimensionError(f"{len(lam)} KL weights for {problem.dims.n_players} players")
    local_refs = [
        _fit_reference(problem, ref, nominal, i) if lam[i] > 0 else None
        for i, ref in enumerate(problem.references)
    ]
    for i in range(problem.dims.n_players):
        if lam[i] > 0 and local_refs[i] is None:
            raise ValueError(f"player {i} has lam > 0 but no reference")
    game, refs, terminal = quadraticize(problem, nominal, local_refs, lam)
    policies, values = solve_affine(game, refs, lam, terminal)
    return BackwardResult(nominal, game, refs, local_refs, policies, values)


def forward_pass(nominal: Trajectory, policies: Sequence[AffineGaussianPolicy], step: float, dynamics: Dynamics) -> Trajectory:
    """Roll out ``u = u_bar - step*K (x - x_bar) - step*kappa`` through the
    nonlinear dynamics."""
    if not 0 < step <= 1:
        raise ValueError("step must be in (0, 1]")
    T = nominal.horizon
    K = np.concatenate([p.K for p in policies], axis=1)
    kap = np.concatenate([p.kappa for p in policies], axis=1)
    xs = np.empty_like(nominal.states)
    us = np.empty_like(nominal.controls)
    xs[0] = nominal.states[0]
    for t in range(T):
        us[t] = nominal.controls[t] - step * (K[t] @ (xs[t] - nominal.states[t]) + kap[t])
        xs[t + 1] = dynamics.step(xs[t], us[t])
        if not np.all(np.isfinite(xs[t + 1])):
            raise NumericalError(f"non-finite state at step {t + 1}")
    return Trajectory(xs, us)


def _ref_mean(ref, x, t):
    return ref.mean_at(x, t)


def social_cost(traj: Trajectory, problem: Problem, lam, local_refs=None, include_kl: bool = True) -> float:
    """Sum of all players' stage costs along ``traj`` plus weighted KL terms.

    The KL term at each step compares ``N(u_t, S)`` with the local reference
    ``N(mean(x_t), S)``, i.e. only its trajectory-dependent part.
    """
    lam = as_weights(lam)
    xs, us = traj.states, traj.controls
    total = 0.0
    for c in problem.costs:
        total += float(np.sum(c.value(xs[:-1], us)))
    if problem.terminal_cost:
        zeros = np.zeros((1, us.shape[1]))
        for c in problem.costs:
            total += float(c.value(xs[-1:], zeros)[0])
    if include_kl and local_refs is not None:
        dims = problem.dims
        for i, ref in enumerate(local_refs):
            if ref is None or lam[i] == 0:
                continue
            sl = dims.control_slice(i)
            for t in range(traj.horizon):
                C = ref.cov[t]
                total += lam[i] * gaussian_kl(us[t, sl], C, _ref_mean(ref, xs[t], t), C)
    return total


def solve(problem: Problem, x0, initial_controls=None, lam=None, config: LQLConfig | None = None) -> LQLSolution:
    """Run LQL iterations from ``x0`` until convergence."""
    config = config or LQLConfig()
    dims = problem.dims
    lam = as_weights(np.zeros(dims.n_players) if lam is None else lam)
    if initial_controls is None:
        initial_controls = np.zeros((dims.horizon, dims.total_control_dim))
    traj = rollout(problem, x0, initial_controls)
    history: list[float] = []
    converged = False
    it = 0
    bw = None
    for it in range(1, config.max_iterations + 1):
        bw = backward_pass(traj, problem, lam)
        cur = social_cost(traj, problem, lam, bw.local_refs, config.include_kl_in_social_cost)
        if not history:
            history.append(cur)
        eps = config.initial_step
        accepted = None
        any_finite = False
        for _ in range(config.linesearch_max_halvings + 1):
            try:
                cand = forward_pass(traj, bw.policies, eps, problem.dynamics)
                c = social_cost(cand, problem, lam, bw.local_refs, config.include_kl_in_social_cost)
            except NumericalError:
                eps *= 0.5
                continue
            if np.isfinite(c):
                any_finite = True
                if c < cur:
                    accepted = (cand, c)
                    break
            eps *= 0.5
        if accepted is None:
            if not any_finite:
                raise LineSearchFailure(f"no finite candidate after {config.linesearch_max_halvings} halvings "
                                        f"at iteration {it}")
            if config.fixed_iterations:
                continue
            # no descent direction left at this nominal
            converged = True
            log.debug("line search exhausted at iteration %d; treating as stationary", it)
            break
        cand, c = accepted
        change = float(np.max(np.abs(cand.states - traj.states)))
        traj = cand
        history.append(c)
        if config.fixed_iterations:
            continue
        if change < config.trajectory_tolerance or abs(cur - c) <= config.cost_tolerance * max(1.0, abs(cur)):
            converged = True
            break
    passes = it
    if not config.fixed_iterations:
        bw = backward_pass(traj, problem, lam)
        passes += 1
    return LQLSolution(bw.policies, traj, it, converged, history, bw, passes)

"""Per-player stage costs and their local quadratic models.

Every term is separable in state and control (no mixed second derivatives),
and all terms are evaluated in batch over a stack of time steps: ``xs`` has
shape ``(T, n)`` and ``us`` shape ``(T, sum m_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DimensionError, GameDims, NumericalError

Q_FLOOR = 1e-6
R_FLOOR = 1e-6


@dataclass(frozen=True)
class QuadraticStageCost:
    """``1/2 x'Qx + q'x + sum_j (1/2 u_j' R_j u_j + r_j' u_j)`` for one player."""

    Q: np.ndarray
    q: np.ndarray
    R: tuple[np.ndarray, ...]
    r: tuple[np.ndarray, ...]

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        n = Q.shape[0]
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(n))
        R = tuple(np.atleast_2d(np.asarray(M, dtype=float)) for M in self.R)
        object.__setattr__(self, "R", R)
        object.__setattr__(
            self, "r", tuple(np.asarray(v, dtype=float).reshape(M.shape[0]) for v, M in zip(self.r, R))
        )
        for M in (self.Q, self.q, *self.R, *self.r):
            if not np.all(np.isfinite(M)):
                raise NumericalError("non-finite entry in quadratic cost")

    def validate(self, player: int) -> None:
        """Check the symmetry/definiteness conditions the exact solver needs."""
        for name, M in [("Q", self.Q)] + [(f"R[{j}]", Rj) for j, Rj in enumerate(self.R)]:
            if np.max(np.abs(M - M.T), initial=0.0) > 1e-12:
                raise NumericalError(f"{name} is not symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12:
            raise NumericalError("Q is not positive semidefinite")
        for j, Rj in enumerate(self.R):
            lo = np.linalg.eigvalsh(Rj).min()
            if j == player and lo < 1e-9:
                raise NumericalError(f"R[{j}] for player {player} must be positive definite")
            if lo < -1e-12:
                raise NumericalError(f"R[{j}] is not positive semidefinite")

    def evaluate(self, x, u_per_player: Sequence[np.ndarray]) -> float:
        x = np.asarray(x, dtype=float)
        val = 0.5 * x @ self.Q @ x + self.q @ x
        for Rj, rj, uj in zip(self.R, self.r, u_per_player):
            uj = np.atleast_1d(np.asarray(uj, dtype=float))
            val += 0.5 * uj @ Rj @ uj + rj @ uj
        return float(val)


def psd_floor(M: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize and clamp eigenvalues below ``floor`` up to ``floor``.

    Works on a single matrix or a stack ``(..., k, k)``.
    """
    S = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, V = np.linalg.eigh(S)
    if np.all(w >= floor):
        return S
    w = np.maximum(w, floor)
    out = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


class CostTerm:
    """A smooth scalar stage-cost term.

    Subclasses implement ``value`` and ``accumulate``; the latter adds the
    term's gradient and Hessian into preallocated batch buffers.
    """

    def value(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def accumulate(self, xs, us, gx, gu, Hxx, Huu) -> None:
        raise NotImplementedError

    def evaluate(self, x, u) -> float:
        return float(self.value(np.atleast_2d(x), np.atleast_2d(u))[0])

    def derivatives(self, x, u):
        """Gradient and Hessian at a single point: ``(gx, gu, Hxx, Huu)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        n, m = x.size, u.size
        gx, gu = np.zeros((1, n)), np.zeros((1, m))
        Hxx, Huu = np.zeros((1, n, n)), np.zeros((1, m, m))
        self.accumulate(x[None], u[None], gx, gu, Hxx, Huu)
        return gx[0], gu[0], Hxx[0], Huu[0]


class QuadraticTerm(CostTerm):
    """Fixed quadratic in absolute coordinates (used for LQ games)."""

    def __init__(self, dims: GameDims, Q, q=None, R=None, r=None):
        n = dims.state_dim
        self.dims = dims
        self.Q = np.asarray(Q, dtype=float).reshape(n, n)
        self.q = np.zeros(n) if q is None else np.asarray(q, dtype=float).reshape(n)
        M = dims.total_control_dim
        self.R = np.zeros((M, M))
        self.r = np.zeros(M)
        for j, m in enumerate(dims.control_dims):
            sl = dims.control_slice(j)
            if R is not None and R[j] is not None:
                self.R[sl, sl] = np.asarray(R[j], dtype=float).reshape(m, m)
            if r is not None and r[j] is not None:
                self.r[sl] = np.asarray(r[j], dtype=float).reshape(m)

    def value(self, xs, us):
        return (
            0.5 * np.einsum("ti,ij,tj->t", xs, self.Q, xs)
            + xs @ self.q
            + 0.5 * np.einsum("ti,ij,tj->t", us, self.R, us)
            + us @ self.r
        )

    def accumulate(self, xs, us, gx, gu, Hxx, Huu):
        gx += xs @ self.Q.T + self.q
        gu += us @ self.R.T + self.r
        Hxx += self.Q
        Huu += self.R


class ControlCost(CostTerm):
    """``1/2 sum_k w_k u_{j,k}^2`` on one player's controls."""

    def __init__(self, dims: GameDims, player: int, weights):
        self.sl = dims.control_slice(player)
        self.w = np.broadcast_to(np.asarray(weights, dtype=float), (dims.control_dims[player],)).copy()
        idx = np.arange(self.sl.start, self.sl.stop)
        self._idx = idx

    def value(self, xs, us):
        return 0.5 * (us[:, self.sl] ** 2) @ self.w

    def accumulate(self, xs, us, gx, gu, Hxx, Huu):
        gu[:, self.sl] += us[:, self.sl] * self.w
        Huu[:, self._idx, self._idx] += self.w


class StateTracking(CostTerm):
    """``1/2 w (x[index] - target)^2``."""

    def __init__(self, index: int, target: float, weight: float):
        self.k = int(index)
        self.target = float(target)
        self.w = float(weight)

    def value(self, xs, us):
        return 0.5 * self.w * (xs[:, self.k] - self.target) ** 2

    def accumulate(self, xs, us, gx, gu, Hxx, Huu):
        gx[:, self.k] += self.w * (xs[:, self.k] - self.target)
        Hxx[:, self.k, self.k] += self.w


class LaneCenters(CostTerm):
    """Smoothed squared distance to the nearest lane centerline.

    ``-w tau log sum_k exp(-(y - c_k)^2 / (2 tau))``: one quadratic well per
    lane, joined by a smooth ridge between lanes.
    """

    def __init__(self, index: int, centers: Sequence[float], weight: float, smoothing: float = 0.5):
        self.k = int(index)
        self.c = np.asarray(centers, dtype=float)
        self.w = float(weight)
        self.tau = float(smoothing)

    def _parts(self, xs):
        d = xs[:, self.k, None] - self.c
        a = -(d**2) / (2 * self.tau)
        amax = a.max(axis=1, keepdims=True)
        e = np.exp(a - amax)
        s = e.sum(axis=1, keepdims=True)
        return d, a, amax[:, 0] + np.log(s[:, 0]), e / s

    def value(self, xs, us):
        _, _, lse, _ = self._parts(xs)
        return -self.w * self.tau * lse

    def accumulate(self, xs, us, gx, gu, Hxx, Huu):
        d, _, _, p = self._parts(xs)
        mean = (p * d).sum(axis=1)
        var = (p * d**2).sum(axis=1) - mean**2
        gx[:, self.k] += self.w * mean
        Hxx[:, self.k, self.k] += self.w * (1.0 - var / self.tau)


class RoadBoundary(CostTerm):
    """Quadratic penalty outside ``[lo, hi]``, zero inside."""

    def __init__(self, index: int, lo: float, hi: float, weight: float):
        self.k = int(index)
        self.lo, self.hi = float(lo), float(hi)
        self.w = float(weight)

    def value(self, xs, us):
        y = xs[:, self.k]
        return 0.5 * self.w * (np.maximum(0.0, y - self.hi) ** 2 + np.maximum(0.0, self.lo - y) ** 2)

    def accumulate(self, xs, us, gx, gu, Hxx, Huu):
        y = xs[:, self.k]
        gx[:, self.k] += self.w * (np.maximum(0.0, y - self.hi) - np.maximum(0.0, self.lo - y))
        Hxx[:, self.k, self.k] += self.w * ((y > self.hi) | (y < self.lo))


class ProximityPenalty(CostTerm):
    """``w exp(-(d^2 - r^2) / s)`` on the planar distance between two agents,
    with ``s = r^2 / 4``."""

    def __init__(self, pos_a: tuple[int, int], pos_b: tuple[int, int], weight: float, radius: float):
        if radius <= 0:
            raise ValueError("collision radius must be positive")
        self.a = np.asarray(pos_a)
        self.b = np.asarray(pos_b)
        self.w = float(weight)
        self.r = float(radius)
        self.s = self.r**2 / 4.0

    def _delta(self, xs):
        return xs[:, self.a] - xs[:, self.b]

    def value(self, xs, us):
        D = self._delta(xs)
        return self.w * np.exp(-((D**2).sum(axis=1) - self.r**2) / self.s)

    def accumulate(self, xs, us, gx, gu, Hxx, Huu):
        D = self._delta(xs)
        f = self.w * np.exp(-((D**2).sum(axis=1) - self.r**2) / self.s)
        g = f[:, None] * (-2.0 * D / self.s)
        H = f[:, None, None] * (4.0 * D[:, :, None] * D[:, None, :] / self.s**2 - 2.0 * np.eye(2) / self.s)
        a, b = self.a, self.b
        gx[:, a] += g
        gx[:, b] -= g
        Hxx[:, a[:, None], a] += H
        Hxx[:, b[:, None], b] += H
        Hxx[:, a[:, None], b] -= H
        Hxx[:, b[:, None], a] -= H


class LateralAgreement(CostTerm):
    """``w exp(-(y_a - y_b)^2 / sigma^2)``: penalizes two agents sharing a lane."""

    def __init__(self, index_a: int, index_b: int, weight: float, width: float):
        self.a, self.b = int(index_a), int(index_b)
        self.w = float(weight)
        self.s2 = float(width) ** 2

    def value(self, xs, us):
        d = xs[:, self.a] - xs[:, self.b]
        return self.w * np.exp(-(d**2) / self.s2)

    def accumulate(self, xs, us, gx, gu, Hxx, Huu):
        d = xs[:, self.a] - xs[:, self.b]
        f = self.w * np.exp(-(d**2) / self.s2)
        g = f * (-2.0 * d / self.s2)
        h = f * (4.0 * d**2 / self.s2**2 - 2.0 / self.s2)
        a, b = self.a, self.b
        gx[:, a] += g
        gx[:, b] -= g
        Hxx[:, a, a] += h
        Hxx[:, b, b] += h
        Hxx[:, a, b] -= h
        Hxx[:, b, a] -= h


@dataclass
class PlayerCost:
    """Sum of cost terms for one player."""

    dims: GameDims
    player: int
    terms: list[CostTerm] = field(default_factory=list)

    def value(self, xs, us) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        us = np.atleast_2d(np.asarray(us, dtype=float))
        total = np.zeros(xs.shape[0])
        for term in self.terms:
            total += term.value(xs, us)
        return total

    def evaluate(self, x, u) -> float:
        if isinstance(u, (list, tuple)):
            u = self.dims.join(u)
        return float(self.value(x, u)[0])

    def raw_derivatives(self, xs, us):
        """Unprojected batch gradients and Hessians ``(gx, gu, Hxx, Huu)``."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        us = np.atleast_2d(np.asarray(us, dtype=float))
        T, n = xs.shape
        M = us.shape[1]
        gx, gu = np.zeros((T, n)), np.zeros((T, M))
        Hxx, Huu = np.zeros((T, n, n)), np.zeros((T, M, M))
        for term in self.terms:
            term.accumulate(xs, us, gx, gu, Hxx, Huu)
        return gx, gu, Hxx, Huu

    def quadraticize_batch(self, xs, us):
        """Local quadratic models over a stack of nominal points.

        Returns ``(Q, q, R, r)`` with ``Q: (T, n, n)``, ``q: (T, n)`` and
        per-player lists ``R[j]: (T, m_j, m_j)``, ``r[j]: (T, m_j)``.
        """
        gx, gu, Hxx, Huu = self.raw_derivatives(xs, us)
        if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(Hxx))
                and np.all(np.isfinite(gu)) and np.all(np.isfinite(Huu))):
            raise NumericalError(f"non-finite cost derivatives for player {self.player}")
        Q = psd_floor(Hxx, Q_FLOOR)
        R, r = [], []
        for j in range(self.dims.n_players):
            sl = self.dims.control_slice(j)
            Rj = Huu[:, sl, sl]
            Rj = psd_floor(Rj, R_FLOOR if j == self.player else 0.0)
            R.append(Rj)
            r.append(gu[:, sl])
        return Q, gx, R, r

    def quadraticize(self, x_bar, u_bar) -> QuadraticStageCost:
        if isinstance(u_bar, (list, tuple)):
            u_bar = self.dims.join(u_bar)
        Q, q, R, r = self.quadraticize_batch(np.asarray(x_bar)[None], np.asarray(u_bar)[None])
        return QuadraticStageCost(Q[0], q[0], tuple(Rj[0] for Rj in R), tuple(rj[0] for rj in r))


def quadratic_player_costs(dims: GameDims, Qs, Rs, qs=None, rs=None) -> list[PlayerCost]:
    """Build pure-quadratic player costs ``1/2 x'Q_i x + sum_j 1/2 u_j'R_ij u_j``.

    ``Rs[i][j]`` is player ``i``'s weight on player ``j``'s control.
    """
    costs = []
    for i in range(dims.n_players):
        term = QuadraticTerm(
            dims, Qs[i], None if qs is None else qs[i], Rs[i], None if rs is None else rs[i]
        )
        costs.append(PlayerCost(dims, i, [term]))
    return costs


@dataclass
class TollboothCost:
    """Parameters of the two-lane tollbooth costs.

    Agents use the bicycle layout ``[px, py, heading, speed]``. Lane indices
    refer to ``lane_centers`` (lane 0 is "Lane 1").
    """

    lane_centers: tuple[float, ...] = (1.85, -1.85)
    lane_weight: float = 10.0
    lane_smoothing: float = 0.5
    coordination_weight: float = 30.0
    coordination_width: float = 3.0
    collision_weight: float = 50.0
    collision_radius: float = 2.0
    boundary_weight: float = 100.0
    road_half_width: float = 3.7
    boundary_margin: float = 0.6
    control_weight: tuple[float, float] = (2.0, 20.0)
    speed_weight: float = 1.0
    target_speed: float = 10.0
    heading_weight: float = 5.0
    # player index -> (preferred lane index, weight)
    lane_preference: dict[int, tuple[int, float]] = field(default_factory=lambda: {1: (0, 4.0)})

    def __post_init__(self):
        for name in ("lane_weight", "coordination_weight", "collision_weight", "boundary_weight",
                     "speed_weight", "heading_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if any(w < 0 for w in self.control_weight):
            raise ValueError("control weights must be nonnegative")
        if self.collision_radius <= 0:
            raise ValueError("collision_radius must be positive")

    def build(self, dims: GameDims) -> list[PlayerCost]:
        if dims.state_dim != 4 * dims.n_players:
            raise DimensionError("tollbooth costs expect the 4-state bicycle layout per agent")
        N = dims.n_players
        lo = -self.road_half_width + self.boundary_margin
        hi = self.road_half_width - self.boundary_margin
        costs = []
        for i in range(N):
            y, th, v = 4 * i + 1, 4 * i + 2, 4 * i + 3
            terms: list[CostTerm] = [
                LaneCenters(y, self.lane_centers, self.lane_weight, self.lane_smoothing),
                RoadBoundary(y, lo, hi, self.boundary_weight),
                StateTracking(v, self.target_speed, self.speed_weight),
                StateTracking(th, 0.0, self.heading_weight),
                ControlCost(dims, i, self.control_weight),
            ]
            if i in self.lane_preference:
                lane, w = self.lane_preference[i]
                terms.append(StateTracking(y, self.lane_centers[lane], w))
            for j in range(N):
                if j == i:
                    continue
                terms.append(LateralAgreement(y, 4 * j + 1, self.coordination_weight, self.coordination_width))
                terms.append(ProximityPenalty((4 * i, 4 * i + 1), (4 * j, 4 * j + 1),
                                              self.collision_weight, self.collision_radius))
            costs.append(PlayerCost(dims, i, terms))
        return costs

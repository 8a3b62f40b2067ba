"""Joint dynamics models, exact stepping and linearization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DimensionError, GameDims, NumericalError


@dataclass(frozen=True)
class LinearGameStage:
    """One step of ``x' = A x + sum_i B_i u_i + drift (+ noise)``."""

    A: np.ndarray
    B: tuple[np.ndarray, ...]
    drift: np.ndarray
    noise_cov: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        B = tuple(np.asarray(b, dtype=float).reshape(n, -1) for b in self.B)
        drift = np.asarray(self.drift, dtype=float).reshape(n)
        noise = np.zeros((n, n)) if self.noise_cov is None else np.asarray(self.noise_cov, dtype=float)
        if noise.shape != (n, n):
            raise DimensionError("noise_cov must be n x n")
        if not np.allclose(noise, noise.T, atol=1e-12):
            raise NumericalError("noise_cov must be symmetric")
        if noise.any() and np.linalg.eigvalsh(noise).min() < -1e-12:
            raise NumericalError("noise_cov must be positive semidefinite")
        for M in (A, drift, noise, *B):
            if not np.all(np.isfinite(M)):
                raise NumericalError("non-finite entry in linear stage")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "noise_cov", noise)

    @property
    def B_joint(self) -> np.ndarray:
        return np.concatenate(self.B, axis=1)

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ x + self.B_joint @ u + self.drift


def _fd_step(x: np.ndarray) -> np.ndarray:
    return 1e-5 * np.maximum(1.0, np.abs(x))


class Dynamics:
    """Base class: subclasses implement ``step``; ``jacobians`` defaults to
    central finite differences."""

    dims: GameDims

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(A, B)`` with ``B`` the joint ``n x sum(m_i)`` input matrix."""
        return fd_jacobians(self.step, x, u)

    def jacobians_batch(self, xs: np.ndarray, us: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.jacobians(x, u) for x, u in zip(xs, us)]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def linearize(self, x_bar, u_bar, noise_cov=None) -> LinearGameStage:
        x_bar = np.asarray(x_bar, dtype=float)
        u_bar = np.asarray(u_bar, dtype=float)
        if not (np.all(np.isfinite(x_bar)) and np.all(np.isfinite(u_bar))):
            raise NumericalError("linearization point is not finite")
        A, B = self.jacobians(x_bar, u_bar)
        drift = self.step(x_bar, u_bar) - A @ x_bar - B @ u_bar
        return LinearGameStage(A, tuple(self.dims.split(B)), drift, noise_cov)


def fd_jacobians(step, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of ``step`` at ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.size, u.size
    A = np.empty((n, n))
    B = np.empty((n, m))
    hx, hu = _fd_step(x), _fd_step(u)
    for k in range(n):
        e = np.zeros(n)
        e[k] = hx[k]
        A[:, k] = (step(x + e, u) - step(x - e, u)) / (2 * hx[k])
    for k in range(m):
        e = np.zeros(m)
        e[k] = hu[k]
        B[:, k] = (step(x, u + e) - step(x, u - e)) / (2 * hu[k])
    return A, B


class LinearDynamics(Dynamics):
    """Time-invariant ``x' = A x + sum_i B_i u_i + c``."""

    def __init__(self, A, B: Sequence[np.ndarray], c=None, dt: float = 0.1, horizon: int = 1):
        self.A = np.asarray(A, dtype=float)
        self.B = [np.asarray(b, dtype=float).reshape(self.A.shape[0], -1) for b in B]
        self._B_joint = np.concatenate(self.B, axis=1)
        n = self.A.shape[0]
        self.c = np.zeros(n) if c is None else np.asarray(c, dtype=float)
        self.dims = GameDims(len(self.B), n, tuple(b.shape[1] for b in self.B), horizon, dt)

    def step(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise NumericalError("non-finite input to step")
        return self.A @ x + self._B_joint @ u + self.c

    def jacobians(self, x, u):
        return self.A.copy(), self._B_joint.copy()

    def jacobians_batch(self, xs, us):
        T = len(xs)
        return np.broadcast_to(self.A, (T, *self.A.shape)).copy(), np.broadcast_to(
            self._B_joint, (T, *self._B_joint.shape)
        ).copy()


class SingleIntegrator(LinearDynamics):
    """Each player directly moves its own ``d``-dimensional position:
    ``x' = x + dt * u``."""

    def __init__(self, n_players: int = 1, dim: int = 1, dt: float = 1.0, horizon: int = 1):
        n = n_players * dim
        B = []
        for i in range(n_players):
            b = np.zeros((n, dim))
            b[i * dim:(i + 1) * dim] = dt * np.eye(dim)
            B.append(b)
        super().__init__(np.eye(n), B, dt=dt, horizon=horizon)


class KinematicBicycle(Dynamics):
    """Unicycle-form kinematic bicycle, one 4-state block per agent.

    Agent state ``[px, py, heading, speed]``, control ``[accel, yaw_rate]``,
    forward Euler with step ``dt``. Heading is not wrapped.
    """

    def __init__(self, n_players: int = 2, dt: float = 0.1, horizon: int = 1):
        self.dims = GameDims(n_players, 4 * n_players, (2,) * n_players, horizon, dt)
        self.dt = dt

    def step(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise NumericalError("non-finite input to step")
        s = x.reshape(-1, 4)
        c = u.reshape(-1, 2)
        dt = self.dt
        out = np.empty_like(s)
        out[:, 0] = s[:, 0] + dt * s[:, 3] * np.cos(s[:, 2])
        out[:, 1] = s[:, 1] + dt * s[:, 3] * np.sin(s[:, 2])
        out[:, 2] = s[:, 2] + dt * c[:, 1]
        out[:, 3] = s[:, 3] + dt * c[:, 0]
        return out.reshape(-1)

    def jacobians(self, x, u):
        A, B = self.jacobians_batch(np.asarray(x, dtype=float)[None], np.asarray(u, dtype=float)[None])
        return A[0], B[0]

    def jacobians_batch(self, xs, us):
        xs = np.asarray(xs, dtype=float)
        T = xs.shape[0]
        N = self.dims.n_players
        n = self.dims.state_dim
        dt = self.dt
        s = xs.reshape(T, N, 4)
        th, v = s[..., 2], s[..., 3]
        A = np.zeros((T, n, n))
        B = np.zeros((T, n, 2 * N))
        idx = np.arange(N) * 4
        A[:, np.arange(n), np.arange(n)] = 1.0
        A[:, idx, idx + 2] = -dt * v * np.sin(th)
        A[:, idx, idx + 3] = dt * np.cos(th)
        A[:, idx + 1, idx + 2] = dt * v * np.cos(th)
        A[:, idx + 1, idx + 3] = dt * np.sin(th)
        B[:, idx + 3, 2 * np.arange(N)] = dt
        B[:, idx + 2, 2 * np.arange(N) + 1] = dt
        return A, B

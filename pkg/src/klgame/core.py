"""Shared game containers: dimensions, joint state/control helpers, trajectories.

Joint states are flat float64 vectors of length ``state_dim``. Joint controls
are flat vectors of length ``sum(control_dims)``; ``GameDims.split`` recovers
the per-player pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class KLGameError(Exception):
    """Base class for all solver errors."""


class DimensionError(KLGameError, ValueError):
    pass


class NumericalError(KLGameError, ArithmeticError):
    pass


@dataclass(frozen=True)
class GameDims:
    n_players: int
    state_dim: int
    control_dims: tuple[int, ...]
    horizon: int
    dt: float = 0.1
    _offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "control_dims", tuple(int(m) for m in self.control_dims))
        if self.n_players < 1:
            raise DimensionError("n_players must be >= 1")
        if self.state_dim < 1:
            raise DimensionError("state_dim must be >= 1")
        if len(self.control_dims) != self.n_players:
            raise DimensionError(
                f"control_dims has {len(self.control_dims)} entries for {self.n_players} players"
            )
        if any(m < 1 for m in self.control_dims):
            raise DimensionError("every control dimension must be >= 1")
        if self.horizon < 1:
            raise DimensionError("horizon must be >= 1")
        if not self.dt > 0:
            raise DimensionError("dt must be positive")
        object.__setattr__(self, "_offsets", tuple(np.concatenate([[0], np.cumsum(self.control_dims)])))

    @property
    def total_control_dim(self) -> int:
        return self._offsets[-1]

    def control_slice(self, player: int) -> slice:
        return slice(self._offsets[player], self._offsets[player + 1])

    def split(self, u: np.ndarray) -> list[np.ndarray]:
        """Split a joint control (last axis) into per-player pieces."""
        return [u[..., self.control_slice(i)] for i in range(self.n_players)]

    def join(self, per_player: Sequence[np.ndarray]) -> np.ndarray:
        if len(per_player) != self.n_players:
            raise DimensionError(f"expected {self.n_players} player controls, got {len(per_player)}")
        for i, ui in enumerate(per_player):
            if np.shape(ui)[-1] != self.control_dims[i]:
                raise DimensionError(
                    f"player {i} control has length {np.shape(ui)[-1]}, expected {self.control_dims[i]}"
                )
        return np.concatenate([np.asarray(ui, dtype=float) for ui in per_player], axis=-1)

    def with_horizon(self, horizon: int) -> "GameDims":
        return GameDims(self.n_players, self.state_dim, self.control_dims, horizon, self.dt)


def as_state(dims: GameDims, x) -> np.ndarray:
    """Validate and convert a joint state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (dims.state_dim,):
        raise DimensionError(f"state has shape {x.shape}, expected ({dims.state_dim},)")
    if not np.all(np.isfinite(x)):
        raise NumericalError("state contains non-finite entries")
    return x


def as_control(dims: GameDims, u) -> np.ndarray:
    """Validate and convert a joint control given flat or as a per-player list."""
    if isinstance(u, (list, tuple)):
        u = dims.join(u)
    u = np.asarray(u, dtype=float)
    if u.shape != (dims.total_control_dim,):
        raise DimensionError(f"control has shape {u.shape}, expected ({dims.total_control_dim},)")
    if not np.all(np.isfinite(u)):
        raise NumericalError("control contains non-finite entries")
    return u


@dataclass(frozen=True)
class Trajectory:
    """States ``(T+1, n)`` and joint controls ``(T, sum m_i)``."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        controls = np.array(self.controls, dtype=float)
        if states.ndim != 2 or controls.ndim != 2:
            raise DimensionError("states and controls must be 2-D arrays")
        if states.shape[0] != controls.shape[0] + 1:
            raise DimensionError(
                f"{states.shape[0]} states for {controls.shape[0]} controls; need exactly one more state"
            )
        states.flags.writeable = False
        controls.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def replace(self, states=None, controls=None) -> "Trajectory":
        return Trajectory(
            self.states if states is None else states,
            self.controls if controls is None else controls,
        )


def make_trajectory(dims: GameDims, x0, controls, dynamics) -> Trajectory:
    """Roll out ``dynamics`` from ``x0`` under an open-loop control sequence."""
    x0 = as_state(dims, x0)
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1 and dims.total_control_dim == 1:
        controls = controls[:, None]
    if controls.shape != (dims.horizon, dims.total_control_dim):
        raise DimensionError(
            f"controls have shape {controls.shape}, expected ({dims.horizon}, {dims.total_control_dim})"
        )
    states = np.empty((dims.horizon + 1, dims.state_dim))
    states[0] = x0
    for t in range(dims.horizon):
        states[t + 1] = dynamics.step(states[t], controls[t])
    if not np.all(np.isfinite(states)):
        raise NumericalError("rollout produced non-finite states")
    return Trajectory(states, controls)

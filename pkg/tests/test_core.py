import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klgame.core import DimensionError, GameDims, NumericalError, Trajectory, make_trajectory
from klgame.dynamics import KinematicBicycle, SingleIntegrator


def test_single_integrator_telescopes():
    dyn = SingleIntegrator(1, 1, dt=1.0, horizon=3)
    traj = make_trajectory(dyn.dims, [0.0], [1.0, 1.0, 1.0], dyn)
    np.testing.assert_array_equal(traj.states[:, 0], [0, 1, 2, 3])


def test_zero_velocity_bicycle_is_fixed():
    dyn = KinematicBicycle(2, dt=0.1, horizon=6)
    x0 = np.array([1.0, 2.0, 0.3, 0.0, -4.0, 1.0, -1.0, 0.0])
    traj = make_trajectory(dyn.dims, x0, np.zeros((6, 4)), dyn)
    assert np.all(traj.states == x0)


def test_bicycle_constant_speed_advances():
    dyn = KinematicBicycle(1, dt=0.1, horizon=5)
    traj = make_trajectory(dyn.dims, [0.0, 0.0, 0.0, 1.0], np.zeros((5, 2)), dyn)
    np.testing.assert_allclose(traj.states[:, 0], 0.1 * np.arange(6), atol=1e-15)
    assert np.all(traj.states[:, 1:] == [0.0, 0.0, 1.0])


@pytest.mark.parametrize("kwargs", [
    dict(n_players=0, state_dim=1, control_dims=(), horizon=1),
    dict(n_players=1, state_dim=0, control_dims=(1,), horizon=1),
    dict(n_players=1, state_dim=1, control_dims=(0,), horizon=1),
    dict(n_players=2, state_dim=1, control_dims=(1,), horizon=1),
    dict(n_players=1, state_dim=1, control_dims=(1,), horizon=0),
    dict(n_players=1, state_dim=1, control_dims=(1,), horizon=1, dt=0.0),
])
def test_game_dims_rejects_invalid(kwargs):
    with pytest.raises(DimensionError):
        GameDims(**kwargs)


def test_make_trajectory_dimension_errors():
    dyn = SingleIntegrator(2, 1, horizon=3)
    with pytest.raises(DimensionError):
        make_trajectory(dyn.dims, [0.0], np.zeros((3, 2)), dyn)
    with pytest.raises(DimensionError):
        make_trajectory(dyn.dims, [0.0, 0.0], np.zeros((2, 2)), dyn)


def test_make_trajectory_non_finite():
    dyn = SingleIntegrator(1, 1, horizon=2)
    with pytest.raises(NumericalError):
        make_trajectory(dyn.dims, [np.nan], [0.0, 0.0], dyn)
    with pytest.raises(NumericalError):
        make_trajectory(dyn.dims, [0.0], [np.inf, 0.0], dyn)


def test_trajectory_length_invariant():
    with pytest.raises(DimensionError):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 1)))
    tr = Trajectory(np.zeros((4, 2)), np.zeros((3, 1)))
    assert tr.horizon == 3
    with pytest.raises(ValueError):
        tr.states[0, 0] = 1.0
    with pytest.raises(DimensionError):
        tr.replace(controls=np.zeros((2, 1)))


def test_split_join_roundtrip():
    dims = GameDims(3, 4, (1, 2, 3), 1)
    u = np.arange(6.0)
    parts = dims.split(u)
    assert [p.size for p in parts] == [1, 2, 3]
    np.testing.assert_array_equal(dims.join(parts), u)
    with pytest.raises(DimensionError):
        dims.join([np.zeros(1), np.zeros(1), np.zeros(3)])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.integers(0, 2**31 - 1))
def test_make_trajectory_is_deterministic(x0, seed):
    dyn = KinematicBicycle(2, horizon=10)
    us = np.random.default_rng(seed).standard_normal((10, 4))
    a = make_trajectory(dyn.dims, x0, us, dyn)
    b = make_trajectory(dyn.dims, x0, us, dyn)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.states.shape == (11, 8) and a.controls.shape == (10, 4)

"""KL-regularized dynamic games: exact LQG equilibria, iterative LQL solver,
multi-modal scenario trees and a tollbooth benchmark."""

from .core import DimensionError, GameDims, KLGameError, NumericalError, Trajectory, make_trajectory
from .cost import PlayerCost, QuadraticStageCost, TollboothCost
from .dynamics import KinematicBicycle, LinearDynamics, LinearGameStage, SingleIntegrator
from .ilq import LineSearchFailure, LQLConfig, LQLSolution, Problem, backward_pass, forward_pass, solve
from .klqg import (
    AffineGaussianPolicy,
    KLWeights,
    SingularRiccatiError,
    ValueQuadratic,
    solve_klqg,
    solve_klqg_feedback,
)
from .reference import FeedbackGaussianRef, GaussianRef, GMMRef, SingularLaplaceError, gaussian_kl
from .scenario import ScenarioTree, build_tree, sample_root_action, solve_mm
from .sim import ScenarioSpec, TrialResult, run_batch, run_trial

__all__ = [
    "AffineGaussianPolicy", "DimensionError", "FeedbackGaussianRef", "GMMRef", "GameDims", "GaussianRef",
    "KLGameError", "KLWeights", "KinematicBicycle", "LQLConfig", "LQLSolution", "LineSearchFailure",
    "LinearDynamics", "LinearGameStage", "NumericalError", "PlayerCost", "Problem", "QuadraticStageCost",
    "ScenarioSpec", "ScenarioTree", "SingleIntegrator", "SingularLaplaceError", "SingularRiccatiError",
    "TollboothCost", "Trajectory", "TrialResult", "ValueQuadratic", "backward_pass", "build_tree",
    "forward_pass", "gaussian_kl", "make_trajectory", "run_batch", "run_trial", "sample_root_action", "solve",
    "solve_klqg", "solve_klqg_feedback", "solve_mm",
]

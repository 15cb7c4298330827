"""Differentiable projection of network outputs onto linear constraint sets."""

from .constraints import (
    Kind,
    LinearConstraintSet,
    ViolationReport,
    WeightMode,
    build_random_feasible,
    build_segmentation_constraints,
    evaluate,
    surrogate_weights,
)
from .estimators import PolyhedralProjection, ProjectedMLPRegressor
from .neural import LossSpec, MlpModel, RmsPropState, loss_and_grad, rmsprop_step, train
from .oracle import KktSolution, closest_point
from .projection import (
    ProjectionConfig,
    ProjectionTrace,
    StepRule,
    project,
    project_equality,
    project_step,
    project_vjp,
)

__version__ = "0.1.0"

__all__ = [
    "Kind",
    "LinearConstraintSet",
    "ViolationReport",
    "WeightMode",
    "build_random_feasible",
    "build_segmentation_constraints",
    "evaluate",
    "surrogate_weights",
    "PolyhedralProjection",
    "ProjectedMLPRegressor",
    "LossSpec",
    "MlpModel",
    "RmsPropState",
    "loss_and_grad",
    "rmsprop_step",
    "train",
    "KktSolution",
    "closest_point",
    "ProjectionConfig",
    "ProjectionTrace",
    "StepRule",
    "project",
    "project_equality",
    "project_step",
    "project_vjp",
]

"""Gravity-compensation toolkit for a coupled surgical manipulator."""

from .model import (
    ChainModel, FrameSpec, ParamLayout, build_psm_preset, coupling_matrix,
    default_hulls, param_layout, validate,
)
from .kinematics import (
    HomTransform, Pose6, RobotState, forward_kinematics, frame_coordinates,
    mdh_transform, rcm_pose,
)
from .dynamics import (
    ParamVector, RegressorBlock, base_parameter_analysis, gravity_torque,
    inverse_dynamics, lagrangian_oracle, regressor,
)

__version__ = "0.1.0"

__all__ = [
    "ChainModel", "FrameSpec", "ParamLayout", "ParamVector", "Pose6",
    "RegressorBlock", "HomTransform", "RobotState", "base_parameter_analysis",
    "build_psm_preset", "coupling_matrix", "default_hulls",
    "forward_kinematics", "frame_coordinates", "gravity_torque",
    "inverse_dynamics", "lagrangian_oracle", "mdh_transform", "param_layout",
    "rcm_pose", "regressor", "validate",
]

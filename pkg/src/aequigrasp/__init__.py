"""Equivariant flow-matching grasp synthesis for grippers with arbitrary DoF."""

__version__ = "0.1.0"

from .irreps import (
    CGTensor,
    IrrepsArray,
    IrrepsSpec,
    cg_tensor,
    channel_dot,
    parse_irreps,
    rotate_features,
    spherical_harmonics,
    wigner_d,
)
from .liegroup import Pose, Twist, compose, inverse, apply, so3_exp, so3_log
from .kinematics import KinematicTree, load_gripper, parse_gripper, shipped_grippers
from .flow import FlowConfig, GraspState
from .model import ModelConfig
from .config import RunConfig, load_config, parse_config

__all__ = [
    "CGTensor",
    "FlowConfig",
    "GraspState",
    "IrrepsArray",
    "IrrepsSpec",
    "KinematicTree",
    "ModelConfig",
    "Pose",
    "RunConfig",
    "Twist",
    "apply",
    "cg_tensor",
    "channel_dot",
    "compose",
    "inverse",
    "load_config",
    "load_gripper",
    "parse_config",
    "parse_gripper",
    "parse_irreps",
    "rotate_features",
    "shipped_grippers",
    "so3_exp",
    "so3_log",
    "spherical_harmonics",
    "wigner_d",
]

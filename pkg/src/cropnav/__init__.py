"""Hybrid under-canopy row navigation: estimation, perception, supervision,
and control around a deterministic 2-D row-crop simulator."""

from .model import (
    ControlInput,
    RobotState,
    TractionParams,
    VehicleConfig,
    WheelCommand,
    inverse_wheel,
    step,
    wheel_commands,
    wrap_angle,
)
from .world import FieldConfig, FieldMap, WaypointPlan, build_field, serpentine_plan

__all__ = [
    "ControlInput",
    "RobotState",
    "TractionParams",
    "VehicleConfig",
    "WheelCommand",
    "inverse_wheel",
    "step",
    "wheel_commands",
    "wrap_angle",
    "FieldConfig",
    "FieldMap",
    "WaypointPlan",
    "build_field",
    "serpentine_plan",
]

__version__ = "0.1.0"

"""Disturbance-aware NMPC: shooting problem, real-time iteration and helpers."""

from .ocp import (INPUT_REFS, OcpConfig, build_residuals, cost, hover_input, input_reference,
                  rk4_discrete, shooting_defects)
from .qp import QP_MAX_ITER, QP_OK, QPResult, kkt_residual, qp_solve_box
from .rti import DisturbanceSchedule, RtiWorkspace, merit, rti_step, shift_workspace
from .schedule import build_schedule, resample_zoh
from .throttle import HoverThrottleEstimator, throttle_to_thrust, thrust_to_throttle

__all__ = [
    "INPUT_REFS", "OcpConfig", "build_residuals", "cost", "hover_input", "input_reference", "rk4_discrete",
    "shooting_defects", "QP_MAX_ITER", "QP_OK", "QPResult", "kkt_residual", "qp_solve_box",
    "DisturbanceSchedule", "RtiWorkspace", "merit", "rti_step", "shift_workspace", "build_schedule",
    "resample_zoh", "HoverThrottleEstimator", "throttle_to_thrust", "thrust_to_throttle",
]

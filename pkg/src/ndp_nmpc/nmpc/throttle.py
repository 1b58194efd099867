"""Collective thrust to normalised throttle, with a hover-throttle estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..quad_core import DEFAULT_PARAMS, QuadParams


def thrust_to_throttle(fc, theta_hover, params: QuadParams = DEFAULT_PARAMS):
    """Throttle in [0, 1] assuming thrust scales linearly with throttle through the hover point."""
    if not theta_hover > 0:
        raise ValueError("hover throttle must be positive")
    return np.clip(np.asarray(fc, dtype=float) * theta_hover / params.weight, 0.0, 1.0)


def throttle_to_thrust(throttle, theta_hover, params: QuadParams = DEFAULT_PARAMS):
    """Inverse map used by the simulated vehicle."""
    return np.asarray(throttle, dtype=float) * params.weight / theta_hover


@dataclass
class HoverThrottleEstimator:
    """Scalar extended Kalman filter on the hover throttle.

    Measurement model: vertical specific force ``a_z + g = throttle * g * c / theta``
    with ``c`` the cosine of the tilt.
    """

    theta: float = 0.5
    P: float = 0.01
    q: float = 1e-7
    r: float = 0.25
    g: float = DEFAULT_PARAMS.g

    def update(self, throttle, acc_z, tilt_cos=1.0):
        self.P += self.q
        if throttle <= 1e-3 or tilt_cos <= 0.1:
            return self.theta
        k = throttle * self.g * tilt_cos
        pred = k / self.theta
        H = -k / self.theta**2
        S = H * self.P * H + self.r
        K = self.P * H / S
        self.theta = float(np.clip(self.theta + K * (acc_z + self.g - pred), 0.05, 1.0))
        self.P = (1.0 - K * H) * self.P
        return self.theta

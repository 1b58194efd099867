"""Batched rigid-body plant and a cascaded position controller.

The plant integrates several vehicles at once: body-rate commands pass
through the inner rate loop, the resulting wrench is allocated to rotor
speeds, and the full 13-state model is stepped with RK4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quad_core import (DEFAULT_PARAMS, P, Q, V, W, QuadParams, _rot_unchecked,
                        allocate_motors, body_rate_inner_loop, dynamics_full, rk4_step)


class SimulationDiverged(RuntimeError):
    pass


@dataclass
class Plant:
    params: QuadParams = DEFAULT_PARAMS
    dt: float = 1.0 / 600.0
    kp_rate: float = 20.0

    def step(self, X, fc, w_cmd, f_dist):
        """Advance all vehicles by one substep; returns ``(X, motors, saturated)``."""
        tau = body_rate_inner_loop(w_cmd, X[..., W], self.params, self.kp_rate)
        wrench = np.concatenate([np.asarray(fc, dtype=float)[..., None], tau], axis=-1)
        motors, sat = allocate_motors(wrench, self.params)
        X = rk4_step(dynamics_full, X, motors, self.dt, f_dist, self.params)
        if not np.all(np.isfinite(X)):
            raise SimulationDiverged("plant state became non-finite")
        return X, motors, sat


@dataclass
class PositionGains:
    kp: float = 6.0
    kd: float = 4.5
    k_att: float = 8.0
    w_max: float = 3.0
    tilt_max: float = 0.6


def position_controller(X, p_ref, v_ref, a_ref, psi_ref, params: QuadParams = DEFAULT_PARAMS,
                        gains: PositionGains = PositionGains()):
    """PD position loop with geometric attitude loop; returns ``(fc, w_cmd)`` per vehicle."""
    p, v, q = X[..., P], X[..., V], X[..., Q]
    a_des = a_ref + gains.kp * (p_ref - p) + gains.kd * (v_ref - v)
    thrust = params.m * (a_des + np.array([0.0, 0.0, params.g]))
    # limit tilt so the thrust vector stays near vertical
    horiz = np.linalg.norm(thrust[..., :2], axis=-1)
    lim = np.tan(gains.tilt_max) * np.maximum(thrust[..., 2], 0.1 * params.weight)
    shrink = np.where(horiz > lim, lim / np.maximum(horiz, 1e-12), 1.0)
    thrust[..., :2] *= shrink[..., None]
    thrust[..., 2] = np.maximum(thrust[..., 2], 0.1 * params.weight)

    R = _rot_unchecked(q)
    fc = np.einsum("...i,...i->...", thrust, R[..., :, 2])
    b3 = thrust / np.linalg.norm(thrust, axis=-1, keepdims=True)
    xc = np.stack([np.cos(psi_ref), np.sin(psi_ref), np.zeros_like(psi_ref)], axis=-1)
    b2 = np.cross(b3, xc)
    b2 /= np.linalg.norm(b2, axis=-1, keepdims=True)
    b1 = np.cross(b2, b3)
    Rd = np.stack([b1, b2, b3], axis=-1)
    E = np.swapaxes(Rd, -1, -2) @ R - np.swapaxes(R, -1, -2) @ Rd
    e_R = 0.5 * np.stack([E[..., 2, 1], E[..., 0, 2], E[..., 1, 0]], axis=-1)
    w_cmd = np.clip(-gains.k_att * e_R, -gains.w_max, gains.w_max)
    return np.clip(fc, 0.0, params.fc_max), w_cmd

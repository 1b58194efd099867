"""Quaternion algebra and nominal quadrotor dynamics.

Conventions: ENU inertial frame, FLU body frame, Hamilton quaternions stored
as ``(w, x, y, z)`` and rotating body vectors into the inertial frame.

State layouts (all functions broadcast over leading batch axes):

* full plant state, 13 entries: ``p[0:3], v[3:6], q[6:10], w_body[10:13]``
* reduced NMPC state, 10 entries: ``p[0:3], v[3:6], q[6:10]``

Rotor speeds are in kRPM. A wrench is the 4-vector ``[fc, tau_x, tau_y, tau_z]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

P = slice(0, 3)
V = slice(3, 6)
Q = slice(6, 10)
W = slice(10, 13)


@dataclass(frozen=True)
class QuadParams:
    """Identified physical parameters of the quadrotor."""

    m: float = 1.5344
    g: float = 9.81
    Ixx: float = 0.0094
    Iyy: float = 0.0134
    Izz: float = 0.0145
    kt: float = 2.8158e-2
    kq: float = 3.7611e-4
    L: float = 0.1372
    alpha: float = math.radians(45.0)
    omega_rotor_min: float = 2.6
    omega_rotor_max: float = 24.0

    def __post_init__(self):
        for name in ("m", "g", "Ixx", "Iyy", "Izz", "kt", "kq", "L", "omega_rotor_min", "omega_rotor_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"QuadParams.{name} must be strictly positive")
        if not 0 < self.alpha < math.pi / 2:
            raise ValueError("QuadParams.alpha must lie in (0, pi/2)")
        if not self.omega_rotor_min < self.omega_rotor_max:
            raise ValueError("omega_rotor_min must be below omega_rotor_max")

    @property
    def inertia(self) -> np.ndarray:
        return np.array([self.Ixx, self.Iyy, self.Izz])

    @property
    def weight(self) -> float:
        return self.m * self.g

    @property
    def fc_max(self) -> float:
        return 4.0 * self.kt * self.omega_rotor_max**2

    @property
    def allocation_matrix(self) -> np.ndarray:
        ls = self.L * math.sin(self.alpha)
        lc = self.L * math.cos(self.alpha)
        k = self.kq / self.kt
        return np.array([
            [1.0, 1.0, 1.0, 1.0],
            [-ls, ls, ls, -ls],
            [-lc, lc, -lc, lc],
            [-k, -k, k, k],
        ])


DEFAULT_PARAMS = QuadParams()


# ---------------------------------------------------------------------------
# quaternions

def quat_multiply(q1, q2):
    """Hamilton product ``q1 o q2``."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    out = np.empty(np.broadcast_shapes(q1.shape, q2.shape))
    out[..., 0] = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    out[..., 1] = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
    out[..., 2] = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
    out[..., 3] = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    return out


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_to_rot(q, tol=1e-6):
    """Rotation matrix of a unit quaternion; rejects inputs off the unit sphere."""
    q = np.asarray(q, dtype=float)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > tol):
        raise ValueError("quat_to_rot expects a unit quaternion")
    return _rot_unchecked(q)


def _rot_unchecked(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack([
        1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y,
        2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x,
        2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y,
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def rot_to_quat(R):
    """Unit quaternion (w >= 0) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    i = int(np.argmax(np.concatenate([[tr], diag])))
    if i == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_error_vec(q, q_ref):
    """Sign-corrected vector part of ``q o q_ref^-1``.

    The sign of the scalar part selects the short rotation, so ``q`` and
    ``-q`` give the same error. A zero scalar part counts as positive.
    """
    qe = quat_multiply(q, quat_conjugate(q_ref))
    sign = np.where(qe[..., 0] >= 0.0, 1.0, -1.0)
    return sign[..., None] * qe[..., 1:]


def rotate_body_z(q):
    """Third column of R(q): the body z-axis in the inertial frame."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3,))
    out[..., 0] = 2 * (x * z + w * y)
    out[..., 1] = 2 * (y * z - w * x)
    out[..., 2] = 1 - 2 * x * x - 2 * y * y
    return out


def cross3(a, b):
    """``np.cross`` for trailing 3-vectors without its per-call overhead."""
    out = np.empty(np.broadcast_shapes(np.shape(a), np.shape(b)))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


# ---------------------------------------------------------------------------
# rotors and allocation

def rotor_wrench(motors, params: QuadParams = DEFAULT_PARAMS):
    """Wrench ``[fc, tau_x, tau_y, tau_z]`` produced by four rotor speeds."""
    f = params.kt * np.square(np.asarray(motors, dtype=float))
    return f @ params.allocation_matrix.T


def allocate_motors(wrench, params: QuadParams = DEFAULT_PARAMS):
    """Invert the allocation matrix, clamping per-rotor thrust to the speed limits.

    Returns ``(omega, saturated)``; ``saturated`` is True when any rotor hit a limit.
    """
    wrench = np.asarray(wrench, dtype=float)
    f = wrench @ _g_inv(params).T
    f_lo = params.kt * params.omega_rotor_min**2
    f_hi = params.kt * params.omega_rotor_max**2
    saturated = np.any((f < f_lo) | (f > f_hi), axis=-1)
    f = np.clip(f, f_lo, f_hi)
    return np.sqrt(f / params.kt), saturated


@lru_cache(maxsize=16)
def _g_inv(params):
    return np.linalg.inv(params.allocation_matrix)


def hover_speed(params: QuadParams = DEFAULT_PARAMS) -> float:
    return math.sqrt(params.weight / (4.0 * params.kt))


# ---------------------------------------------------------------------------
# dynamics

def _quat_rate(q, w_body):
    # 0.5 * q o (0, w)
    wx, wy, wz = w_body[..., 0], w_body[..., 1], w_body[..., 2]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(np.broadcast_shapes(q.shape[:-1], w_body.shape[:-1]) + (4,))
    out[..., 0] = -qx * wx - qy * wy - qz * wz
    out[..., 1] = qw * wx + qy * wz - qz * wy
    out[..., 2] = qw * wy - qx * wz + qz * wx
    out[..., 3] = qw * wz + qx * wy - qy * wx
    return 0.5 * out


def dynamics_full(x, motors, f_dist, params: QuadParams = DEFAULT_PARAMS):
    """Time derivative of the 13-entry plant state driven by rotor speeds."""
    x = np.asarray(x, dtype=float)
    wrench = rotor_wrench(motors, params)
    return dynamics_wrench(x, wrench, f_dist, params)


def dynamics_wrench(x, wrench, f_dist, params: QuadParams = DEFAULT_PARAMS):
    """Same as :func:`dynamics_full` but driven by a wrench directly."""
    x = np.asarray(x, dtype=float)
    wrench = np.asarray(wrench, dtype=float)
    q = x[..., Q]
    w = x[..., W]
    inertia = params.inertia
    acc = (rotate_body_z(q) * wrench[..., :1] + f_dist) / params.m
    acc = acc + np.array([0.0, 0.0, -params.g])
    wdot = (wrench[..., 1:] - cross3(w, inertia * w)) / inertia
    return np.concatenate([x[..., V], acc, _quat_rate(q, w), wdot], axis=-1)


def dynamics_reduced(x, u, f_dist, params: QuadParams = DEFAULT_PARAMS):
    """Time derivative of the 10-entry NMPC state; ``u = [fc, wx, wy, wz]``.

    The body rate is taken straight from the command (ideal inner loop).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q = x[..., Q]
    acc = (rotate_body_z(q) * u[..., :1] + f_dist) / params.m
    acc = acc + np.array([0.0, 0.0, -params.g])
    return np.concatenate([x[..., V], acc, _quat_rate(q, u[..., 1:])], axis=-1)


def rk4_step(f, x, u, dt, *args):
    """One classical Runge-Kutta step of ``xdot = f(x, u, *args)``.

    The quaternion block (entries 6:10) is renormalized afterwards.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = f(x, u, *args)
    k2 = f(x + 0.5 * dt * k1, u, *args)
    k3 = f(x + 0.5 * dt * k2, u, *args)
    k4 = f(x + dt * k3, u, *args)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., Q] = quat_normalize(out[..., Q])
    return out


def body_rate_inner_loop(w_cmd, w_meas, params: QuadParams = DEFAULT_PARAMS, kp=20.0):
    """Feedback-linearizing body-rate P loop; returns body torques."""
    w_meas = np.asarray(w_meas, dtype=float)
    inertia = params.inertia
    err = np.asarray(w_cmd, dtype=float) - w_meas
    return inertia * kp * err + cross3(w_meas, inertia * w_meas)


def hover_state13(p=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(13)
    x[P] = p
    x[6] = 1.0
    return x

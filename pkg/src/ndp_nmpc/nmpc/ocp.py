"""Optimal control problem pieces: weights, residuals, shooting defects and their Jacobians.

States on the shooting grid are the reduced ``[p, v, q]`` (10 entries) and
inputs are ``[fc, wx, wy, wz]``. Every function here is batched over the
node axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..quad_core import DEFAULT_PARAMS, QuadParams, quat_conjugate, quat_multiply, rotate_body_z

NX, NU, NR = 10, 4, 9
INPUT_REFS = ("hover", "compensating")


@dataclass(frozen=True)
class OcpConfig:
    N: int = 20
    dt_shoot: float = 0.1
    dt_ctrl: float = 1.0 / 60.0
    Qp_xy: float = 300.0
    Qp_z: float = 400.0
    Qv: float = 1.0
    Qq: float = 0.1
    Rw: float = 10.0
    Rfc: float = 10.0
    terminal_scale: float = 1.0
    fc_min: float = 0.0
    fc_max: float | None = None
    w_max: float = 3.0
    damping: float = 1e-8
    qp_max_iter: int = 400
    input_ref: str = "compensating"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not (self.dt_shoot > 0 and self.dt_ctrl > 0):
            raise ValueError("time steps must be positive")
        weights = (self.Qp_xy, self.Qp_z, self.Qv, self.Qq, self.Rw, self.Rfc, self.terminal_scale)
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise ValueError("weights must be finite and non-negative")
        if not any(w > 0 for w in weights[:6]):
            raise ValueError("at least one weight must be positive")
        if self.fc_max is not None and self.fc_max <= self.fc_min:
            raise ValueError("fc bounds must be ordered")
        if not self.w_max > 0:
            raise ValueError("w_max must be positive")
        if self.input_ref not in INPUT_REFS:
            raise ValueError(f"input_ref must be one of {INPUT_REFS}")

    def state_weights(self):
        return np.array([self.Qp_xy, self.Qp_xy, self.Qp_z] + [self.Qv] * 3 + [self.Qq] * 3)

    def input_weights(self):
        return np.array([self.Rfc, self.Rw, self.Rw, self.Rw])

    def bounds(self, params: QuadParams = DEFAULT_PARAMS):
        fc_max = params.fc_max if self.fc_max is None else self.fc_max
        lo = np.array([self.fc_min, -self.w_max, -self.w_max, -self.w_max])
        hi = np.array([fc_max, self.w_max, self.w_max, self.w_max])
        return lo, hi


def hover_input(params: QuadParams = DEFAULT_PARAMS):
    return np.array([params.weight, 0.0, 0.0, 0.0])


def input_reference(refs, schedule, cfg: OcpConfig, params: QuadParams = DEFAULT_PARAMS):
    """Reference inputs ``u_r`` for nodes ``0..N-1``.

    ``hover`` uses ``(mg, 0, 0, 0)`` everywhere. ``compensating`` uses the
    thrust that realises the reference acceleration under the scheduled
    disturbance, ``|fc_ff z_B(q_r) - f_d|``, with zero body rates; for a
    hover reference and zero schedule both coincide.
    """
    N = cfg.N
    Ur = np.tile(hover_input(params), (N, 1))
    if cfg.input_ref == "hover" or not hasattr(refs, "fc_ff"):
        return Ur
    fd = np.zeros((N + 1, 3)) if schedule is None else np.asarray(getattr(schedule, "f_d", schedule), dtype=float)
    force = rotate_body_z(refs.q[:N]) * np.asarray(refs.fc_ff, dtype=float)[:N, None] - fd[:N]
    Ur[:, 0] = np.linalg.norm(force, axis=1)
    return Ur


# ---------------------------------------------------------------------------
# residuals

def _right_mult(r):
    """Matrices ``M(r)`` with ``p o r = M(r) p``; batched over leading axes."""
    r0, r1, r2, r3 = np.moveaxis(r, -1, 0)
    rows = [
        [r0, -r1, -r2, -r3],
        [r1, r0, r3, -r2],
        [r2, -r3, r0, r1],
        [r3, r2, -r1, r0],
    ]
    return np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)


def _node_weights(cfg: OcpConfig):
    Wx = np.tile(cfg.state_weights(), (cfg.N + 1, 1))
    Wx[-1] *= cfg.terminal_scale
    return np.sqrt(Wx), np.sqrt(cfg.input_weights())


def build_residuals(X, U, refs, cfg: OcpConfig, params: QuadParams = DEFAULT_PARAMS, jacobians=False,
                    schedule=None):
    """Weighted residual vector; cost is half its squared norm.

    Node ``k < N`` contributes ``[p - p_r, v - v_r, att_err, u - u_r]`` and
    the terminal node the state part only. With ``jacobians`` also returns
    the per-node state Jacobians ``(N+1, 9, 10)`` and the diagonal input
    weights (the input part is linear with constant slope). The input
    reference comes from :func:`input_reference`, which needs ``schedule``
    in compensating mode.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    Xr = refs.x if hasattr(refs, "x") else np.asarray(refs, dtype=float)
    sx, su = _node_weights(cfg)
    qe = quat_multiply(X[:, 6:10], quat_conjugate(Xr[:, 6:10]))
    sign = np.where(qe[:, 0] >= 0.0, 1.0, -1.0)
    rx = np.concatenate([X[:, :6] - Xr[:, :6], sign[:, None] * qe[:, 1:]], axis=1) * sx
    ru = (U - input_reference(refs, schedule, cfg, params)) * su
    r = np.concatenate([rx.ravel(), ru.ravel()])
    if not jacobians:
        return r
    n = len(X)
    Jx = np.zeros((n, NR, NX))
    Jx[:, np.arange(6), np.arange(6)] = 1.0
    Jx[:, 6:9, 6:10] = sign[:, None, None] * _right_mult(quat_conjugate(Xr[:, 6:10]))[:, 1:, :]
    Jx *= sx[:, :, None]
    return r, Jx, su


def cost(X, U, refs, cfg: OcpConfig, params: QuadParams = DEFAULT_PARAMS, schedule=None) -> float:
    r = build_residuals(X, U, refs, cfg, params, schedule=schedule)
    return 0.5 * float(r @ r)


# ---------------------------------------------------------------------------
# dynamics and Jacobians

def _f(x, u, fd, params):
    q = x[..., 6:10]
    acc = (rotate_body_z(q) * u[..., :1] + fd) / params.m
    acc[..., 2] -= params.g
    wx, wy, wz = np.moveaxis(u[..., 1:], -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    qdot = 0.5 * np.stack([
        -qx * wx - qy * wy - qz * wz,
        qw * wx + qy * wz - qz * wy,
        qw * wy - qx * wz + qz * wx,
        qw * wz + qx * wy - qy * wx,
    ], axis=-1)
    return np.concatenate([x[..., 3:6], acc, qdot], axis=-1)


def _f_jac(x, u, params):
    """Continuous-time Jacobians ``(df/dx, df/du)`` batched over the first axis."""
    n = len(x)
    qw, qx, qy, qz = x[:, 6], x[:, 7], x[:, 8], x[:, 9]
    fc = u[:, 0]
    wx, wy, wz = u[:, 1], u[:, 2], u[:, 3]
    A = np.zeros((n, NX, NX))
    A[:, 0:3, 3:6] = np.eye(3)
    dz = np.stack([
        np.stack([2 * qy, 2 * qz, 2 * qw, 2 * qx], axis=-1),
        np.stack([-2 * qx, -2 * qw, 2 * qz, 2 * qy], axis=-1),
        np.stack([np.zeros(n), -4 * qx, -4 * qy, np.zeros(n)], axis=-1),
    ], axis=-2)
    A[:, 3:6, 6:10] = dz * (fc / params.m)[:, None, None]
    z = np.zeros(n)
    A[:, 6:10, 6:10] = 0.5 * np.stack([
        np.stack([z, -wx, -wy, -wz], axis=-1),
        np.stack([wx, z, wz, -wy], axis=-1),
        np.stack([wy, -wz, z, wx], axis=-1),
        np.stack([wz, wy, -wx, z], axis=-1),
    ], axis=-2)
    B = np.zeros((n, NX, NU))
    B[:, 3:6, 0] = rotate_body_z(x[:, 6:10]) / params.m
    B[:, 6:10, 1:4] = 0.5 * np.stack([
        np.stack([-qx, -qy, -qz], axis=-1),
        np.stack([qw, -qz, qy], axis=-1),
        np.stack([qz, qw, -qx], axis=-1),
        np.stack([-qy, qx, qw], axis=-1),
    ], axis=-2)
    return A, B


def rk4_discrete(X, U, F_d, dt, params: QuadParams = DEFAULT_PARAMS, jacobians=False):
    """RK4 step of the reduced model at every node, quaternion renormalised.

    With ``jacobians`` also returns ``A = dx+/dx`` ``(n, 10, 10)`` and
    ``B = dx+/du`` ``(n, 10, 4)`` including the renormalisation.
    """
    x1 = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    F_d = np.broadcast_to(np.asarray(F_d, dtype=float), x1[:, :3].shape)
    k1 = _f(x1, U, F_d, params)
    x2 = x1 + 0.5 * dt * k1
    k2 = _f(x2, U, F_d, params)
    x3 = x1 + 0.5 * dt * k2
    k3 = _f(x3, U, F_d, params)
    x4 = x1 + dt * k3
    k4 = _f(x4, U, F_d, params)
    raw = x1 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    qn = np.linalg.norm(raw[:, 6:10], axis=1)
    out = raw.copy()
    out[:, 6:10] /= qn[:, None]
    if not jacobians:
        return out

    n = len(x1)
    eye = np.broadcast_to(np.eye(NX), (n, NX, NX))
    A1, B1 = _f_jac(x1, U, params)
    A2, B2 = _f_jac(x2, U, params)
    A3, B3 = _f_jac(x3, U, params)
    A4, B4 = _f_jac(x4, U, params)
    dk1x = A1
    dk1u = B1
    dk2x = A2 @ (eye + 0.5 * dt * dk1x)
    dk2u = A2 @ (0.5 * dt * dk1u) + B2
    dk3x = A3 @ (eye + 0.5 * dt * dk2x)
    dk3u = A3 @ (0.5 * dt * dk2u) + B3
    dk4x = A4 @ (eye + dt * dk3x)
    dk4u = A4 @ (dt * dk3u) + B4
    Jx = eye + dt / 6.0 * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
    Ju = dt / 6.0 * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
    # d(q/|q|)/dq = (I - n n') / |q|
    nq = out[:, 6:10]
    P = (np.eye(4) - nq[:, :, None] * nq[:, None, :]) / qn[:, None, None]
    Jx[:, 6:10, :] = P @ Jx[:, 6:10, :]
    Ju[:, 6:10, :] = P @ Ju[:, 6:10, :]
    return out, Jx, Ju


def shooting_defects(X, U, schedule, cfg: OcpConfig, params: QuadParams = DEFAULT_PARAMS):
    """``rk4(x_k, u_k, f_d,k) - x_{k+1}`` for ``k = 0..N-1`` as an ``(N, 10)`` array."""
    X = np.asarray(X, dtype=float)
    fd = np.asarray(getattr(schedule, "f_d", schedule), dtype=float)
    return rk4_discrete(X[:-1], U, fd[:-1], cfg.dt_shoot, params) - X[1:]

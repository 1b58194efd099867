"""Minimum-snap trajectories through waypoints and flatness-based references.

Position axes use order-7 polynomials per segment and minimise the integrated
squared snap; yaw uses cubics and minimises integrated squared acceleration.
Each segment is solved on normalised time ``tau = (t - t_i) / T_i`` so the KKT
system stays well conditioned for long segments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import factorial

import numpy as np

from .quad_core import DEFAULT_PARAMS, QuadParams, cross3, rot_to_quat

N_COEF = 8
POS_ORDER, POS_OBJ, POS_CONT, POS_BOUNDARY = 7, 4, 4, 3
YAW_ORDER, YAW_OBJ, YAW_CONT, YAW_BOUNDARY = 3, 2, 2, 1


class TrajectoryError(ValueError):
    pass


class FlatnessError(ValueError):
    pass


@dataclass(frozen=True)
class Waypoint:
    p: tuple
    psi: float = 0.0


@dataclass(frozen=True)
class FullStateRef:
    """Full-state reference; fields may carry a leading node axis."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    fc_ff: np.ndarray

    def __len__(self):
        return 1 if np.ndim(self.fc_ff) == 0 else len(self.fc_ff)

    def __getitem__(self, k):
        return FullStateRef(self.p[k], self.v[k], self.q[k], self.fc_ff[k])

    @property
    def x(self) -> np.ndarray:
        """Stacked reduced state ``[p, v, q]``."""
        return np.concatenate([self.p, self.v, self.q], axis=-1)


def _as_arrays(waypoints):
    pts = []
    for w in waypoints:
        if isinstance(w, Waypoint):
            pts.append([*w.p, w.psi])
        else:
            pts.append(list(w))
    arr = np.asarray(pts, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise TrajectoryError("waypoints must be rows of (x, y, z, psi)")
    if not np.all(np.isfinite(arr)):
        raise TrajectoryError("waypoints must be finite")
    return arr


def allocate_times(waypoints, v_avg):
    """Cumulative knot times from segment length over the average speed."""
    wp = _as_arrays(waypoints)
    if len(wp) < 2:
        raise TrajectoryError("need at least two waypoints")
    if not v_avg > 0:
        raise TrajectoryError("v_avg must be positive")
    dist = np.linalg.norm(np.diff(wp[:, :3], axis=0), axis=1)
    if np.any(dist <= 1e-9):
        raise TrajectoryError("consecutive waypoints coincide")
    return np.concatenate([[0.0], np.cumsum(dist / v_avg)])


# ---------------------------------------------------------------------------
# polynomial helpers (ascending coefficients on tau in [0, 1])

def _deriv_factors(n, k):
    """Row of d^k/dtau^k multipliers for powers 0..n-1."""
    out = np.zeros(n)
    for j in range(k, n):
        out[j] = factorial(j) / factorial(j - k)
    return out


def _basis_row(n, k, tau):
    f = _deriv_factors(n, k)
    powers = np.array([tau ** (j - k) if j >= k else 0.0 for j in range(n)])
    return f * powers


def _cost_block(n, r):
    """int_0^1 (d^r p / dtau^r)^2 dtau as a quadratic form in the coefficients."""
    a = _deriv_factors(n, r)
    Qb = np.zeros((n, n))
    for i in range(r, n):
        for j in range(r, n):
            Qb[i, j] = a[i] * a[j] / (i + j - 2 * r + 1)
    return Qb


def axis_qp(values, durations, order=POS_ORDER, obj=POS_OBJ, cont=POS_CONT, boundary=POS_BOUNDARY):
    """Equality-constrained QP ``min c'Qc s.t. Ac = b`` for one flat output.

    ``c`` stacks per-segment normalised-time coefficients. Q is in physical
    units, i.e. ``c'Qc`` equals the integral over real time.
    """
    values = np.asarray(values, dtype=float)
    T = np.asarray(durations, dtype=float)
    M = len(T)
    n = order + 1
    Qb = _cost_block(n, obj)
    Q = np.zeros((n * M, n * M))
    for i in range(M):
        Q[i * n:(i + 1) * n, i * n:(i + 1) * n] = Qb * T[i] ** (1 - 2 * obj)

    rows, rhs = [], []

    def add(entries, val):
        row = np.zeros(n * M)
        for seg, vec in entries:
            row[seg * n:(seg + 1) * n] += vec
        rows.append(row)
        rhs.append(val)

    for i in range(M):
        add([(i, _basis_row(n, 0, 0.0))], values[i])
        add([(i, _basis_row(n, 0, 1.0))], values[i + 1])
    for k in range(1, boundary + 1):
        add([(0, _basis_row(n, k, 0.0))], 0.0)
        add([(M - 1, _basis_row(n, k, 1.0))], 0.0)
    for i in range(M - 1):
        scale = min(T[i], T[i + 1])
        for k in range(1, cont + 1):
            add([(i, _basis_row(n, k, 1.0) * (scale / T[i]) ** k),
                 (i + 1, -_basis_row(n, k, 0.0) * (scale / T[i + 1]) ** k)], 0.0)
    A = np.array(rows)
    b = np.array(rhs)
    norm = np.abs(A).max(axis=1)
    return Q, A / norm[:, None], b / norm


def _solve_kkt(Q, A, b):
    nv = Q.shape[0]
    nc = A.shape[0]
    qs = np.abs(Q).max()
    qs = qs if qs > 0 else 1.0
    K = np.zeros((nv + nc, nv + nc))
    K[:nv, :nv] = Q / qs
    K[:nv, nv:] = A.T
    K[nv:, :nv] = A
    rhs = np.concatenate([np.zeros(nv), b])
    if np.linalg.matrix_rank(A) < nc:
        raise TrajectoryError("singular KKT system (dependent constraints)")
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise TrajectoryError("singular KKT system (degenerate timing)") from exc
    c = sol[:nv]
    if not np.all(np.isfinite(c)) or np.abs(A @ c - b).max() > 1e-8 * max(1.0, np.abs(b).max()):
        raise TrajectoryError("KKT solve failed to satisfy the constraints")
    return c


@dataclass(frozen=True)
class PiecewiseTrajectory:
    """Per-axis polynomial segments; ``coeffs[axis, seg]`` on normalised time.

    Axes are ``x, y, z, psi``; yaw coefficients above degree 3 are zero.
    """

    knots: np.ndarray
    coeffs: np.ndarray

    @property
    def duration(self) -> float:
        return float(self.knots[-1])

    @property
    def n_segments(self) -> int:
        return len(self.knots) - 1

    def eval(self, t, deriv_order=0):
        """Derivative ``deriv_order`` of ``(x, y, z, psi)`` at time(s) ``t``.

        Outside ``[0, T]`` the end states are held with zero derivatives.
        """
        if not 0 <= deriv_order <= 4:
            raise ValueError("deriv_order must be in 0..4")
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        T_end = self.duration
        outside = (t > T_end) | (t < 0.0)
        tc = np.clip(t, 0.0, T_end)
        seg = np.clip(np.searchsorted(self.knots, tc, side="right") - 1, 0, self.n_segments - 1)
        dur = self.knots[seg + 1] - self.knots[seg]
        tau = (tc - self.knots[seg]) / dur
        c = self.coeffs[:, seg, :]  # (4, len(t), 8)
        f = _deriv_factors(N_COEF, deriv_order)
        acc = np.zeros(c.shape[:2])
        for j in range(N_COEF - 1, deriv_order - 1, -1):
            acc = acc * tau + c[..., j] * f[j]
        out = (acc / dur**deriv_order).T
        if deriv_order > 0:
            out[outside] = 0.0
        return out[0] if scalar else out

    def objective(self, axis):
        """Integrated squared snap (positions) or squared yaw acceleration."""
        dur = np.diff(self.knots)
        if axis < 3:
            n, r = POS_ORDER + 1, POS_OBJ
        else:
            n, r = YAW_ORDER + 1, YAW_OBJ
        Qb = _cost_block(n, r)
        total = 0.0
        for i, T in enumerate(dur):
            c = self.coeffs[axis, i, :n]
            total += c @ Qb @ c * T ** (1 - 2 * r)
        return float(total)


def min_snap(waypoints, knots) -> PiecewiseTrajectory:
    """Rest-to-rest minimum-snap position and minimum-acceleration yaw through waypoints."""
    wp = _as_arrays(waypoints)
    knots = np.asarray(knots, dtype=float)
    if len(knots) != len(wp):
        raise TrajectoryError("need one knot per waypoint")
    dur = np.diff(knots)
    if np.any(~np.isfinite(dur)) or np.any(dur <= 0):
        raise TrajectoryError("knots must be strictly increasing")
    M = len(dur)
    coeffs = np.zeros((4, M, N_COEF))
    for axis in range(3):
        Q, A, b = axis_qp(wp[:, axis], dur)
        coeffs[axis] = _solve_kkt(Q, A, b).reshape(M, POS_ORDER + 1)
    Q, A, b = axis_qp(wp[:, 3], dur, YAW_ORDER, YAW_OBJ, YAW_CONT, YAW_BOUNDARY)
    coeffs[3, :, :YAW_ORDER + 1] = _solve_kkt(Q, A, b).reshape(M, YAW_ORDER + 1)
    return PiecewiseTrajectory(knots - knots[0], coeffs)


def generate(waypoints, v_avg) -> PiecewiseTrajectory:
    return min_snap(waypoints, allocate_times(waypoints, v_avg))


def concatenate(trajs) -> PiecewiseTrajectory:
    """Chain rest-to-rest trajectories end to end in time."""
    knots = [np.asarray([0.0])]
    offset = 0.0
    for tr in trajs:
        knots.append(tr.knots[1:] + offset)
        offset += tr.duration
    coeffs = np.concatenate([tr.coeffs for tr in trajs], axis=1)
    return PiecewiseTrajectory(np.concatenate(knots), coeffs)


# ---------------------------------------------------------------------------
# differential flatness

def flat_to_state(p, v, a, psi, params: QuadParams = DEFAULT_PARAMS) -> FullStateRef:
    """Attitude and feed-forward thrust that realise acceleration ``a`` with yaw ``psi``."""
    a = np.asarray(a, dtype=float)
    thrust = a + np.array([0.0, 0.0, params.g])
    norm = np.linalg.norm(thrust)
    if norm <= 0.1 * params.g:
        raise FlatnessError("thrust direction undefined near free fall")
    zb = thrust / norm
    xc = np.array([np.cos(psi), np.sin(psi), 0.0])
    yb = np.cross(zb, xc)
    ny = np.linalg.norm(yb)
    if ny < 1e-9:
        raise FlatnessError("yaw direction parallel to thrust axis")
    yb /= ny
    xb = np.cross(yb, zb)
    q = rot_to_quat(np.column_stack([xb, yb, zb]))
    return FullStateRef(np.asarray(p, dtype=float), np.asarray(v, dtype=float), q,
                        np.asarray(params.m * norm))


def serve_reference(traj: PiecewiseTrajectory, t_now, N, dt_shoot,
                    params: QuadParams = DEFAULT_PARAMS) -> FullStateRef:
    """References at ``t_now + k * dt_shoot`` for ``k = 0..N`` as a stacked FullStateRef."""
    if N < 1:
        raise ValueError("N must be at least 1")
    t = t_now + dt_shoot * np.arange(N + 1)
    pos = traj.eval(t, 0)
    vel = traj.eval(t, 1)
    acc = traj.eval(t, 2)
    qs, fc = _flat_batch(acc[:, :3], pos[:, 3], params)
    for k in range(1, N + 1):
        if qs[k] @ qs[k - 1] < 0:
            qs[k] = -qs[k]
    return FullStateRef(pos[:, :3], vel[:, :3], qs, fc)


def _flat_batch(a, psi, params):
    """Row-wise :func:`flat_to_state` attitude and thrust, quaternions with ``w >= 0``."""
    thrust = a + np.array([0.0, 0.0, params.g])
    norm = np.linalg.norm(thrust, axis=1)
    if np.any(norm <= 0.1 * params.g):
        raise FlatnessError("thrust direction undefined near free fall")
    zb = thrust / norm[:, None]
    xc = np.column_stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)])
    yb = cross3(zb, xc)
    ny = np.linalg.norm(yb, axis=1)
    if np.any(ny < 1e-9):
        raise FlatnessError("yaw direction parallel to thrust axis")
    yb /= ny[:, None]
    xb = cross3(yb, zb)
    R = np.stack([xb, yb, zb], axis=-1)
    return _rot_to_quat_batch(R), params.m * norm


def _rot_to_quat_batch(R):
    # Shepperd's method per row, choosing the largest of trace and diagonal
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    choice = np.argmax(np.column_stack([tr, R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]]), axis=1)
    q = np.empty((len(R), 4))
    for c in range(4):
        m = choice == c
        if not np.any(m):
            continue
        r = R[m]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m] = np.column_stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s, (r[:, 0, 2] - r[:, 2, 0]) / s,
                                    (r[:, 1, 0] - r[:, 0, 1]) / s])
        elif c == 1:
            s = 2.0 * np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2])
            q[m] = np.column_stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                                    (r[:, 0, 2] + r[:, 2, 0]) / s])
        elif c == 2:
            s = 2.0 * np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2])
            q[m] = np.column_stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s, 0.25 * s,
                                    (r[:, 1, 2] + r[:, 2, 1]) / s])
        else:
            s = 2.0 * np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1])
            q[m] = np.column_stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s,
                                    (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s])
    q[q[:, 0] < 0] *= -1
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# CSV interfaces

def read_waypoints(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["x", "y", "z", "psi"]:
            raise TrajectoryError("waypoint CSV header must be x,y,z,psi")
        rows = [[float(r[k]) for k in ("x", "y", "z", "psi")] for r in reader]
    return np.asarray(rows)


def export_csv(traj: PiecewiseTrajectory, path, dt):
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(np.floor(traj.duration / dt + 1e-9)) + 1
    t = dt * np.arange(n)
    pos, vel, acc = traj.eval(t, 0), traj.eval(t, 1), traj.eval(t, 2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "psi", "vx", "vy", "vz", "ax", "ay", "az"])
        for i in range(n):
            w.writerow([f"{t[i]:.9g}"] + [f"{val:.12g}" for val in
                       (*pos[i], *vel[i, :3], *acc[i, :3])])
    return n

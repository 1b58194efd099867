"""Real-time iteration: one Gauss-Newton SQP step per control period.

The shooting problem is linearised at the warm-start guess, the state
deviations are eliminated through the linearised dynamics (condensing), and
the remaining box-constrained QP in the input increments is solved with the
active-set solver. The working set is carried across calls.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..quad_core import DEFAULT_PARAMS, QuadParams
from .ocp import NR, NU, NX, OcpConfig, build_residuals, hover_input, rk4_discrete, shooting_defects
from .qp import QP_OK, kkt_residual, qp_solve_box


@dataclass
class DisturbanceSchedule:
    """Predicted inertial disturbance force at every shooting node."""

    f_d: np.ndarray

    def __post_init__(self):
        self.f_d = np.asarray(self.f_d, dtype=float)
        if self.f_d.ndim != 2 or self.f_d.shape[1] != 3:
            raise ValueError("schedule must be an (N+1, 3) array")
        if not np.all(np.isfinite(self.f_d)):
            raise ValueError("schedule must be finite")

    @classmethod
    def zeros(cls, N):
        return cls(np.zeros((N + 1, 3)))

    @classmethod
    def constant(cls, N, f):
        return cls(np.tile(np.asarray(f, dtype=float), (N + 1, 1)))


@dataclass
class RtiWorkspace:
    X: np.ndarray
    U: np.ndarray
    at_lower: np.ndarray = None
    at_upper: np.ndarray = None
    iterations: int = 0
    qp_status: int = QP_OK
    kkt: float = float("inf")
    cost: float = float("inf")
    solve_ms: float = 0.0
    history: list = field(default_factory=list)

    @classmethod
    def cold_start(cls, refs, cfg: OcpConfig, params: QuadParams = DEFAULT_PARAMS):
        X = np.array(refs.x if hasattr(refs, "x") else refs, dtype=float)
        if X.shape != (cfg.N + 1, NX):
            raise ValueError(f"references must have shape ({cfg.N + 1}, {NX})")
        U = np.tile(hover_input(params), (cfg.N, 1))
        n = cfg.N * NU
        return cls(X, U, np.zeros(n, dtype=bool), np.zeros(n, dtype=bool))


def _align_sign(q, q_ref):
    return -q if float(np.dot(q, q_ref)) < 0.0 else q


def _condense(A, B, d, dx0):
    """Affine map ``dX = c + S dU`` of the linearised shooting recursion."""
    N = len(A)
    S = np.zeros((N + 1, NX, N * NU))
    c = np.zeros((N + 1, NX))
    c[0] = dx0
    for k in range(N):
        c[k + 1] = A[k] @ c[k] + d[k]
        if k:
            S[k + 1, :, :k * NU] = A[k] @ S[k, :, :k * NU]
        S[k + 1, :, k * NU:(k + 1) * NU] = B[k]
    return c, S


def rti_step(x_now, refs, schedule, ws: RtiWorkspace, cfg: OcpConfig, params: QuadParams = DEFAULT_PARAMS,
             shift=True):
    """Run one RTI iteration; returns ``(u_cmd, X_pred)``.

    ``X_pred`` is the updated state trajectory on the shooting grid, starting
    at ``x_now``. With ``shift`` the workspace is then advanced by one control
    period, ``dt_ctrl / dt_shoot`` of a node, by interpolating between
    nodes; the last node is held.
    """
    t0 = time.perf_counter()
    N = cfg.N
    fd = np.asarray(getattr(schedule, "f_d", schedule), dtype=float)
    if fd.shape != (N + 1, 3):
        raise ValueError(f"schedule must have shape ({N + 1}, 3)")
    x_now = np.array(x_now, dtype=float)[:NX]
    x_now[6:10] = _align_sign(x_now[6:10], ws.X[0, 6:10])
    X, U = ws.X, ws.U

    Xn, A, B = rk4_discrete(X[:-1], U, fd[:-1], cfg.dt_shoot, params, jacobians=True)
    d = Xn - X[1:]
    r, Jx, su = build_residuals(X, U, refs, cfg, params, jacobians=True, schedule=fd)
    c, S = _condense(A, B, d, x_now - X[0])

    n_rx = (N + 1) * NR
    rx, ru = r[:n_rx], r[n_rx:]
    Ms = np.einsum("kij,kjc->kic", Jx, S).reshape(n_rx, N * NU)
    r_lin = rx + np.einsum("kij,kj->ki", Jx, c).ravel()
    su_full = np.tile(su, N)
    H = Ms.T @ Ms
    H[np.diag_indices_from(H)] += su_full**2 + cfg.damping
    g = Ms.T @ r_lin + su_full * ru

    lo, hi = cfg.bounds(params)
    lb = (lo - U).ravel()
    ub = (hi - U).ravel()
    res = qp_solve_box(H, g, lb, ub, at_lower=ws.at_lower, at_upper=ws.at_upper, max_iter=cfg.qp_max_iter)
    dU = res.x.reshape(N, NU)

    # first-order optimality of the current guess before the step
    zero = np.zeros(N * NU)
    act_lo = np.isclose(lb, 0.0, atol=1e-12)
    act_hi = np.isclose(ub, 0.0, atol=1e-12) & ~act_lo
    kkt = max(kkt_residual(H, g, zero, lb, ub, act_lo, act_hi), float(np.abs(d).max()),
              float(np.abs(x_now - X[0]).max()))

    dX = c + np.einsum("kic,c->ki", S, res.x)
    X = X + dX
    X[0] = x_now
    X[:, 6:10] /= np.linalg.norm(X[:, 6:10], axis=1, keepdims=True)
    U = np.clip(U + dU, lo, hi)

    ws.X, ws.U = X, U
    ws.at_lower, ws.at_upper = res.at_lower, res.at_upper
    ws.iterations = res.iterations
    ws.qp_status = res.status
    ws.kkt = kkt
    ws.cost = 0.5 * float(r @ r)
    u_cmd = U[0].copy()
    X_pred = X.copy()
    if shift:
        shift_workspace(ws, cfg.dt_ctrl / cfg.dt_shoot)
    ws.solve_ms = 1e3 * (time.perf_counter() - t0)
    return u_cmd, X_pred


def shift_workspace(ws: RtiWorkspace, fraction=1.0):
    """Advance the guess by ``fraction`` of a node, holding the last node and input."""
    X, U = ws.X, ws.U
    if fraction == 1.0:
        X = np.concatenate([X[1:], X[-1:]])
        U = np.concatenate([U[1:], U[-1:]])
    else:
        Xn = np.concatenate([X[1:], X[-1:]])
        q_next = Xn[:, 6:10]
        flip = np.sum(q_next * X[:, 6:10], axis=1) < 0
        Xn[flip, 6:10] *= -1
        X = (1 - fraction) * X + fraction * Xn
        X[:, 6:10] /= np.linalg.norm(X[:, 6:10], axis=1, keepdims=True)
        Un = np.concatenate([U[1:], U[-1:]])
        U = (1 - fraction) * U + fraction * Un
    ws.X, ws.U = X, U


def merit(X, U, refs, schedule, cfg: OcpConfig, params: QuadParams = DEFAULT_PARAMS, mu=100.0):
    """Cost plus an l1 penalty on the shooting defects."""
    r = build_residuals(X, U, refs, cfg, params, schedule=schedule)
    d = shooting_defects(X, U, schedule, cfg, params)
    return 0.5 * float(r @ r) + mu * float(np.abs(d).sum())

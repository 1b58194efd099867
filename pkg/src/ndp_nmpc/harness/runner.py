"""Two-drone closed-loop experiment: plant, per-drone NMPC and neighbour exchange.

Drone 0 is the lower vehicle. Every control period each drone serves its
references, builds the disturbance schedule from the neighbour's last
published prediction and runs one RTI step; the plant then integrates the
full model over the period with the synthetic downwash applied.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from ..data_pipeline import LogBuffer, write_log_csv
from ..downwash import true_disturbance
from ..nmpc.rti import RtiWorkspace, rti_step
from ..nmpc.schedule import build_schedule, resample_zoh
from ..nmpc.throttle import HoverThrottleEstimator, throttle_to_thrust, thrust_to_throttle
from ..predictor import load_model
from ..quad_core import DEFAULT_PARAMS, P, Q, V, QuadParams, hover_state13, rotate_body_z
from ..sim import Plant, SimulationDiverged
from ..trajectory import generate, serve_reference
from .scenario import ScenarioConfig

TELEMETRY_HEADER = ["t", "fc", "wx", "wy", "wz", "qp_status", "kkt", "solve_ms", "fd_pred_z_node0"]
TRACKING_HEADER = ["t", "drone_id", "px", "py", "pz", "rx", "ry", "rz"]
WARMUP_ITERATIONS = 5


def _fmt(x):
    return f"{x:.12g}"


def scenario_trajectories(cfg: ScenarioConfig):
    return [generate(wp, v) for wp, v in zip(cfg.waypoints, cfg.v_avg)]


def scenario_duration(cfg: ScenarioConfig, trajs=None):
    if cfg.duration > 0:
        return cfg.duration
    trajs = trajs or scenario_trajectories(cfg)
    return cfg.hold + max(tr.duration for tr in trajs) + 1.0


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def run_closed_loop(cfg: ScenarioConfig, out_dir, seed=0, model=None, params: QuadParams = DEFAULT_PARAMS):
    """Fly the scenario and write logs and a run summary into ``out_dir``.

    ``model`` overrides ``cfg.model_path``; with ``cfg.baseline`` no
    predictor is used. Files: ``flight_log.csv`` (100 Hz states),
    ``tracking.csv`` (positions and references), ``telemetry_<id>.csv`` and
    ``run.json``. A non-finite plant state stops the run; the logs up to
    the last finite step are written before ``SimulationDiverged`` is raised.
    """
    if cfg.baseline:
        model = None
    elif model is None:
        if not cfg.model_path:
            raise ValueError("no predictor model given and predictor.baseline is false")
        model = load_model(cfg.model_path)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    ocp = cfg.ocp
    N, dts = ocp.N, ocp.dt_shoot
    trajs = scenario_trajectories(cfg)
    T = scenario_duration(cfg, trajs)
    n_ctrl = int(np.floor(T * cfg.control_rate + 1e-9))
    sub = cfg.substeps
    dt_ctrl = 1.0 / cfg.control_rate

    def refs_at(i, t):
        return serve_reference(trajs[i], t - cfg.hold, N, dts, params)

    X = np.empty((2, 13))
    for i in range(2):
        X[i] = hover_state13(trajs[i].eval(-1.0)[:3] + cfg.init_jitter * rng.standard_normal(3))
    plant = Plant(params, cfg.sim_dt, cfg.kp_rate)
    workspaces = []
    for i in range(2):
        refs = refs_at(i, 0.0)
        ws = RtiWorkspace.cold_start(refs, ocp, params)
        for _ in range(WARMUP_ITERATIONS):
            rti_step(X[i, :10], refs, np.zeros((N + 1, 3)), ws, ocp, params, shift=False)
        workspaces.append(ws)
    estimators = [HoverThrottleEstimator(theta=cfg.theta_hover) for _ in range(2)]

    published = [None, None]
    buf = LogBuffer()
    tracking = []
    telemetry = [[], []]
    sat_count = 0
    motors = np.zeros((2, 4))
    abort = None
    step = 0
    ids = np.array([0, 1])
    X_prev_v = X[:, V].copy()

    def log_state(t, X, motors, f_dist):
        buf.append(np.full(2, t), ids, X, motors, f_dist)
        r = [trajs[i].eval(t - cfg.hold)[:3] for i in range(2)]
        for i in range(2):
            tracking.append([t, i, *X[i, P], *r[i]])

    def disturbance(X):
        rel_p = np.stack([X[1, P] - X[0, P], X[0, P] - X[1, P]])
        rel_v = np.stack([X[1, V] - X[0, V], X[0, V] - X[1, V]])
        return true_disturbance(rel_p, rel_v, cfg.downwash)

    for j in range(n_ctrl):
        t = j * dt_ctrl
        refs = [refs_at(i, t) for i in range(2)]
        grid = t + dts * np.arange(N + 1)
        cmds, preds = [], []
        for i in range(2):
            x_meas = X[i, :10].copy()
            x_meas[0:3] += cfg.pos_noise * rng.standard_normal(3)
            x_meas[3:6] += cfg.vel_noise * rng.standard_normal(3)
            other = 1 - i
            if cfg.neighbor_mode == "prediction" and published[other] is not None:
                t0, Xo = published[other]
                nb = resample_zoh(Xo, t0, dts, grid)
            else:
                nb = refs[other].x
            schedule = build_schedule(model, refs[i].x, nb)
            u, X_pred = rti_step(x_meas, refs[i], schedule, workspaces[i], ocp, params)
            ws = workspaces[i]
            telemetry[i].append([t, *u, ws.qp_status, ws.kkt, ws.solve_ms, schedule.f_d[0, 2]])
            cmds.append(u)
            preds.append((t, X_pred))
        published = preds

        u = np.array(cmds)
        # the controller commands throttle through its hover estimate; the plant inverts the true map
        theta_used = [e.theta if cfg.throttle_kf else cfg.theta_hover for e in estimators]
        throttle = np.array([thrust_to_throttle(u[i, 0], theta_used[i], params) for i in range(2)])
        fc = throttle_to_thrust(throttle, cfg.theta_hover, params)
        w_cmd = u[:, 1:]
        for s in range(sub):
            f_dist = disturbance(X)
            if step % cfg.log_every == 0:
                log_state(step * cfg.sim_dt, X, motors, f_dist)
            try:
                X_new, motors, sat = plant.step(X, fc, w_cmd, f_dist)
            except SimulationDiverged as exc:
                abort = f"t={step * cfg.sim_dt:.4f}s: {exc}"
                break
            sat_count += int(np.count_nonzero(sat))
            X = X_new
            step += 1
        if abort:
            break
        if cfg.throttle_kf:
            acc_z = (X[:, 5] - X_prev_v[:, 2]) / dt_ctrl
            tilt = rotate_body_z(X[:, Q])[:, 2]
            for i in range(2):
                estimators[i].update(float(throttle[i]), float(acc_z[i]), float(tilt[i]))
        X_prev_v = X[:, V].copy()
    else:
        if step % cfg.log_every == 0:
            log_state(step * cfg.sim_dt, X, motors, disturbance(X))

    write_log_csv(buf.to_log(), os.path.join(out_dir, "flight_log.csv"))
    tracking.sort(key=lambda r: (r[1], r[0]))
    _write_rows(os.path.join(out_dir, "tracking.csv"), TRACKING_HEADER,
                ([_fmt(r[0]), int(r[1])] + [_fmt(v) for v in r[2:]] for r in tracking))
    for i in range(2):
        _write_rows(os.path.join(out_dir, f"telemetry_{i}.csv"), TELEMETRY_HEADER,
                    ([_fmt(r[0])] + [_fmt(v) for v in r[1:5]] + [int(r[5])] + [_fmt(v) for v in r[6:]]
                     for r in telemetry[i]))
    summary = {
        "seed": int(seed),
        "mode": "baseline" if model is None else "ndp",
        "model": "" if model is None else (cfg.model_path or "<in-memory>"),
        "duration": T,
        "control_steps": len(telemetry[0]),
        "saturation_count": sat_count,
        "aborted": abort,
        "window": list(cfg.window),
        "geometry": cfg.geometry(),
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    if abort:
        raise SimulationDiverged(f"closed loop diverged at {abort}; logs kept in {out_dir}")
    return out_dir

"""The ten acceptance criteria, each printing one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, TIMINGS
from ndp_nmpc import nmpc
from ndp_nmpc import predictor as pr
from ndp_nmpc.data_pipeline import reconstruct_disturbance
from ndp_nmpc.harness.metrics import compare_runs
from ndp_nmpc.nmpc.ocp import rk4_discrete
from ndp_nmpc.quad_core import DEFAULT_PARAMS, dynamics_reduced, hover_state13, rk4_step
from ndp_nmpc.trajectory import generate, min_snap, serve_reference
from oracles import null_space_optimality, projected_gradient_qp, rk4_interval_error_ratio, simulate_pair

P = DEFAULT_PARAMS
CFG = nmpc.OcpConfig()


def report(capsys, number, name, ok, detail):
    line = f"C{number} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def test_c01_closed_loop_reduction(capsys, tmp_path, closed_loop_runs):
    base, ndp = closed_loop_runs
    rep = compare_runs(base, ndp, tmp_path / "report")
    red = rep.reduction_pct[2]
    total = TIMINGS.get("collect", 0) + TIMINGS.get("train(4.0, 'clip', False, 150, 0)", 0) + TIMINGS["flights"]
    ok = red >= 50.0 and len(rep.seeds) == 3 and total < 300
    report(capsys, 1, "closed-loop z-RMSE reduction", ok,
           f"baseline {rep.rmse_baseline[2]:.4f} m, predictor {rep.rmse_ndp[2]:.4f} m, "
           f"reduction {red:.1f}% over seeds {rep.seeds} (need >= 50%), pipeline {total:.0f} s")


def test_c02_lipschitz_certificate(capsys, flight_model):
    t0 = time.perf_counter()
    bound = pr.lipschitz_upper_bound(flight_model)
    emp = pr.empirical_lipschitz(flight_model, n_pairs=100_000, seed=0)
    raw_bound = pr.lipschitz_upper_bound(flight_model, raw_inputs=True)
    raw_emp = pr.empirical_lipschitz(flight_model, n_pairs=100_000, seed=1, raw_inputs=True)
    dt = time.perf_counter() - t0
    ok = (flight_model.widths == (6, 128, 64, 128, 3) and bound <= 256 + 1e-3 and emp <= bound
          and raw_emp <= raw_bound and dt < 30)
    report(capsys, 2, "Lipschitz certificate", ok,
           f"certified {bound:.4f} (<= 256.001), empirical {emp:.4f} over 1e5 pairs; "
           f"raw-input {raw_emp:.3f} <= {raw_bound:.3f}; {dt:.1f} s")


def test_c03_gamma_sweep(capsys, sweep_model, unnormalized_model):
    v4 = float(np.var(pr.grid_map(sweep_model, 1.3)[2]))
    vinf = float(np.var(pr.grid_map(unnormalized_model, 1.3)[2]))
    report(capsys, 3, "grid variance at 1.3 m", v4 < vinf,
           f"gamma=4 {v4:.4f} N^2 vs unnormalized {vinf:.4f} N^2")


def _converge(schedule, iters=60):
    traj = generate([(0, 0, 0, 0), (0, 0, 1, 0)], 0.5)
    refs = serve_reference(traj, traj.duration + 10.0, CFG.N, CFG.dt_shoot)
    ws = nmpc.RtiWorkspace.cold_start(refs, CFG)
    for _ in range(iters):
        u, _ = nmpc.rti_step(refs.x[0], refs, schedule, ws, CFG, shift=False)
    return u


def test_c04_nmpc_stationarity(capsys):
    t0 = time.perf_counter()
    u0 = _converge(nmpc.DisturbanceSchedule.zeros(CFG.N))
    u4 = _converge(nmpc.DisturbanceSchedule.constant(CFG.N, [0, 0, -4.0]))
    dt = time.perf_counter() - t0
    ok = (abs(u0[0] - 15.0525) <= 1e-3 and np.linalg.norm(u0[1:]) <= 1e-4
          and abs(u4[0] - 19.0525) <= 0.05 and dt < 1.0)
    report(capsys, 4, "NMPC stationarity", ok,
           f"fc {u0[0]:.6f} N, |w| {np.linalg.norm(u0[1:]):.1e}; with -4 N: fc {u4[0]:.4f} N; {dt:.2f} s")


def test_c05_real_time_budget(capsys):
    traj = generate([(0, 0, 1, 0), (1.5, 0.5, 1.3, 0.4), (3.0, -0.5, 1.0, 0.0), (4.0, 0.0, 1.2, 0.0)], 0.5)
    ws = nmpc.RtiWorkspace.cold_start(serve_reference(traj, 0.0, CFG.N, CFG.dt_shoot), CFG)
    x = serve_reference(traj, 0.0, CFG.N, CFG.dt_shoot).x[0].copy()
    rng = np.random.default_rng(0)
    times = []
    for j in range(1200):
        t = j * CFG.dt_ctrl
        refs = serve_reference(traj, t, CFG.N, CFG.dt_shoot)
        fd = np.zeros((CFG.N + 1, 3))
        fd[:, 2] = -4.0 * np.exp(-((np.arange(CFG.N + 1) + j) % 240 - 120) ** 2 / 200.0)
        u, _ = nmpc.rti_step(x, refs, fd, ws, CFG)
        times.append(ws.solve_ms)
        x = rk4_discrete(x[None], u[None], fd[:1], CFG.dt_ctrl)[0]
        x[:6] += rng.normal(0, 1e-3, 6)
    times = np.array(times)
    mean, p99 = times.mean(), np.percentile(times, 99)
    ok = len(times) >= 1000 and mean < 16.7 and p99 < 33.0
    report(capsys, 5, "real-time budget", ok,
           f"{len(times)} steps, mean {mean:.2f} ms (< 16.7), p99 {p99:.2f} ms (< 33)")


def _nmpc_probe(rng):
    """Relative error of analytic directional derivatives of residuals and defects."""
    traj = generate([(0, 0, 1, 0), (1.0, 0.5, 1.2, 0.3), (2.0, 0.0, 1.0, 0.0)], 0.4)
    refs = serve_reference(traj, rng.uniform(0, traj.duration), CFG.N, CFG.dt_shoot)
    x = np.concatenate([rng.normal(0, 1, 6), rng.normal(size=4)])
    x[6:10] /= np.linalg.norm(x[6:10])
    u = np.array([rng.uniform(5, 30), *rng.normal(0, 1, 3)])
    fd = rng.normal(0, 3, 3)
    dx, du = rng.normal(size=10), rng.normal(size=4)
    h = 1e-6
    _, A, B = rk4_discrete(x[None], u[None], fd[None], CFG.dt_shoot, jacobians=True)
    ana = A[0] @ dx + B[0] @ du
    num = (rk4_discrete((x + h * dx)[None], (u + h * du)[None], fd[None], CFG.dt_shoot)[0]
           - rk4_discrete((x - h * dx)[None], (u - h * du)[None], fd[None], CFG.dt_shoot)[0]) / (2 * h)
    e_def = np.linalg.norm(num - ana) / np.linalg.norm(ana)
    k = int(rng.integers(0, CFG.N + 1))
    X = refs.x.copy()
    X[k] = x
    U = np.tile(u, (CFG.N, 1))
    _, Jx, _ = nmpc.build_residuals(X, U, refs, CFG, jacobians=True)

    def rk(xk):
        XX = X.copy()
        XX[k] = xk
        return nmpc.build_residuals(XX, U, refs, CFG)[k * 9:(k + 1) * 9]
    ana = Jx[k] @ dx
    num = (rk(x + h * dx) - rk(x - h * dx)) / (2 * h)
    e_res = np.linalg.norm(num - ana) / np.linalg.norm(ana)
    return max(e_def, e_res)


def _mlp_probe(rng, model, X, Y):
    _, gW, gb = pr.loss_and_grads(model, X, Y)
    dW = [rng.normal(size=w.shape) for w in model.W]
    db = [rng.normal(size=v.shape) for v in model.b]
    ana = sum(float(np.sum(g * d)) for g, d in zip(gW + gb, dW + db))
    h = 1e-6

    def loss(s):
        m = pr.MlpModel(model.widths, [w + s * d for w, d in zip(model.W, dW)],
                        [v + s * d for v, d in zip(model.b, db)], model.gamma, model.sn_mode,
                        model.norm_mean, model.norm_scale)
        return pr.loss_and_grads(m, X, Y)[0]
    num = (loss(h) - loss(-h)) / (2 * h)
    return abs(num - ana) / abs(ana)


def test_c06_jacobian_checks(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    e_nmpc = max(_nmpc_probe(rng) for _ in range(100))
    model = pr.init_model(seed=3)
    X, Y = rng.normal(size=(32, 6)), rng.normal(size=(32, 3))
    e_mlp = max(_mlp_probe(rng, model, X, Y) for _ in range(100))
    dt = time.perf_counter() - t0
    ok = e_nmpc <= 1e-4 and e_mlp <= 1e-5 and dt < 10
    report(capsys, 6, "Jacobian and gradient checks", ok,
           f"NMPC worst {e_nmpc:.1e} (<= 1e-4), MLP worst {e_mlp:.1e} (<= 1e-5), 100 probes each, {dt:.1f} s")


def test_c07_minimum_snap(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    wp = np.column_stack([rng.uniform(-2, 2, (6, 3)), rng.uniform(-1, 1, 6)])
    tr = generate(wp, 0.7)
    interp = float(np.abs(tr.eval(tr.knots) - wp).max())
    cont = 0.0
    for t in tr.knots[1:-1]:
        for d in range(5):
            axes = slice(0, 4) if d <= 2 else slice(0, 3)
            jump = np.abs(tr.eval(t - 1e-12, d) - tr.eval(t + 1e-12, d))[axes]
            cont = max(cont, float(jump.max() / max(1.0, np.abs(tr.eval(t, d)[axes]).max())))
    mid = abs(min_snap([(0, 0, 1, 0), (2, 0, 1, 0)], [0.0, 4.0]).eval(2.0)[0] - 1.0)
    ns = sum(null_space_optimality(rng) for _ in range(50))
    dt = time.perf_counter() - t0
    ok = interp <= 1e-8 and cont <= 1e-6 and mid <= 1e-9 and ns == 50 and dt < 5
    report(capsys, 7, "minimum-snap correctness", ok,
           f"interpolation {interp:.1e} m, continuity {cont:.1e}, midpoint {mid:.1e}, "
           f"null-space optimal {ns}/50, {dt:.1f} s")


def test_c08_pipeline_oracle(capsys):
    t0 = time.perf_counter()
    rec = reconstruct_disturbance(simulate_pair(4.0, f_extra=(0, 0, -4.0)), 0, 1).samples
    rel = np.sqrt(np.mean(np.sum((rec.f_d - [0, 0, -4.0]) ** 2, axis=1))) / 4.0
    hover = reconstruct_disturbance(simulate_pair(4.0), 0, 1).samples
    rms = np.sqrt(np.mean(np.sum(hover.f_d**2, axis=1)))
    dt = time.perf_counter() - t0
    ok = rel <= 0.05 and rms <= 0.05 and dt < 20
    report(capsys, 8, "pipeline oracle", ok,
           f"constant -4 N recovered with {100 * rel:.3f}% RMS error, hover RMS {rms:.1e} N, {dt:.1f} s")


def test_c09_qp_oracle(capsys):
    rng = np.random.default_rng(9)
    worst, solve_time, n_active = 0.0, 0.0, 0
    for i in range(200):
        n = 80 if i % 4 == 0 else int(rng.integers(1, 81))
        M = rng.normal(size=(n, n))
        H = M @ M.T / n + rng.uniform(0.05, 1.0) * np.eye(n)
        g = rng.normal(0, 3, n)
        lb, ub = -rng.uniform(0.05, 2.0, n), rng.uniform(0.05, 2.0, n)
        t0 = time.perf_counter()
        res = nmpc.qp_solve_box(H, g, lb, ub)
        solve_time += time.perf_counter() - t0
        ref = projected_gradient_qp(H, g, lb, ub, tol=1e-10)
        worst = max(worst, float(np.abs(res.x - ref).max()))
        n_active += int(res.at_lower.sum() + res.at_upper.sum())
    ok = worst <= 1e-7 and solve_time < 10
    report(capsys, 9, "QP oracle equivalence", ok,
           f"200 QPs, worst deviation {worst:.1e} (<= 1e-7), {n_active} active bounds, solver {solve_time:.2f} s")


def test_c10_integrator_order(capsys):
    t0 = time.perf_counter()
    ratio = rk4_interval_error_ratio()
    x = hover_state13()[:10]
    for _ in range(60):
        x = rk4_step(dynamics_reduced, x, np.zeros(4), 1 / 60, np.zeros(3))
    fall = abs(x[2] - (-0.5 * P.g))
    dt = time.perf_counter() - t0
    ok = 12 <= ratio <= 20 and fall <= 1e-6 and dt < 1.0
    report(capsys, 10, "integrator order", ok,
           f"error ratio under dt halving {ratio:.2f} (in [12, 20]), free-fall z error {fall:.1e} m, {dt:.2f} s")

"""Tracking metrics and baseline-versus-predictor reports."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

AXES = ("x", "y", "z")


@dataclass
class RunMetrics:
    rmse_full: np.ndarray
    rmse_window: np.ndarray
    max_z_error: float
    mean_solve_ms: float
    saturation_count: int
    window_samples: int


def read_tracking(run_dir, drone=0):
    """``(t, p, r)`` arrays of one drone from ``tracking.csv``."""
    data = np.loadtxt(os.path.join(run_dir, "tracking.csv"), delimiter=",", skiprows=1, ndmin=2)
    d = data[data[:, 1] == drone]
    return d[:, 0], d[:, 2:5], d[:, 5:8]


def _read_summary(run_dir):
    with open(os.path.join(run_dir, "run.json")) as fh:
        return json.load(fh)


def rmse(err):
    err = np.asarray(err, dtype=float)
    return np.sqrt(np.mean(err**2, axis=0))


def window_mask(ref_x, window):
    lo, hi = window
    return (ref_x >= lo) & (ref_x <= hi)


def compute_metrics(run_dir, window, drone=0) -> RunMetrics:
    """Per-axis RMSE over the run and over samples whose reference x lies in ``window``."""
    _, p, r = read_tracking(run_dir, drone)
    if len(p) == 0:
        raise ValueError(f"no tracking samples for drone {drone} in {run_dir}")
    mask = window_mask(r[:, 0], window)
    if not np.any(mask):
        raise ValueError(f"downwash window {tuple(window)} contains no samples")
    err = p - r
    tel = np.loadtxt(os.path.join(run_dir, f"telemetry_{drone}.csv"), delimiter=",", skiprows=1, ndmin=2)
    summary = _read_summary(run_dir)
    return RunMetrics(rmse(err), rmse(err[mask]), float(np.abs(err[:, 2]).max()),
                      float(tel[:, 7].mean()) if len(tel) else 0.0,
                      int(summary.get("saturation_count", 0)), int(mask.sum()))


def find_runs(root):
    """Run directories under ``root``: ``root`` itself or its immediate subdirectories."""
    if os.path.isfile(os.path.join(root, "run.json")):
        return [root]
    runs = sorted(os.path.join(root, d) for d in os.listdir(root)
                  if os.path.isfile(os.path.join(root, d, "run.json")))
    if not runs:
        raise ValueError(f"no runs found under {root}")
    return runs


@dataclass
class Report:
    rmse_baseline: np.ndarray
    rmse_ndp: np.ndarray
    reduction_pct: np.ndarray
    rmse_full_baseline: np.ndarray
    rmse_full_ndp: np.ndarray
    seeds: list


def _group(root):
    runs = find_runs(root)
    summaries = [_read_summary(r) for r in runs]
    by_seed = {}
    for r, s in zip(runs, summaries):
        if s["seed"] in by_seed:
            raise ValueError(f"seed {s['seed']} appears twice under {root}")
        by_seed[s["seed"]] = (r, s)
    return by_seed


def compare_runs(baseline_dir, ndp_dir, out_dir=None, drone=0) -> Report:
    """Seed-averaged RMSE table and z-versus-x figure of two run groups.

    Each directory is a run or a folder of runs; both must hold the same
    seeds and the same scenario geometry. Writes ``rmse.csv`` and
    ``z_vs_x.svg`` when ``out_dir`` is given.
    """
    base, ndp = _group(baseline_dir), _group(ndp_dir)
    if sorted(base) != sorted(ndp):
        raise ValueError(f"seed sets differ: {sorted(base)} vs {sorted(ndp)}")
    for seed in base:
        if base[seed][1]["geometry"] != ndp[seed][1]["geometry"]:
            raise ValueError(f"scenario mismatch between runs for seed {seed}")
    seeds = sorted(base)
    window = base[seeds[0]][1]["window"]
    mb = [compute_metrics(base[s][0], window, drone) for s in seeds]
    mn = [compute_metrics(ndp[s][0], window, drone) for s in seeds]
    rb = np.mean([m.rmse_window for m in mb], axis=0)
    rn = np.mean([m.rmse_window for m in mn], axis=0)
    fb = np.mean([m.rmse_full for m in mb], axis=0)
    fn = np.mean([m.rmse_full for m in mn], axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        red = np.where(rb > 0, 100.0 * (1.0 - rn / rb), 0.0)
    report = Report(rb, rn, red, fb, fn, seeds)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_report_csv(report, os.path.join(out_dir, "rmse.csv"))
        plot_z_vs_x([base[s][0] for s in seeds], [ndp[s][0] for s in seeds], window,
                    os.path.join(out_dir, "z_vs_x.svg"), drone)
    return report


def write_report_csv(report: Report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "axis", "rmse_baseline", "rmse_ndp", "reduction_pct"])
        for i, ax in enumerate(AXES):
            w.writerow(["window", ax, f"{report.rmse_baseline[i]:.6g}", f"{report.rmse_ndp[i]:.6g}",
                        f"{report.reduction_pct[i]:.4g}"])
        for i, ax in enumerate(AXES):
            fb, fn = report.rmse_full_baseline[i], report.rmse_full_ndp[i]
            red = 100.0 * (1.0 - fn / fb) if fb > 0 else 0.0
            w.writerow(["full", ax, f"{fb:.6g}", f"{fn:.6g}", f"{red:.4g}"])


def _stack_runs(dirs, drone):
    tracks = [read_tracking(d, drone) for d in dirs]
    n = min(len(t[0]) for t in tracks)
    p = np.stack([t[1][:n] for t in tracks])
    return p, tracks[0][2][:n]


def _passes(x):
    """Index ranges over which ``x`` moves monotonically; pauses do not split a pass."""
    out, start, prev = [], 0, 0.0
    for i, si in enumerate(np.sign(np.diff(x))):
        if si == 0:
            continue
        if prev != 0 and si != prev:
            out.append((start, i + 1))
            start = i
        prev = si
    out.append((start, len(x)))
    return [(a, b) for a, b in out if b - a > 1]


def plot_z_vs_x(base_dirs, ndp_dirs, window, path, drone=0):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.axvspan(window[0], window[1], color="0.85", label="downwash window")
    ref_drawn = False
    for dirs, color, label in ((base_dirs, "tab:red", "baseline"), (ndp_dirs, "tab:blue", "NDP-NMPC")):
        p, r = _stack_runs(dirs, drone)
        x_ref = r[:, 0]
        z_mean, z_lo, z_hi = p[:, :, 2].mean(0), p[:, :, 2].min(0), p[:, :, 2].max(0)
        x_mean = p[:, :, 0].mean(0)
        for k, (a, b) in enumerate(_passes(x_ref)):
            order = np.argsort(x_mean[a:b])
            xs = x_mean[a:b][order]
            ax.fill_between(xs, z_lo[a:b][order], z_hi[a:b][order], color=color, alpha=0.2, lw=0)
            ax.plot(x_mean[a:b], z_mean[a:b], color=color, lw=1.2, label=label if k == 0 else None)
        if not ref_drawn:
            ax.plot(x_ref, r[:, 2], "k--", lw=0.8, label="reference")
            ref_drawn = True
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)

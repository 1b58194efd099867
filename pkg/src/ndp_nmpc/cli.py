"""Command line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys

import numpy as np

from . import predictor as pr
from .config import ConfigError
from .data_pipeline import DataError, collect_scenario, load_collect_config, read_samples_csv, write_samples_csv
from .harness.metrics import AXES, compare_runs
from .harness.runner import run_closed_loop
from .harness.scenario import load_scenario
from .sim import SimulationDiverged
from .trajectory import FlatnessError, TrajectoryError, export_csv, generate, read_waypoints

log = logging.getLogger("ndp_nmpc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def cmd_sim_collect(args):
    cfg, dw = load_collect_config(args.config)
    col = collect_scenario(cfg, dw, seed=args.seed)
    write_samples_csv(col.samples, args.out)
    log.info("wrote %d samples to %s (gaps %d, dropped %d)", len(col.samples), args.out,
             col.gap_count, col.dropped)


def cmd_train(args):
    data = read_samples_csv(args.data)
    model = pr.init_model(seed=args.seed, gamma=args.gamma, sn_mode=args.sn_mode)
    cfg = pr.TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                         seed=args.seed, sn_per_step=args.per_step, dtype=args.dtype)
    model, history = pr.train(model, data.X, data.Y, cfg, log_every=max(1, args.epochs // 10), logger=log)
    pr.save_model(model, args.out)
    log.info("final train MSE %.6g, certified Lipschitz bound %.6g", history[-1], pr.lipschitz_upper_bound(model))


def cmd_predict_map(args):
    model = pr.load_model(args.model)
    xs, ys, grid = pr.grid_map(model, args.height, extent=args.extent, resolution=args.res)
    pr.write_grid_csv(args.out, xs, ys, grid)
    log.info("grid variance %.6g, min %.4g N", float(np.var(grid)), float(grid.min()))


def cmd_traj(args):
    traj = generate(read_waypoints(args.waypoints), args.v_avg)
    n = export_csv(traj, args.out, args.dt)
    log.info("wrote %d samples over %.3f s", n, traj.duration)


def cmd_fly(args):
    overrides = {}
    if args.baseline:
        overrides = {"predictor.baseline": True, "predictor.model": ""}
    elif args.model:
        overrides = {"predictor.baseline": False, "predictor.model": args.model}
    cfg = load_scenario(args.scenario, **{k.replace(".", "__"): v for k, v in overrides.items()})
    if not cfg.baseline and not cfg.model_path:
        raise ConfigError("fly needs --model, --baseline or predictor.model in the scenario")
    model = pr.load_model(cfg.model_path) if not cfg.baseline else None
    run_closed_loop(cfg, args.out, seed=args.seed, model=model)
    log.info("run written to %s", args.out)


def cmd_report(args):
    rep = compare_runs(args.baseline, args.ndp, args.out)
    for i, ax in enumerate(AXES):
        print(f"{ax}: baseline {rep.rmse_baseline[i]:.4f} m  ndp {rep.rmse_ndp[i]:.4f} m  "
              f"reduction {rep.reduction_pct[i]:.1f}%")


def build_parser():
    ap = argparse.ArgumentParser(prog="ndp-nmpc", description="Downwash-aware NMPC for close-proximity flight")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim-collect", help="simulate the fly-over protocol and write the sample CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.set_defaults(func=cmd_sim_collect)

    p = sub.add_parser("train", help="train the disturbance predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--gamma", type=float, default=4.0, help="per-layer spectral bound, 'inf' disables it")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sn-mode", choices=pr.SN_MODES, default="clip")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--per-step", action="store_true", help="normalise after every Adam step")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict-map", help="z-force grid at a fixed relative height")
    p.add_argument("--model", required=True)
    p.add_argument("--height", type=float, required=True)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--res", type=int, default=21)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_map)

    p = sub.add_parser("traj", help="minimum-snap trajectory through a waypoint CSV")
    p.add_argument("--waypoints", required=True)
    p.add_argument("--v-avg", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_traj)

    p = sub.add_parser("fly", help="closed-loop two-drone run")
    p.add_argument("--scenario", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--model")
    g.add_argument("--baseline", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.set_defaults(func=cmd_fly)

    p = sub.add_parser("report", help="compare baseline and predictor runs")
    p.add_argument("--baseline", required=True)
    p.add_argument("--ndp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if getattr(args, "gamma", None) is not None and not (args.gamma > 0 or math.isinf(args.gamma)):
        log.error("--gamma must be positive")
        return EXIT_CONFIG
    try:
        args.func(args)
    except (SimulationDiverged, FlatnessError, pr.TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, DataError, TrajectoryError, pr.ModelFormatError, ValueError, OSError) as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Closed-loop two-drone scenario configuration.

Keys (flat ``section.key = value``; unknown keys are rejected):

``scenario.duration``     total simulated time [s]; 0 picks hold + longest trajectory + 1 s
``scenario.hold``         hover time before the trajectories start [s]
``scenario.window_min``   lower x bound of the downwash window on drone 0's reference [m]
``scenario.window_max``   upper x bound [m]
``scenario.seeds``        seeds used for averaged comparisons, space separated
``scenario.pos_noise``    std of the position estimate noise [m]
``scenario.vel_noise``    std of the velocity estimate noise [m/s]
``scenario.init_jitter``  std of the initial position offset [m]
``drone0.waypoints``      ``x y z [psi]; ...`` for the lower drone
``drone0.v_avg``          average speed for time allocation [m/s]
``drone1.waypoints``      upper drone
``drone1.v_avg``
``sim.dt``                plant substep [s]
``sim.kp_rate``           inner body-rate loop gain
``sim.theta_hover``       true hover throttle of the simulated vehicles
``nmpc.*``                horizon, rate and weights, see :data:`SCENARIO_SCHEMA`
``nmpc.neighbor_mode``    ``prediction`` (exchange predicted trajectories) or ``reference``
``nmpc.throttle_kf``      run the hover-throttle estimator instead of trusting ``sim.theta_hover``
``predictor.model``       model file for the learned predictor
``predictor.baseline``    true for the plain NMPC without predictor
``downwash.*``            synthetic field parameters
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import config as cfgmod
from ..downwash import DownwashParams
from ..nmpc.ocp import INPUT_REFS, OcpConfig

NEIGHBOR_MODES = ("prediction", "reference")

LOWER_PATH = "-1.5 -0.4 1.0; -0.4 0 1.0; 0.4 0 1.0; 1.5 -0.4 1.0; 0.4 0 1.0; -0.4 0 1.0; -1.5 -0.4 1.0"
UPPER_PATH = "-1.5 0.4 1.6; -0.4 0 1.6; 0.4 0 1.6; 1.5 0.4 1.6; 0.4 0 1.6; -0.4 0 1.6; -1.5 0.4 1.6"


def _seeds(text):
    vals = [int(s) for s in text.replace(",", " ").split()]
    if not vals or any(v < 0 for v in vals):
        raise cfgmod.ConfigError("scenario.seeds needs non-negative integers")
    return tuple(vals)


def _str(text):
    return text.strip()


SCENARIO_SCHEMA = {
    "scenario.duration": (cfgmod.parse_float, 0.0),
    "scenario.hold": (cfgmod.parse_float, 1.0),
    "scenario.window_min": (cfgmod.parse_float, -0.4),
    "scenario.window_max": (cfgmod.parse_float, 0.4),
    "scenario.seeds": (_seeds, (0, 1, 2)),
    "scenario.pos_noise": (cfgmod.parse_float, 0.002),
    "scenario.vel_noise": (cfgmod.parse_float, 0.005),
    "scenario.init_jitter": (cfgmod.parse_float, 0.01),
    "drone0.waypoints": (cfgmod.parse_points, cfgmod.parse_points(LOWER_PATH)),
    "drone0.v_avg": (cfgmod.parse_float, 0.5),
    "drone1.waypoints": (cfgmod.parse_points, cfgmod.parse_points(UPPER_PATH)),
    "drone1.v_avg": (cfgmod.parse_float, 0.5),
    "sim.dt": (cfgmod.parse_float, 1.0 / 600.0),
    "sim.kp_rate": (cfgmod.parse_float, 20.0),
    "sim.theta_hover": (cfgmod.parse_float, 0.5),
    "nmpc.N": (int, 20),
    "nmpc.dt_shoot": (cfgmod.parse_float, 0.1),
    "nmpc.rate": (cfgmod.parse_float, 60.0),
    "nmpc.Qp_xy": (cfgmod.parse_float, 300.0),
    "nmpc.Qp_z": (cfgmod.parse_float, 400.0),
    "nmpc.Qv": (cfgmod.parse_float, 1.0),
    "nmpc.Qq": (cfgmod.parse_float, 0.1),
    "nmpc.Rw": (cfgmod.parse_float, 10.0),
    "nmpc.Rfc": (cfgmod.parse_float, 10.0),
    "nmpc.terminal_scale": (cfgmod.parse_float, 1.0),
    "nmpc.w_max": (cfgmod.parse_float, 3.0),
    "nmpc.input_ref": (_str, "compensating"),
    "nmpc.neighbor_mode": (_str, "prediction"),
    "nmpc.throttle_kf": (cfgmod.parse_bool, False),
    "predictor.model": (_str, ""),
    "predictor.baseline": (cfgmod.parse_bool, False),
    **cfgmod.DOWNWASH_SCHEMA,
}


@dataclass
class ScenarioConfig:
    waypoints: list
    v_avg: list
    duration: float = 0.0
    hold: float = 1.0
    window: tuple = (-0.4, 0.4)
    seeds: tuple = (0, 1, 2)
    pos_noise: float = 0.002
    vel_noise: float = 0.005
    init_jitter: float = 0.01
    sim_dt: float = 1.0 / 600.0
    kp_rate: float = 20.0
    theta_hover: float = 0.5
    control_rate: float = 60.0
    ocp: OcpConfig = field(default_factory=OcpConfig)
    neighbor_mode: str = "prediction"
    throttle_kf: bool = False
    model_path: str = ""
    baseline: bool = False
    downwash: DownwashParams = field(default_factory=DownwashParams)
    values: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.waypoints) != 2 or len(self.v_avg) != 2:
            raise cfgmod.ConfigError("the scenario has exactly two drones")
        for wp in self.waypoints:
            if len(wp) < 2:
                raise cfgmod.ConfigError("each drone needs at least two waypoints")
        if any(not v > 0 for v in self.v_avg):
            raise cfgmod.ConfigError("v_avg must be positive")
        if self.duration < 0 or self.hold < 0:
            raise cfgmod.ConfigError("scenario.duration and scenario.hold must be non-negative")
        if not self.window[0] < self.window[1]:
            raise cfgmod.ConfigError("scenario.window_min must be below scenario.window_max")
        if min(self.pos_noise, self.vel_noise, self.init_jitter) < 0:
            raise cfgmod.ConfigError("noise levels must be non-negative")
        if not self.sim_dt > 0 or self.sim_dt > 1.0 / self.control_rate + 1e-12:
            raise cfgmod.ConfigError("sim.dt must be positive and no longer than the control period")
        ratio = 1.0 / (self.sim_dt * self.control_rate)
        if abs(ratio - round(ratio)) > 1e-6:
            raise cfgmod.ConfigError("the control period must be a whole number of plant substeps")
        log_ratio = 1.0 / (self.sim_dt * 100.0)
        if abs(log_ratio - round(log_ratio)) > 1e-6:
            raise cfgmod.ConfigError("sim.dt must divide the 100 Hz log period")
        if not 0 < self.theta_hover <= 1:
            raise cfgmod.ConfigError("sim.theta_hover must lie in (0, 1]")
        if self.neighbor_mode not in NEIGHBOR_MODES:
            raise cfgmod.ConfigError(f"nmpc.neighbor_mode must be one of {NEIGHBOR_MODES}")
        if self.baseline and self.model_path:
            raise cfgmod.ConfigError("predictor.model and predictor.baseline are exclusive")

    @property
    def substeps(self) -> int:
        return int(round(1.0 / (self.sim_dt * self.control_rate)))

    @property
    def log_every(self) -> int:
        return int(round(1.0 / (self.sim_dt * 100.0)))

    def geometry(self) -> dict:
        """Values that must agree between runs that are compared."""
        return {k: _plain(v) for k, v in sorted(self.values.items()) if not k.startswith("predictor.")}

    @classmethod
    def from_values(cls, values):
        if values["nmpc.input_ref"] not in INPUT_REFS:
            raise cfgmod.ConfigError(f"nmpc.input_ref must be one of {INPUT_REFS}")
        try:
            ocp = OcpConfig(N=values["nmpc.N"], dt_shoot=values["nmpc.dt_shoot"],
                            dt_ctrl=1.0 / values["nmpc.rate"], Qp_xy=values["nmpc.Qp_xy"],
                            Qp_z=values["nmpc.Qp_z"], Qv=values["nmpc.Qv"], Qq=values["nmpc.Qq"],
                            Rw=values["nmpc.Rw"], Rfc=values["nmpc.Rfc"],
                            terminal_scale=values["nmpc.terminal_scale"], w_max=values["nmpc.w_max"],
                            input_ref=values["nmpc.input_ref"])
        except (ValueError, ZeroDivisionError) as exc:
            raise cfgmod.ConfigError(str(exc)) from exc
        return cls(
            waypoints=[np.asarray(values["drone0.waypoints"]), np.asarray(values["drone1.waypoints"])],
            v_avg=[values["drone0.v_avg"], values["drone1.v_avg"]],
            duration=values["scenario.duration"], hold=values["scenario.hold"],
            window=(values["scenario.window_min"], values["scenario.window_max"]),
            seeds=values["scenario.seeds"], pos_noise=values["scenario.pos_noise"],
            vel_noise=values["scenario.vel_noise"], init_jitter=values["scenario.init_jitter"],
            sim_dt=values["sim.dt"], kp_rate=values["sim.kp_rate"], theta_hover=values["sim.theta_hover"],
            control_rate=values["nmpc.rate"], ocp=ocp, neighbor_mode=values["nmpc.neighbor_mode"],
            throttle_kf=values["nmpc.throttle_kf"], model_path=values["predictor.model"],
            baseline=values["predictor.baseline"], downwash=cfgmod.downwash_from(values),
            values=dict(values))


def _plain(v):
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def load_scenario(source=None, **overrides) -> ScenarioConfig:
    """Scenario from a file path, config text or key dict; ``None`` gives the defaults.

    ``overrides`` replace keys after loading, with ``__`` standing for the dot
    (``predictor__baseline=True``).
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = dict(source)
    elif "=" in str(source) or "\n" in str(source):
        raw = cfgmod.parse_text(source)
    else:
        try:
            with open(source) as fh:
                raw = cfgmod.parse_text(fh.read())
        except OSError as exc:
            raise cfgmod.ConfigError(f"cannot read scenario {source}: {exc}") from exc
    values = cfgmod.load(raw, SCENARIO_SCHEMA)
    for key, val in overrides.items():
        key = key.replace("__", ".")
        if key not in SCENARIO_SCHEMA:
            raise cfgmod.ConfigError(f"unknown config key: {key}")
        values[key] = val
    return ScenarioConfig.from_values(values)

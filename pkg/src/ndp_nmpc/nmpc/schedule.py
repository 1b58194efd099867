"""Per-node disturbance schedules from the learned predictor and a neighbour's plan."""

from __future__ import annotations

import numpy as np

from ..predictor import MlpModel, predict_horizon
from .rti import DisturbanceSchedule


def resample_zoh(states, t_states0, dt_states, t_query):
    """Zero-order hold of a uniformly sampled sequence at query times.

    Query times before the first sample take the first one, times past the
    last sample hold the last one.
    """
    states = np.asarray(states, dtype=float)
    idx = np.floor((np.asarray(t_query, dtype=float) - t_states0) / dt_states + 1e-9).astype(int)
    return states[np.clip(idx, 0, len(states) - 1)]


def build_schedule(model: MlpModel | None, ego_states, neighbor_states) -> DisturbanceSchedule:
    """Predicted disturbance at every node from ``neighbour - ego`` relative states.

    Both sequences must already be on the ego node grid (see
    :func:`resample_zoh`) and hold ``[p, v, ...]`` rows. ``model=None`` is
    the baseline and yields an all-zero schedule.
    """
    ego = np.asarray(getattr(ego_states, "x", ego_states), dtype=float)
    nb = np.asarray(getattr(neighbor_states, "x", neighbor_states), dtype=float)
    if ego.ndim != 2 or nb.ndim != 2 or len(ego) != len(nb):
        raise ValueError("ego and neighbour sequences must have the same number of nodes")
    if model is None:
        return DisturbanceSchedule(np.zeros((len(ego), 3)))
    rel_p = nb[:, 0:3] - ego[:, 0:3]
    rel_v = nb[:, 3:6] - ego[:, 3:6]
    return DisturbanceSchedule(predict_horizon(model, rel_p, rel_v))

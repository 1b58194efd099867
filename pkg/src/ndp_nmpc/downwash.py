"""Synthetic ground-truth downwash force on a quadrotor flying under a neighbour.

Relative quantities use ``rel = other - ego``; a positive ``rel_p[2]`` means the
neighbour is above the ego vehicle and its wake pushes the ego vehicle down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DownwashParams:
    A: float = 4.0
    sigma_r: float = 0.2
    z0: float = 0.6
    z_cut: float = 2.0
    v_adv: float = 0.05

    def __post_init__(self):
        if self.A < 0:
            raise ValueError("downwash.A must be non-negative")
        if self.sigma_r <= 0:
            raise ValueError("downwash.sigma_r must be positive")
        if not 0 < self.z0 < self.z_cut:
            raise ValueError("downwash requires 0 < z0 < z_cut")


def vertical_profile(dz, dw: DownwashParams):
    """``(dz/z0) exp(1 - dz/z0)`` on ``(0, z_cut]``, zero elsewhere; peaks at 1 for dz = z0."""
    dz = np.asarray(dz, dtype=float)
    s = dz / dw.z0
    active = (dz > 0.0) & (dz <= dw.z_cut)
    return np.where(active, s * np.exp(1.0 - s), 0.0)


def true_disturbance(rel_p, rel_v, dw: DownwashParams = DownwashParams()):
    """Inertial disturbance force [N] felt by the ego vehicle. Broadcasts over rows."""
    rel_p = np.asarray(rel_p, dtype=float)
    rel_v = np.asarray(rel_v, dtype=float)
    dx = rel_p[..., 0] - dw.v_adv * rel_v[..., 0]
    dy = rel_p[..., 1] - dw.v_adv * rel_v[..., 1]
    radial = np.exp(-(dx * dx + dy * dy) / (2.0 * dw.sigma_r**2))
    fz = -dw.A * radial * vertical_profile(rel_p[..., 2], dw)
    zeros = np.zeros_like(fz)
    return np.stack([zeros, zeros, fz], axis=-1)

"""Calibration objective: negative (mean) square error against observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, GridMismatchError
from .ode import TimeGrid, Trajectory


@dataclass(frozen=True)
class ObservationSet:
    """Observed populations with per-(compartment, time) availability.

    ``values`` is (n_observations, 4) with NaN at unavailable entries;
    ``mask`` marks the available ones. A time point with an all-False
    mask row is simply not observed.
    """

    grid: TimeGrid
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shape = (self.grid.n_observations, 4)
        if self.values.shape != shape or self.mask.shape != shape:
            raise ValueError(f"values/mask must have shape {shape}")
        if not self.mask.any():
            raise EmptyMaskError("observation set has no entries")
        if not np.isfinite(self.values[self.mask]).all():
            raise ValueError("masked-in values must be finite")
        if np.isfinite(self.values[~self.mask]).any():
            raise ValueError("values present outside the mask")

    @property
    def observed_rows(self) -> np.ndarray:
        """Boolean row filter: time points with at least one entry."""
        return self.mask.any(axis=1)

    @property
    def n_observed_times(self) -> int:
        return int(self.observed_rows.sum())


@dataclass(frozen=True)
class MetricValue:
    """Objective value with its per-time-point breakdown."""

    value: float
    per_time: np.ndarray  # one entry per observed time point

    def __post_init__(self):
        if self.value > 0.0:
            raise ValueError("negative-SE objective cannot be positive")
        if not np.isclose(self.value, self.per_time.sum(), rtol=0, atol=1e-12):
            raise ValueError("value does not match the per-time breakdown")


def neg_se_at_t(sim, obs, mask, t_count: int) -> float:
    """Single-time term: -(1/t_count) * sum of masked squared residuals."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("no compartment observed at this time point")
    d = np.asarray(obs, dtype=float)[mask]
    y = np.asarray(sim, dtype=float)[mask]
    return float(-np.sum((d - y) ** 2) / t_count)


def objective(traj: Trajectory, obs: ObservationSet) -> MetricValue:
    """Sum of per-time negative square errors over observed time points."""
    if traj.grid != obs.grid:
        raise GridMismatchError(f"{traj.grid} != {obs.grid}")
    rows = np.flatnonzero(obs.observed_rows)
    t_count = rows.size
    per_time = np.array(
        [
            neg_se_at_t(traj.states[t], obs.values[t], obs.mask[t], t_count)
            for t in rows
        ]
    )
    return MetricValue(value=float(per_time.sum()), per_time=per_time)

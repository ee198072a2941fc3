"""Synthetic scenario generation and real infectious-series ingestion."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    GapInSeriesError,
    MalformedRowError,
    MissingCountryError,
)
from .metrics import ObservationSet, objective
from .ode import (
    GROUND_TRUTH_X,
    NONLINEAR_LAMBDA_COEFFS,
    CompartmentState,
    RateNet,
    RateSpec,
    TimeGrid,
    Trajectory,
    simulate,
)

LINEAR_GT = "linear"
NOISY_LINEAR_GT = "noisy_linear"
NONLINEAR_LAMBDA_GT = "nonlinear_lambda"
GROUND_TRUTHS = (LINEAR_GT, NOISY_LINEAR_GT, NONLINEAR_LAMBDA_GT)

# 1% of the total population; unit-variance noise on fractions would
# swamp the signal entirely.
DEFAULT_NOISE_SD = 0.01

LOG_MSE_FLOOR = 1e-300

CSV_HEADER = ["date", "country", "infectious"]
SERIES_START = dt.date(2020, 6, 1)
SERIES_DAYS = 365


@dataclass(frozen=True)
class ScenarioSpec:
    """Synthetic-data configuration: ground truth, noise, and masking."""

    ground_truth: str = LINEAR_GT
    noise_sd: float | None = None  # None: 0, or the default for noisy runs
    hide_susceptible: bool = False
    horizon: float = 30.0
    observation_every_days: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.ground_truth not in GROUND_TRUTHS:
            raise ValueError(f"unknown ground truth {self.ground_truth!r}")
        if self.noise_sd is not None and self.noise_sd < 0:
            raise ValueError("noise sd must be >= 0")

    @property
    def effective_noise_sd(self) -> float:
        if self.noise_sd is not None:
            return self.noise_sd
        return DEFAULT_NOISE_SD if self.ground_truth == NOISY_LINEAR_GT else 0.0


@dataclass(frozen=True)
class Scenario:
    """Generated data: noisy masked observations plus the hidden truth."""

    spec: ScenarioSpec
    obs: ObservationSet  # what calibration sees
    truth_obs: ObservationSet  # noiseless, same mask; evaluation only
    truth: Trajectory  # full hidden trajectory

    @property
    def grid(self) -> TimeGrid:
        return self.obs.grid


def ground_truth_rates(name: str) -> RateSpec:
    if name in (LINEAR_GT, NOISY_LINEAR_GT):
        return RateSpec.from_point(GROUND_TRUTH_X)
    return RateSpec.log_nonlinear(NONLINEAR_LAMBDA_COEFFS, *GROUND_TRUTH_X[1:])


def make_scenario(spec: ScenarioSpec) -> Scenario:
    """Simulate the hidden process, add seeded noise, apply the mask."""
    grid = TimeGrid.every_n_days(spec.observation_every_days, horizon=spec.horizon)
    init = CompartmentState(0.99, 0.01, 0.0, 0.0)
    truth = simulate(ground_truth_rates(spec.ground_truth), init, grid)

    mask = np.ones((grid.n_observations, 4), dtype=bool)
    mask[0, :] = False  # the fixed initial state is not an observation
    if spec.hide_susceptible:
        mask[:, 0] = False

    clean = np.where(mask, truth.states, np.nan)
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x0B5]))
    noise = rng.standard_normal(clean.shape) * spec.effective_noise_sd
    noisy = np.where(mask, truth.states + noise, np.nan)
    return Scenario(
        spec=spec,
        obs=ObservationSet(grid, noisy, mask),
        truth_obs=ObservationSet(grid, clean, mask.copy()),
        truth=truth,
    )


def calibration_model(scenario: Scenario):
    """Simulator closure for the model being calibrated (linear rates)."""
    grid = scenario.grid
    init = CompartmentState(0.99, 0.01, 0.0, 0.0)

    def model(x):
        return simulate(RateSpec.from_point(x), init, grid)

    return model


def logmse_of_trajectory(traj: Trajectory, scenario: Scenario) -> float:
    """log10 MSE of a simulated trajectory against the noiseless masked data."""
    value = objective(traj, scenario.truth_obs).value
    return math.log10(max(-value, LOG_MSE_FLOOR))


def eval_against_truth(x, scenario: Scenario) -> float:
    """Simulate the calibration model at x and score it against the truth."""
    return logmse_of_trajectory(calibration_model(scenario)(x), scenario)


def pointwise_quarantine_rate(traj: Trajectory, spec: RateSpec) -> np.ndarray:
    """The quarantine rate along a trajectory, recomputed state by state."""
    from .ode import _fraction_rates

    out = np.empty(traj.states.shape[0])
    n = traj.total
    for k, row in enumerate(traj.states):
        out[k] = _fraction_rates(spec, row[0] / n, row[1] / n, row[2] / n, row[3] / n)[1]
    return out


# ---------------------------------------------------------------------------
# Real-series ingestion


@dataclass(frozen=True)
class RealSeries:
    """A contiguous daily infectious-count series for one country."""

    country: str
    dates: tuple
    counts: np.ndarray

    def __post_init__(self):
        if len(self.dates) != self.counts.size:
            raise ValueError("dates and counts differ in length")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise ValueError("dates must be consecutive")

    @property
    def i0(self) -> float:
        return float(self.counts[0])


def load_covid_csv(path, country, start=SERIES_START, days=SERIES_DAYS) -> RealSeries:
    """Read the `date,country,infectious` file and cut the daily window.

    Raises MalformedRowError (with the line number) on schema violations
    and duplicates, MissingCountryError when the country never appears,
    and GapInSeriesError listing any dates missing from the window.
    """
    by_date = {}
    country_seen = False
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRowError(1, "empty file") from None
        if header != CSV_HEADER:
            raise MalformedRowError(1, f"header must be {','.join(CSV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise MalformedRowError(line_no, f"expected 3 columns, got {len(row)}")
            raw_date, row_country, raw_count = row
            try:
                day = dt.date.fromisoformat(raw_date)
            except ValueError:
                raise MalformedRowError(line_no, f"bad date {raw_date!r}") from None
            if row_country != country:
                continue
            country_seen = True
            try:
                count = float(raw_count)
            except ValueError:
                raise MalformedRowError(line_no, f"bad count {raw_count!r}") from None
            if not math.isfinite(count) or count < 0:
                raise MalformedRowError(line_no, f"count {raw_count} out of range")
            if day in by_date:
                raise MalformedRowError(line_no, f"duplicate date {day.isoformat()}")
            by_date[day] = count
    if not country_seen:
        raise MissingCountryError(country)
    wanted = [start + dt.timedelta(days=k) for k in range(days)]
    missing = [d for d in wanted if d not in by_date]
    if missing:
        raise GapInSeriesError(d.isoformat() for d in missing)
    return RealSeries(
        country=country,
        dates=tuple(wanted),
        counts=np.array([by_date[d] for d in wanted]),
    )


def save_series_csv(series: RealSeries, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for day, count in zip(series.dates, series.counts):
            writer.writerow([day.isoformat(), series.country, repr(float(count))])


def synthetic_infectious_series(seed=0, days=SERIES_DAYS, i0=1000.0, total=50_000.0,
                                rate_coeffs=(0.9, 0.2, 0.2), net=None):
    """Daily infectious counts from a known neural-rate model.

    Used to build recoverable targets for the two-stage calibration.
    Returns (series, generating RateSpec).
    """
    net = net if net is not None else RateNet.random(seed)
    spec = RateSpec.neural(net, *rate_coeffs)
    grid = TimeGrid.daily(horizon=float(days - 1))
    init = CompartmentState(total - i0, i0, 0.0, 0.0, total=total)
    traj = simulate(spec, init, grid)
    return traj.column("I").copy(), spec

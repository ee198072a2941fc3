"""End-to-end calibration loops.

``run_bo`` is the sequential BO workflow: start from a random design of
2D+1 points, then alternate surrogate refits, acquisition maximization,
and simulator queries; the recommendation is the maximizer of the final
expected metric. ``run_two_stage`` calibrates the linear-rate model
first and then trains a neural quarantine rate by windowed stochastic
gradient descent on the infectious series.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .acquisition import (
    DG_CF,
    EI,
    KG,
    KG_CF,
    KG_FN,
    AcquisitionSpec,
    BaseSampleBank,
    Decision,
    baseline_max,
    maximize_acquisition,
    maximize_expected_metric,
)
from ._saa import build_saa
from .errors import DivergenceError, OptimizationFailure
from .funcnet import COMPOSITE, FULL, FunctionNetwork, fit_network, prune_metric_edges
from .gp import SurrogateNode
from .metrics import MetricValue, ObservationSet, objective
from .ode import CompartmentState, RateNet, RateSpec, TimeGrid, Trajectory, simulate

LOG_MSE_FLOOR = 1e-300


@dataclass(frozen=True)
class Bounds:
    """Per-dimension box, with optionally log-scaled dimensions."""

    lower: np.ndarray
    upper: np.ndarray
    log_scale: np.ndarray

    @classmethod
    def unit(cls, dim: int) -> "Bounds":
        return cls(np.zeros(dim), np.ones(dim), np.zeros(dim, dtype=bool))

    @classmethod
    def box(cls, lower, upper, log_scale=None) -> "Bounds":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if log_scale is None:
            log_scale = np.zeros(lower.size, dtype=bool)
        log_scale = np.asarray(log_scale, dtype=bool)
        if np.any(lower >= upper):
            raise ValueError("lower bounds must be below upper bounds")
        if np.any(log_scale & (lower <= 0)):
            raise ValueError("log-scaled dimensions need positive bounds")
        return cls(lower, upper, log_scale)

    @property
    def dim(self) -> int:
        return self.lower.size

    def from_unit(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = self.lower + u * (self.upper - self.lower)
        ls = self.log_scale
        if ls.any():
            out = out.copy()
            lo, hi = np.log(self.lower[ls]), np.log(self.upper[ls])
            out[..., ls] = np.exp(lo + u[..., ls] * (hi - lo))
        return out

    def to_unit(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = (x - self.lower) / (self.upper - self.lower)
        ls = self.log_scale
        if ls.any():
            out = out.copy()
            lo, hi = np.log(self.lower[ls]), np.log(self.upper[ls])
            out[..., ls] = (np.log(x[..., ls]) - lo) / (hi - lo)
        return out


@dataclass(frozen=True)
class CalibrationPoint:
    """A calibration parameter vector together with its box."""

    values: np.ndarray
    bounds: Bounds

    def __post_init__(self):
        if self.values.size != self.bounds.dim:
            raise ValueError("dimension mismatch")


@dataclass
class IterationRecord:
    iteration: int
    x: np.ndarray
    z: tuple
    acq_value: float
    objective_value: float
    best_logmse: float
    wall_ms: float
    fallback: bool = False


@dataclass
class BORunState:
    """History, telemetry, and recommendation of one BO calibration run."""

    history: list  # (x_physical, Trajectory, MetricValue)
    n_iterations: int
    budget: int
    bounds: Bounds
    seed: int
    spec: AcquisitionSpec
    records: list = field(default_factory=list)
    x_best: np.ndarray | None = None
    n_queries: int = 0
    _final_model: object = None
    _final_bank: BaseSampleBank | None = None
    _obs: ObservationSet | None = None

    @property
    def recommendation(self) -> CalibrationPoint:
        return CalibrationPoint(self.x_best, self.bounds)


def log_mse(metric_value: float) -> float:
    """log10 of the (floored) mean square error implied by the objective."""
    return math.log10(max(-metric_value, LOG_MSE_FLOOR))


def init_design(dim: int, bounds: Bounds, seed: int) -> list[CalibrationPoint]:
    """2*dim + 1 uniform points in the box (log dims drawn log-uniformly)."""
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD5160]))
    unit = rng.random((2 * dim + 1, dim))
    return [CalibrationPoint(bounds.from_unit(u), bounds) for u in unit]


def _mode_for(kind: str):
    if kind in (EI, KG):
        return None
    return COMPOSITE if kind in (KG_CF, DG_CF) else FULL


def _fit_model(kind, unit_history, obs, network, time_indices, fit_restarts, seed):
    if kind in (EI, KG):
        X = np.array([u for u, _, _ in unit_history])
        y = np.array([m.value for _, _, m in unit_history])
        return SurrogateNode.fit(X, y, restarts=fit_restarts, seed=seed)
    pairs = [(u, traj) for u, traj, _ in unit_history]
    return fit_network(pairs, network, _mode_for(kind), time_indices=time_indices,
                       restarts=fit_restarts, seed=seed)


def _bank_dims(kind, obs, time_indices):
    if kind in (EI, KG):
        return 1, 1
    return 4, len(time_indices)


def run_bo(model, obs: ObservationSet, spec: AcquisitionSpec, N: int, bounds: Bounds,
           seed: int, *, network: FunctionNetwork | None = None,
           fit_restarts: int = 8, on_iteration=None) -> BORunState:
    """Sequential BO calibration of the simulator closure ``model``.

    ``model`` maps a physical parameter vector to a Trajectory. Exactly
    ``2D+1+N`` simulator queries are performed; a failed acquisition
    maximization falls back to one uniform random in-bounds query.
    """
    if N < 0:
        raise ValueError("budget must be >= 0")
    n_queries = 0

    def query(x_phys):
        nonlocal n_queries
        n_queries += 1
        return model(x_phys)

    comp_mask = obs.mask.any(axis=0)
    time_indices = np.flatnonzero(obs.observed_rows)
    network = prune_metric_edges(network or FunctionNetwork.siqr(), comp_mask)

    design = init_design(bounds.dim, bounds, seed)
    history = []
    for p in design:
        traj = query(p.values)
        history.append((p.values, traj, objective(traj, obs)))

    unit_history = [(bounds.to_unit(x), traj, m) for x, traj, m in history]
    unit_box = np.tile([0.0, 1.0], (bounds.dim, 1))
    records = []
    best_obj = max(m.value for _, _, m in history)

    for n in range(N):
        t0 = time.perf_counter()
        keys = np.random.SeedSequence([int(seed), int(spec.seed), 0xB0, n]).generate_state(3)
        surrogate = _fit_model(spec.kind, unit_history, obs, network, time_indices,
                               fit_restarts, int(keys[0]))
        n_comp, n_t = _bank_dims(spec.kind, obs, time_indices)
        bank = BaseSampleBank.generate(spec, n_comp, n_t, bounds.dim, int(keys[1]))
        incumbent = unit_history[int(np.argmax([m.value for _, _, m in unit_history]))][0]
        fallback = False
        try:
            decision = maximize_acquisition(surrogate, obs, spec, unit_box, bank,
                                            incumbent=incumbent)
        except OptimizationFailure:
            rng = np.random.default_rng(int(keys[2]))
            decision = Decision(x_next=rng.random(bounds.dim), z_next=(1, 1, 1, 1),
                                acq_value=float("nan"))
            fallback = True
        x_phys = bounds.from_unit(decision.x_next)
        traj = query(x_phys)
        metric = objective(traj, obs)
        history.append((x_phys, traj, metric))
        unit_history.append((decision.x_next, traj, metric))
        best_obj = max(best_obj, metric.value)
        rec = IterationRecord(
            iteration=n + 1,
            x=x_phys,
            z=decision.z_next,
            acq_value=decision.acq_value,
            objective_value=metric.value,
            best_logmse=log_mse(best_obj),
            wall_ms=(time.perf_counter() - t0) * 1e3,
            fallback=fallback,
        )
        records.append(rec)
        if on_iteration is not None:
            on_iteration(rec)

    final_keys = np.random.SeedSequence([int(seed), int(spec.seed), 0xB0, N]).generate_state(2)
    final_model = _fit_model(spec.kind, unit_history, obs, network, time_indices,
                             fit_restarts, int(final_keys[0]))
    n_comp, n_t = _bank_dims(spec.kind, obs, time_indices)
    final_bank = BaseSampleBank.generate(spec, n_comp, n_t, bounds.dim, int(final_keys[1]))

    state = BORunState(
        history=history, n_iterations=N, budget=N, bounds=bounds, seed=seed,
        spec=spec, records=records, n_queries=n_queries,
        _final_model=final_model, _final_bank=final_bank, _obs=obs,
    )
    assert state.n_queries == len(design) + N
    state.x_best = recommend(state).values
    return state


def recommend(state: BORunState) -> CalibrationPoint:
    """Maximizer of the final expected metric; queried points win ties."""
    model, bank, obs = state._final_model, state._final_bank, state._obs
    problem = build_saa(model, obs, bank.eps_outer, bank.eps_inner)
    unit_hist = [state.bounds.to_unit(x) for x, _, _ in state.history]
    incumbent = unit_hist[int(np.argmax([m.value for _, _, m in state.history]))]
    lo = np.zeros(state.bounds.dim)
    hi = np.ones(state.bounds.dim)
    starts = [lo + s * (hi - lo) for s in bank.inner_starts] + [incumbent]
    unit_box = [(0.0, 1.0)] * state.bounds.dim
    x_unit, _ = maximize_expected_metric(problem, starts, unit_box,
                                         state.spec.inner_maxiter,
                                         candidates=np.array(unit_hist))
    return CalibrationPoint(state.bounds.from_unit(x_unit), state.bounds)


# ---------------------------------------------------------------------------
# Two-stage calibration


@dataclass(frozen=True)
class TwoStageConfig:
    """Settings for the two-stage neural-rate calibration."""

    stage1_spec: AcquisitionSpec = AcquisitionSpec(KG_CF)
    stage1_iters: int = 50
    batch_size: int = 30
    total_iterations: int = 2000
    learning_rate: float = 5e-4
    window_days: int = 30
    nn_init_seed: int = 0
    seed: int = 0
    fit_restarts: int = 8
    dt: float = 0.05  # simulator step (stage 1 and reporting)
    train_dt: float = 0.5  # unrolled-window step (stage 2 training)

    def __post_init__(self):
        if self.window_days < 1 or self.batch_size < 1:
            raise ValueError("window and batch must be positive")


@dataclass
class CalibrationResult:
    """Outputs of both stages."""

    x_first: CalibrationPoint
    stage1: BORunState
    net: RateNet
    rate_coeffs: np.ndarray  # (x2, x3, x4) after stage 2
    i0: float  # x5, frozen after stage 1
    total_population: float  # x6, frozen after stage 1
    losses: np.ndarray
    diverged: bool = False
    diverged_step: int | None = None


def infectious_bounds(i0_observed: float) -> Bounds:
    """Six-dimensional box: four unit rates plus log-scaled I(0) and N."""
    return Bounds.box(
        lower=[0.0, 0.0, 0.0, 0.0, 0.1 * i0_observed, 10.0 * i0_observed],
        upper=[1.0, 1.0, 1.0, 1.0, 10.0 * i0_observed, 1000.0 * i0_observed],
        log_scale=[False, False, False, False, True, True],
    )


def linear_six_param_model(grid: TimeGrid):
    """Simulator closure for the six-parameter linear-rate model."""

    def model(x):
        x = np.asarray(x, dtype=float)
        i0, total = x[4], x[5]
        init = CompartmentState(total - i0, i0, 0.0, 0.0, total=total)
        return simulate(RateSpec.from_point(x[:4]), init, grid)

    return model


def infectious_observation_set(series: np.ndarray, grid: TimeGrid) -> ObservationSet:
    """Observation set exposing only the infectious compartment."""
    n = grid.n_observations
    values = np.full((n, 4), np.nan)
    mask = np.zeros((n, 4), dtype=bool)
    values[:, 1] = np.asarray(series, dtype=float)
    mask[:, 1] = True
    return ObservationSet(grid, values, mask)


def run_two_stage(config: TwoStageConfig, obs_infectious) -> CalibrationResult:
    """Calibrate the linear model by BO, then train the neural rate by SGD.

    ``obs_infectious`` is a daily infectious-count series. Stage 2
    descends the windowed squared error of simulated vs observed counts,
    sampling ``batch_size`` random window starts per step; gradients run
    through the unrolled fixed-step integrator.
    """
    from .twostage import WindowTrainer

    series = np.asarray(obs_infectious, dtype=float)
    if series.size < config.window_days + 1:
        raise ValueError("series shorter than one training window")
    horizon = series.size - 1
    grid = TimeGrid.daily(horizon=float(horizon), dt=config.dt)
    obs = infectious_observation_set(series, grid)
    bounds = infectious_bounds(float(series[0]))
    model = linear_six_param_model(grid)

    stage1 = run_bo(model, obs, config.stage1_spec, config.stage1_iters, bounds,
                    config.seed, fit_restarts=config.fit_restarts)
    x1 = stage1.x_best
    base_traj = model(x1)

    trainer = WindowTrainer(
        ihat=series,
        support=base_traj.states,  # daily S, I, Q, R from the stage-1 model
        rate_coeffs=x1[1:4],
        total_population=x1[5],
        config=config,
    )
    try:
        losses = trainer.train()
        diverged, diverged_step = False, None
    except DivergenceError as err:
        warnings.warn(f"stage 2 aborted: {err}; keeping stage-1 parameters")
        losses = np.asarray(trainer.loss_history)
        diverged, diverged_step = True, err.step

    if diverged:
        net = RateNet.random(config.nn_init_seed)
        coeffs = x1[1:4].copy()
    else:
        net = trainer.export_net()
        coeffs = trainer.export_rate_coeffs()
    return CalibrationResult(
        x_first=CalibrationPoint(x1, bounds),
        stage1=stage1,
        net=net,
        rate_coeffs=coeffs,
        i0=float(x1[4]),
        total_population=float(x1[5]),
        losses=np.asarray(losses),
        diverged=diverged,
        diverged_step=diverged_step,
    )

"""SIQR compartment dynamics under pluggable rate parameterizations.

State ordering is (S, I, Q, R) everywhere. The integrator works on
population fractions internally; populations are scaled by the state's
total on the way out, so rate coefficients keep the same meaning whether
the model runs on fractions (total = 1) or person counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalFailure

COMPARTMENTS = ("S", "I", "Q", "R")

LINEAR = "linear"
LOG_NONLINEAR = "log_nonlinear"
NEURAL_NET = "neural_net"

# Undershoot smaller than this is roundoff and is clamped to zero;
# anything larger is treated as an integration failure.
NEGATIVE_CLAMP = 1e-12
CONSERVATION_RTOL = 1e-9


class RateNet:
    """Small MLP mapping [I, S, R] fractions to a rate multiplier in (0, 1).

    Layers: 3->20 tanh, three 20->20 tanh, 20->1 sigmoid.
    """

    LAYER_SIZES = (3, 20, 20, 20, 20, 1)

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        expected = list(zip(self.LAYER_SIZES[:-1], self.LAYER_SIZES[1:]))
        got = [(w.shape[0], w.shape[1]) for w in self.weights]
        if got != expected:
            raise ValueError(f"layer shapes {got} != required {expected}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape mismatch")

    @classmethod
    def random(cls, seed) -> "RateNet":
        """Seeded init, uniform in +-1/sqrt(fan_in) per layer."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(cls.LAYER_SIZES[:-1], cls.LAYER_SIZES[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    def __call__(self, features: np.ndarray) -> float:
        """Evaluate on a single [I, S, R] feature vector."""
        h = np.asarray(features, dtype=float)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
        z = h @ self.weights[-1] + self.biases[-1]
        return float(1.0 / (1.0 + np.exp(-z[0])))

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def to_vector(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec) -> "RateNet":
        vec = np.asarray(vec, dtype=float)
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(cls.LAYER_SIZES[:-1], cls.LAYER_SIZES[1:]):
            weights.append(vec[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            biases.append(vec[pos : pos + fan_out])
            pos += fan_out
        if pos != vec.size:
            raise ValueError(f"expected {pos} parameters, got {vec.size}")
        return cls(weights, biases)


@dataclass(frozen=True)
class RateSpec:
    """Rate-function parameterization of the SIQR system.

    The quarantine rate lambda depends on the variant; the infection
    coefficient (x2), recovery-from-quarantine rate delta (x3) and
    recovery rate gamma (x4) are shared by all variants.
    """

    variant: str
    beta_coef: float
    delta: float
    gamma: float
    lam_coef: float | None = None
    lam_coeffs: np.ndarray | None = None
    net: RateNet | None = None

    def __post_init__(self):
        vals = [self.beta_coef, self.delta, self.gamma]
        if self.variant == LINEAR:
            if self.lam_coef is None:
                raise ValueError("linear variant requires lam_coef")
            vals.append(self.lam_coef)
        elif self.variant == LOG_NONLINEAR:
            if self.lam_coeffs is None or np.asarray(self.lam_coeffs).shape != (3,):
                raise ValueError("log_nonlinear variant requires 3 lambda coefficients")
            vals.extend(np.asarray(self.lam_coeffs))
        elif self.variant == NEURAL_NET:
            if self.net is None:
                raise ValueError("neural_net variant requires a RateNet")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("rate coefficients must be finite")

    @classmethod
    def linear(cls, lam_coef, beta_coef, delta, gamma) -> "RateSpec":
        return cls(LINEAR, beta_coef, delta, gamma, lam_coef=float(lam_coef))

    @classmethod
    def log_nonlinear(cls, lam_coeffs, beta_coef, delta, gamma) -> "RateSpec":
        return cls(
            LOG_NONLINEAR,
            beta_coef,
            delta,
            gamma,
            lam_coeffs=np.asarray(lam_coeffs, dtype=float),
        )

    @classmethod
    def neural(cls, net, beta_coef, delta, gamma) -> "RateSpec":
        return cls(NEURAL_NET, beta_coef, delta, gamma, net=net)

    @classmethod
    def from_point(cls, x) -> "RateSpec":
        """Linear spec from a calibration vector (x1, x2, x3, x4)."""
        x = np.asarray(x, dtype=float)
        return cls.linear(x[0], x[1], x[2], x[3])


# Ground-truth coefficients of the simulated scenarios.
GROUND_TRUTH_X = np.array([0.1, 0.9, 0.2, 0.2])
NONLINEAR_LAMBDA_COEFFS = np.array([0.3, 0.06, 0.12])


@dataclass(frozen=True)
class CompartmentState:
    """Populations of the four compartments plus the conserved total."""

    s: float
    i: float
    q: float
    r: float
    total: float = 1.0

    def __post_init__(self):
        vals = (self.s, self.i, self.q, self.r)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite compartment value")
        if min(vals) < -NEGATIVE_CLAMP * max(self.total, 1.0):
            raise ValueError("negative compartment value")
        if abs(sum(vals) - self.total) > CONSERVATION_RTOL * self.total:
            raise ValueError("compartments do not sum to the total population")

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.i, self.q, self.r])


@dataclass(frozen=True)
class TimeGrid:
    """Fixed-step integration grid with subsampled observation points."""

    t0: float = 0.0
    horizon: float = 30.0
    dt: float = 0.05
    observation_stride: int = 20

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be an integer number of dt steps")
        if self.observation_stride < 1:
            raise ValueError("observation_stride must be >= 1")
        if round(steps) % self.observation_stride != 0:
            raise ValueError("observation points must include the horizon")

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.dt)

    @property
    def n_observations(self) -> int:
        return self.n_steps // self.observation_stride + 1

    @property
    def observation_times(self) -> np.ndarray:
        idx = np.arange(self.n_observations) * self.observation_stride
        return self.t0 + idx * self.dt

    @classmethod
    def daily(cls, horizon=30.0, dt=0.05, t0=0.0) -> "TimeGrid":
        return cls(t0=t0, horizon=horizon, dt=dt, observation_stride=round(1.0 / dt))

    @classmethod
    def every_n_days(cls, n_days, horizon=30.0, dt=0.05, t0=0.0) -> "TimeGrid":
        return cls(t0=t0, horizon=horizon, dt=dt, observation_stride=round(n_days / dt))


@dataclass(frozen=True)
class Trajectory:
    """Compartment populations at each observation time of a grid."""

    grid: TimeGrid
    states: np.ndarray  # (n_observations, 4), columns S, I, Q, R
    total: float = 1.0

    def __post_init__(self):
        if self.states.shape != (self.grid.n_observations, 4):
            raise ValueError("state array does not match the grid")

    @property
    def times(self) -> np.ndarray:
        return self.grid.observation_times

    def column(self, name: str) -> np.ndarray:
        return self.states[:, COMPARTMENTS.index(name)]


def _fraction_rates(spec: RateSpec, s, i, q, r):
    """(beta, lambda, delta, gamma) per day from fraction-space populations."""
    beta = spec.beta_coef * i
    if spec.variant == LINEAR:
        lam = spec.lam_coef * i
    elif spec.variant == LOG_NONLINEAR:
        c = spec.lam_coeffs
        arg = i * c[0] + s * c[1] + r * c[2] + 1.0
        if arg <= 0.0:
            raise DomainError(f"log argument {arg} <= 0 in quarantine rate")
        lam = math.log(arg) * i
    else:
        lam = spec.net(np.array([i, s, r])) * i
    return beta, lam, spec.delta, spec.gamma


def eval_rates(state: CompartmentState, spec: RateSpec):
    """Evaluate (beta, lambda, delta, gamma) at a state.

    Rates are computed on population fractions, so for total = 1 the
    linear variant returns exactly (x2*I, x1*I, x3, x4).
    """
    n = state.total
    rates = _fraction_rates(spec, state.s / n, state.i / n, state.q / n, state.r / n)
    if not all(math.isfinite(v) for v in rates):
        raise NumericalFailure(f"non-finite rates {rates}")
    if min(rates) < 0.0:
        raise NumericalFailure(f"negative rate in {rates}")
    return rates


def _deriv(spec: RateSpec, y):
    s, i, q, r = y
    beta, lam, delta, gamma = _fraction_rates(spec, s, i, q, r)
    return (
        -beta * s,
        beta * s - lam * i - gamma * i,
        lam * i - delta * q,
        gamma * i + delta * q,
    )


def simulate(spec: RateSpec, init: CompartmentState, grid: TimeGrid) -> Trajectory:
    """Integrate the SIQR system with classical fixed-step RK4.

    Returns populations (in the units of ``init``) at the grid's
    observation times. Raises NumericalFailure if any component becomes
    NaN or undershoots zero by more than roundoff.
    """
    n = init.total
    y = (init.s / n, init.i / n, init.q / n, init.r / n)
    dt = grid.dt
    out = np.empty((grid.n_observations, 4))
    out[0] = y
    row = 1
    for step in range(1, grid.n_steps + 1):
        k1 = _deriv(spec, y)
        k2 = _deriv(spec, tuple(y[j] + 0.5 * dt * k1[j] for j in range(4)))
        k3 = _deriv(spec, tuple(y[j] + 0.5 * dt * k2[j] for j in range(4)))
        k4 = _deriv(spec, tuple(y[j] + dt * k3[j] for j in range(4)))
        y = tuple(
            y[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            for j in range(4)
        )
        y = _check_state(y, step)
        if step % grid.observation_stride == 0:
            out[row] = y
            row += 1
    return Trajectory(grid=grid, states=out * n, total=n)


def _check_state(y, step):
    clamped = []
    for v in y:
        if not math.isfinite(v):
            raise NumericalFailure(f"non-finite state at step {step}")
        if v < 0.0:
            if v < -NEGATIVE_CLAMP:
                raise NumericalFailure(f"component {v} below -{NEGATIVE_CLAMP} at step {step}")
            v = 0.0
        clamped.append(v)
    if abs(sum(clamped) - 1.0) > CONSERVATION_RTOL:
        raise NumericalFailure(f"conservation violated at step {step}")
    return tuple(clamped)

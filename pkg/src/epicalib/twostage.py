"""Windowed SGD training of the neural quarantine rate (stage 2).

The trainer replaces the linear quarantine rate by a small MLP and
descends the squared error between simulated and observed infectious
populations over randomly placed windows. Each window is re-simulated
from the stage-1 support trajectory with a fixed-step RK4 integrator
unrolled inside the autodiff graph, so gradients are exact for the
discretized objective. The loss is the squared infectious-count error,
so its scale (and the scale the learning rate acts on) follows the
data's population units.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DivergenceError
from .ode import RateNet

torch.set_num_threads(1)


def _net_params(seed):
    net = RateNet.random(seed)
    weights = [torch.tensor(w, dtype=torch.float64, requires_grad=True) for w in net.weights]
    biases = [torch.tensor(b, dtype=torch.float64, requires_grad=True) for b in net.biases]
    return weights, biases


@torch.jit.script
def _siqr_deriv(y, weights: list[torch.Tensor], biases: list[torch.Tensor], coeffs):
    s, i, q, r = y[:, 0], y[:, 1], y[:, 2], y[:, 3]
    h = torch.stack([i, s, r], dim=-1)
    for idx in range(len(weights) - 1):
        h = torch.tanh(h @ weights[idx] + biases[idx])
    lam = torch.sigmoid((h @ weights[-1] + biases[-1]).squeeze(-1)) * i
    beta = coeffs[0] * i
    delta, gamma = coeffs[1], coeffs[2]
    return torch.stack(
        [-beta * s, beta * s - lam * i - gamma * i, lam * i - delta * q,
         gamma * i + delta * q],
        dim=-1,
    )


@torch.jit.script
def _window_infectious(
    init,  # (B, 4) fractions, columns S, I, Q, R
    weights: list[torch.Tensor],
    biases: list[torch.Tensor],
    coeffs,  # (3,) = (x2, x3, x4)
    dt: float,
    steps_per_day: int,
    days: int,
):
    """Daily infectious fractions over one window, shape (B, days + 1)."""
    y = init
    outputs = [y[:, 1]]
    for _day in range(days):
        for _step in range(steps_per_day):
            k1 = _siqr_deriv(y, weights, biases, coeffs)
            k2 = _siqr_deriv(y + 0.5 * dt * k1, weights, biases, coeffs)
            k3 = _siqr_deriv(y + 0.5 * dt * k2, weights, biases, coeffs)
            k4 = _siqr_deriv(y + dt * k3, weights, biases, coeffs)
            y = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        outputs.append(y[:, 1])
    return torch.stack(outputs, dim=-1)


class WindowTrainer:
    """Plain SGD over (network weights, x2..x4) with frozen I(0) and N."""

    def __init__(self, ihat, support, rate_coeffs, total_population, config):
        self.ihat = np.asarray(ihat, dtype=float)
        self.support = np.asarray(support, dtype=float)  # daily (S, I, Q, R)
        if self.support.shape[0] != self.ihat.size:
            raise ValueError("support trajectory must cover every observed day")
        self.total = float(total_population)
        self.config = config
        self.weights, self.biases = _net_params(config.nn_init_seed)
        self.coeffs = torch.tensor(np.asarray(rate_coeffs, dtype=float),
                                   requires_grad=True)  # (x2, x3, x4)
        self.rng = np.random.default_rng(
            np.random.SeedSequence([int(config.seed), 0x57A6E2])
        )
        self.loss_history: list[float] = []
        dt = config.train_dt
        self._steps_per_day = round(1.0 / dt)
        if abs(self._steps_per_day * dt - 1.0) > 1e-9:
            raise ValueError("train_dt must divide one day")

    @property
    def parameters(self):
        return self.weights + self.biases + [self.coeffs]

    def window_loss(self, starts) -> torch.Tensor:
        """Mean squared infectious-count error over the given windows."""
        starts = np.asarray(starts, dtype=int)
        days = self.config.window_days
        init = self.support[starts].copy()
        init[:, 1] = self.ihat[starts]  # observed infectious replaces simulated
        sim = _window_infectious(
            torch.tensor(init / self.total, dtype=torch.float64),
            self.weights, self.biases, self.coeffs,
            self.config.train_dt, self._steps_per_day, days,
        ) * self.total
        target = np.stack([self.ihat[s : s + days + 1] for s in starts])
        return ((sim - torch.tensor(target, dtype=torch.float64)) ** 2).mean()

    def loss_and_grad(self, starts):
        """Window loss plus the gradient over all packed parameters."""
        for p in self.parameters:
            p.grad = None
        loss = self.window_loss(starts)
        loss.backward()
        grad = np.concatenate([
            p.grad.detach().numpy().ravel() if p.grad is not None
            else np.zeros(p.numel())
            for p in self.parameters
        ])
        return float(loss.detach()), grad

    def pack(self) -> np.ndarray:
        return np.concatenate([p.detach().numpy().ravel() for p in self.parameters])

    def unpack(self, vec):
        vec = np.asarray(vec, dtype=float)
        pos = 0
        with torch.no_grad():
            for p in self.parameters:
                n = p.numel()
                p.copy_(torch.tensor(vec[pos : pos + n].reshape(p.shape)))
                pos += n
        assert pos == vec.size

    def _draw_starts(self):
        hi = self.ihat.size - self.config.window_days
        return self.rng.integers(0, hi, size=self.config.batch_size)

    def train(self) -> np.ndarray:
        """Run the configured number of SGD steps; returns per-step losses."""
        opt = torch.optim.SGD(self.parameters, lr=self.config.learning_rate)
        for step in range(self.config.total_iterations):
            starts = self._draw_starts()
            opt.zero_grad()
            loss = self.window_loss(starts)
            if not torch.isfinite(loss):
                raise DivergenceError(step)
            self.loss_history.append(float(loss.detach()))
            loss.backward()
            opt.step()
            with torch.no_grad():
                self.coeffs.clamp_(0.0, 1.0)  # rates stay in their box
        return np.asarray(self.loss_history)

    def export_net(self) -> RateNet:
        return RateNet(
            [w.detach().numpy().copy() for w in self.weights],
            [b.detach().numpy().copy() for b in self.biases],
        )

    def export_rate_coeffs(self) -> np.ndarray:
        return self.coeffs.detach().numpy().copy()

"""Acquisition strategies: EI, blackbox KG, KG-CF, KG-FN, and decoupled DG-CF.

The knowledge-gradient family is estimated by sample-average
approximation: per BO iteration a bank of standard-normal draws and
restart points is frozen, making every acquisition surface deterministic
and reproducible. ``kg_estimate``/``dg_estimate`` are the nested
reference estimators (fantasy-conditioned surrogates, inner maximization
per fantasy); ``maximize_acquisition`` optimizes the same surface
jointly over the candidate and the per-fantasy inner maximizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from ._saa import build_saa
from .errors import (
    InnerOptimizationFailure,
    OptimizationFailure,
    ZeroSubsetError,
)
from .funcnet import NetworkSurrogate, sample_network
from .gp import SurrogateNode, sobol_points

EI = "EI"
KG = "KG"
KG_CF = "KG_CF"
KG_FN = "KG_FN"
DG_CF = "DG_CF"

KINDS = (EI, KG, KG_CF, KG_FN, DG_CF)
GRAYBOX_KINDS = (KG_CF, KG_FN, DG_CF)

Z_FULL = (1, 1, 1, 1)
DEFAULT_Z_SUBSETS = ((1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1), Z_FULL)


def all_z_subsets():
    """Every nonzero conditioning subset (full enumeration mode)."""
    out = []
    for bits in range(1, 16):
        out.append(tuple((bits >> i) & 1 for i in range(4)))
    return tuple(out)


@dataclass(frozen=True)
class AcquisitionSpec:
    """Configuration of one acquisition strategy."""

    kind: str
    K: int = 8
    L: int = 128
    restarts: int = 4
    inner_restarts: int = 4
    z_subsets: tuple = DEFAULT_Z_SUBSETS
    seed: int = 0
    inner_maxiter: int = 50
    joint_maxiter: int = 60

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown acquisition kind {self.kind!r}")
        if self.K < 1 or self.L < 1:
            raise ValueError("K and L must be >= 1")
        for z in self.z_subsets:
            if len(z) != 4 or not any(z):
                raise ValueError("z subsets must be nonzero 4-vectors")


@dataclass(frozen=True)
class BaseSampleBank:
    """Frozen standard-normal draws and restart points for one iteration."""

    eps_outer: np.ndarray  # (K, 4 or 1, T)
    eps_inner: np.ndarray  # (L, 4 or 1, T)
    outer_starts: np.ndarray  # (restarts, D) in the unit box
    inner_starts: np.ndarray  # (inner_restarts, D) in the unit box

    @classmethod
    def generate(cls, spec: AcquisitionSpec, n_compartments, n_times, dim, seed) -> "BaseSampleBank":
        keys = np.random.SeedSequence([int(seed), 0xBA5E]).generate_state(3)
        rng = np.random.default_rng(keys[0])
        return cls(
            eps_outer=rng.standard_normal((spec.K, n_compartments, n_times)),
            eps_inner=rng.standard_normal((spec.L, n_compartments, n_times)),
            outer_starts=sobol_points(spec.restarts, dim, int(keys[1])),
            inner_starts=sobol_points(spec.inner_restarts, dim, int(keys[2])),
        )


@dataclass(frozen=True)
class Decision:
    """Chosen query point, conditioning subset, and acquisition value."""

    x_next: np.ndarray
    z_next: tuple
    acq_value: float

    def __post_init__(self):
        if not any(self.z_next):
            raise ValueError("z must be nonzero")


# ---------------------------------------------------------------------------
# Expected improvement (closed form)


def _ei_value_grad(node: SurrogateNode, x, f_star, want_grad):
    m, v = node.posterior(x)
    jitter = node.hyperparams.noise_jitter
    if v <= 2.0 * jitter:
        val = max(m - f_star, 0.0)
        if not want_grad:
            return val, None
        dm, _ = node.posterior_grad(x)
        return val, dm if val > 0 else np.zeros_like(np.asarray(x, dtype=float))
    s = math.sqrt(v)
    u = (m - f_star) / s
    val = (m - f_star) * norm.cdf(u) + s * norm.pdf(u)
    if not want_grad:
        return val, None
    dm, dv = node.posterior_grad(x)
    ds = dv / (2.0 * s)
    return val, norm.cdf(u) * dm + norm.pdf(u) * ds


def ei(blackbox_node: SurrogateNode, x) -> float:
    """Closed-form expected improvement over the best observed objective."""
    f_star = float(np.max(blackbox_node.y))
    return _ei_value_grad(blackbox_node, x, f_star, want_grad=False)[0]


# ---------------------------------------------------------------------------
# Expected-metric machinery shared by the KG family


def maximize_expected_metric(problem, starts, bounds, maxiter=50, candidates=None):
    """Multi-start maximization of the L-sample expected metric.

    ``candidates`` (if given) are evaluated first and win ties, in order.
    Returns (argmax, max value).
    """
    best_x, best_u = None, -np.inf
    if candidates is not None and len(candidates):
        for x, u in zip(candidates, problem.u_values(np.atleast_2d(candidates))):
            if u > best_u:
                best_x, best_u = np.asarray(x, dtype=float), float(u)

    def neg(vec):
        u, grad = problem.u_value_grad(vec)
        return -u, -grad

    for s in starts:
        res = minimize(neg, np.asarray(s, dtype=float), jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": maxiter})
        if np.isfinite(res.fun) and -res.fun > best_u:
            best_x, best_u = res.x.copy(), -float(res.fun)
    if best_x is None:
        raise InnerOptimizationFailure("no restart produced a finite expected metric")
    return best_x, best_u


def _scaled_starts(unit_starts, bounds, extra=None):
    lo, hi = bounds[:, 0], bounds[:, 1]
    starts = [lo + s * (hi - lo) for s in unit_starts]
    if extra is not None:
        starts.append(np.asarray(extra, dtype=float))
    return starts


def baseline_max(model, obs, spec: AcquisitionSpec, bank: BaseSampleBank, bounds, incumbent=None):
    """Largest expected metric under the current posterior, and its argmax."""
    problem = build_saa(model, obs, bank.eps_outer, bank.eps_inner)
    starts = _scaled_starts(bank.inner_starts, bounds, incumbent)
    opt_bounds = [tuple(b) for b in bounds]
    return maximize_expected_metric(problem, starts, opt_bounds, spec.inner_maxiter)


# ---------------------------------------------------------------------------
# Nested reference estimators


def _fantasy_values(model, obs, x, eps_outer):
    """Reparametrized fantasy outputs at x, one row per outer sample."""
    if isinstance(model, SurrogateNode):
        m, v = model.posterior(x)
        return m + math.sqrt(v) * eps_outer[:, 0, 0]
    return np.stack([sample_network(model, x, eps_outer[k]) for k in range(eps_outer.shape[0])])


def _conditioned_model(model, x, values_k, z=None):
    """Fantasize the (z-selected) nodes on one outer sample's outputs."""
    if isinstance(model, SurrogateNode):
        return model.fantasize(x, values_k)
    new_nodes = {}
    for c in model.compartments:
        ci = model.comp_index(c)
        if z is not None and not z[ci]:
            new_nodes[c] = model.nodes[c]
            continue
        pidx = [model.comp_index(p) for p in model.parents[c]]
        rows = []
        for ti in range(model.n_times):
            row = np.concatenate([x, values_k[pidx, ti]]) if pidx else np.asarray(x, dtype=float)
            rows.append(model.nodes[c][ti].fantasize(row, values_k[ci, ti]))
        new_nodes[c] = rows
    return NetworkSurrogate(
        model.network, model.mode, model.grid, model.time_indices,
        model.x_dim, model.compartments, new_nodes, model.parents,
    )


def _inner_max(model, obs, spec, bank, bounds, inner_candidates):
    problem = build_saa(model, obs, bank.eps_outer, bank.eps_inner)
    if inner_candidates is not None:
        u = problem.u_values(np.atleast_2d(inner_candidates))
        i = int(np.argmax(u))
        return np.asarray(inner_candidates[i], dtype=float), float(u[i])
    starts = _scaled_starts(bank.inner_starts, bounds)
    return maximize_expected_metric(problem, starts, [tuple(b) for b in bounds],
                                    spec.inner_maxiter)


def kg_estimate(model, obs, x, spec: AcquisitionSpec, bank: BaseSampleBank,
                bounds=None, inner_candidates=None, ustar=None,
                return_per_fantasy=False):
    """Nested Monte-Carlo knowledge-gradient estimate at x.

    Draws K fantasy outputs at x, conditions the surrogate on each, and
    maximizes the L-sample expected metric per fantasy (by enumeration
    over ``inner_candidates`` when given, multi-start ascent otherwise).
    """
    x = np.asarray(x, dtype=float)
    if bounds is None:
        bounds = np.tile([0.0, 1.0], (x.size, 1))
    if ustar is None:
        _, ustar = _inner_max(model, obs, spec, bank, bounds, inner_candidates)
    values = _fantasy_values(model, obs, x, bank.eps_outer)
    per_fantasy = np.empty(spec.K)
    for k in range(spec.K):
        conditioned = _conditioned_model(model, x, values[k])
        _, per_fantasy[k] = _inner_max(conditioned, obs, spec, bank, bounds, inner_candidates)
    alpha = float(per_fantasy.mean() - ustar)
    if return_per_fantasy:
        return alpha, per_fantasy
    return alpha


def dg_estimate(model, obs, x, z, spec: AcquisitionSpec, bank: BaseSampleBank,
                bounds=None, inner_candidates=None, ustar=None,
                return_per_fantasy=False):
    """Decoupled estimate: condition only compartments with z_i = 1.

    With z all-ones this is, by construction, the same code path and
    value as ``kg_estimate``; proper subsets scale the conditioned term
    by 1/(number of conditioned compartments).
    """
    z = tuple(int(v) for v in z)
    if sum(z) == 0:
        raise ZeroSubsetError("z has no conditioned compartment")
    if z == Z_FULL:
        return kg_estimate(model, obs, x, spec, bank, bounds, inner_candidates,
                           ustar, return_per_fantasy)
    if isinstance(model, SurrogateNode):
        raise ValueError("decoupled conditioning needs a network surrogate")
    x = np.asarray(x, dtype=float)
    if bounds is None:
        bounds = np.tile([0.0, 1.0], (x.size, 1))
    if ustar is None:
        _, ustar = _inner_max(model, obs, spec, bank, bounds, inner_candidates)
    values = _fantasy_values(model, obs, x, bank.eps_outer)
    per_fantasy = np.empty(spec.K)
    for k in range(spec.K):
        conditioned = _conditioned_model(model, x, values[k], z=z)
        _, per_fantasy[k] = _inner_max(conditioned, obs, spec, bank, bounds, inner_candidates)
    alpha = float(per_fantasy.mean() / sum(z) - ustar)
    if return_per_fantasy:
        return alpha, per_fantasy
    return alpha


# ---------------------------------------------------------------------------
# Acquisition maximization


def _joint_value_grad(problem, cond, K, D):
    def neg(vec):
        u, grad = problem.joint_value_grad(vec[:D], vec[D:].reshape(K, D), cond)
        return -u, -grad

    return neg


def _maximize_joint(problem, cond, spec, bounds, starts, xprime_init):
    """Joint ascent over (x, inner maximizers); returns best per tie rule."""
    K, D = spec.K, bounds.shape[0]
    opt_bounds = [tuple(b) for b in bounds] * (K + 1)
    neg = _joint_value_grad(problem, cond, K, D)
    best = None  # (mean_k u, x)
    for s in starts:
        vec0 = np.concatenate([np.asarray(s, dtype=float), np.tile(xprime_init, K)])
        res = minimize(neg, vec0, jac=True, method="L-BFGS-B",
                       bounds=opt_bounds, options={"maxiter": spec.joint_maxiter})
        if np.isfinite(res.fun) and (best is None or -res.fun > best[0]):
            best = (-float(res.fun), res.x[:D].copy())
    return best


def _cond_for_z(problem, model, z):
    if isinstance(model, SurrogateNode):
        return [True]
    return [bool(z[model.comp_index(c)]) for c in model.compartments]


def maximize_acquisition(model, obs, spec: AcquisitionSpec, bounds,
                         bank: BaseSampleBank, incumbent=None) -> Decision:
    """Multi-start maximization of the selected acquisition.

    Restart points come from the bank's low-discrepancy set plus the
    incumbent; ties go to the earliest restart (and, for the decoupled
    kind, the earliest z subset).
    """
    bounds = np.asarray(bounds, dtype=float)
    starts = _scaled_starts(bank.outer_starts, bounds, incumbent)

    if spec.kind == EI:
        f_star = float(np.max(model.y))

        def neg_ei(v):
            val, grad = _ei_value_grad(model, v, f_star, want_grad=True)
            return -val, -grad

        best = None
        for s in starts:
            res = minimize(neg_ei, s, jac=True, method="L-BFGS-B",
                           bounds=[tuple(b) for b in bounds])
            if np.isfinite(res.fun) and (best is None or -res.fun > best[0]):
                best = (-float(res.fun), res.x.copy())
        if best is None:
            raise OptimizationFailure("all EI restarts failed")
        return Decision(x_next=best[1], z_next=Z_FULL, acq_value=best[0])

    problem = build_saa(model, obs, bank.eps_outer, bank.eps_inner)
    inner_starts = _scaled_starts(bank.inner_starts, bounds, incumbent)
    x_star, ustar = maximize_expected_metric(
        problem, inner_starts, [tuple(b) for b in bounds], spec.inner_maxiter
    )

    if spec.kind in (KG, KG_CF, KG_FN):
        cond = _cond_for_z(problem, model, Z_FULL)
        best = _maximize_joint(problem, cond, spec, bounds, starts, x_star)
        if best is None:
            raise OptimizationFailure("all acquisition restarts failed")
        return Decision(x_next=best[1], z_next=Z_FULL, acq_value=best[0] - ustar)

    assert spec.kind == DG_CF
    overall = None  # (value, x, z)
    for z in spec.z_subsets:
        z = tuple(int(v) for v in z)
        cond = _cond_for_z(problem, model, z)
        best = _maximize_joint(problem, cond, spec, bounds, starts, x_star)
        if best is None:
            continue
        mean_u, x_best = best
        if z == Z_FULL:
            value = mean_u - ustar
        else:
            value = mean_u / sum(z) - ustar
        if overall is None or value > overall[0]:
            overall = (value, x_best, z)
    if overall is None:
        raise OptimizationFailure("all decoupled restarts failed")
    return Decision(x_next=overall[1], z_next=overall[2], acq_value=overall[0])

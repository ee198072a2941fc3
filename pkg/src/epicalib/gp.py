"""Exact Gaussian-process regression with a Matern-5/2 kernel.

Nodes normalize inputs to [0, 1] per dimension and standardize targets;
hyperparameters live in that normalized space and are converted back to
data units at the public interface. The constant mean and the signal
variance are profiled out of the marginal likelihood in closed form, so
hyperparameter search runs over log-lengthscales only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import FactorizationFailure

SQRT5 = math.sqrt(5.0)

JITTER_REL_MIN = 1e-8
JITTER_REL_MAX = 1e-2

LOG_LS_BOUNDS = (math.log(0.05), math.log(10.0))
SIGNAL_SD_BOUNDS = (0.05, 20.0)

# Targets whose total spread is below this are treated as constant.
DEGENERATE_SPAN = 1e-12


def sobol_points(n, d, seed) -> np.ndarray:
    """First n points of a scrambled Sobol sequence (power-of-2 draw, sliced)."""
    if n <= 0:
        return np.zeros((0, d))
    sampler = qmc.Sobol(d, scramble=True, seed=seed)
    m = max(1, math.ceil(math.log2(n)))
    return sampler.random_base2(m)[:n]


def matern52(X1, X2, lengthscales, signal_variance):
    """Kernel matrix between two point sets, shape (m, n)."""
    diff = (X1[:, None, :] - X2[None, :, :]) / lengthscales
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    return signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def matern52_with_query_grad(Q, X, lengthscales, signal_variance):
    """Kernel matrix (m, n) and its gradient w.r.t. the query rows (m, n, d)."""
    diff = (Q[:, None, :] - X[None, :, :]) / lengthscales
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    e = np.exp(-SQRT5 * r)
    k = signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * e
    gfac = -(5.0 / 3.0) * signal_variance * (1.0 + SQRT5 * r) * e
    grad = gfac[:, :, None] * diff / lengthscales
    return k, grad


def _unit_matern52_with_ls_grads(X, lengthscales):
    """Unit-variance kernel of one point set plus per-log-lengthscale grads."""
    diff = (X[:, None, :] - X[None, :, :]) / lengthscales
    u2 = diff * diff
    r = np.sqrt(np.sum(u2, axis=-1))
    e = np.exp(-SQRT5 * r)
    k = (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * e
    gfac = (5.0 / 3.0) * (1.0 + SQRT5 * r) * e
    grads = gfac[None, :, :] * np.moveaxis(u2, -1, 0)  # (d, n, n)
    return k, grads


@dataclass(frozen=True)
class Transform:
    """Affine input/target normalization frozen at fit time."""

    in_shift: np.ndarray
    in_scale: np.ndarray
    out_shift: float
    out_scale: float

    @classmethod
    def from_data(cls, X, y) -> "Transform":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        lo, hi = X.min(axis=0), X.max(axis=0)
        scale = np.where(hi - lo > 1e-12, hi - lo, 1.0)
        sd = float(y.std()) if y.size else 1.0
        return cls(lo, scale, float(y.mean()) if y.size else 0.0, sd if sd > 1e-12 else 1.0)

    def x_to_norm(self, X):
        return (np.asarray(X, dtype=float) - self.in_shift) / self.in_scale

    def y_to_norm(self, y):
        return (np.asarray(y, dtype=float) - self.out_shift) / self.out_scale

    def y_from_norm(self, y):
        return np.asarray(y, dtype=float) * self.out_scale + self.out_shift


@dataclass(frozen=True)
class KernelHyperparams:
    """Matern-5/2 kernel with constant mean and fixed observation jitter."""

    lengthscales: np.ndarray
    signal_variance: float
    mean_const: float
    noise_jitter: float
    degenerate: bool = False

    def __post_init__(self):
        if np.any(np.asarray(self.lengthscales) <= 0):
            raise ValueError("lengthscales must be positive")
        if self.signal_variance <= 0:
            raise ValueError("signal variance must be positive")
        rel = self.noise_jitter / self.signal_variance
        if not (JITTER_REL_MIN * (1 - 1e-9) <= rel <= JITTER_REL_MAX * (1 + 1e-9)):
            raise ValueError(f"jitter/signal ratio {rel} outside [{JITTER_REL_MIN}, {JITTER_REL_MAX}]")


def _pooled_nll_and_grad(log_ls, blocks, jitter_rel):
    """Concentrated negative log marginal likelihood over pooled blocks.

    ``blocks`` is a list of (X_norm (n, d), Y_norm (n, m)) sharing one set
    of hyperparameters; each block has its own gram matrix and every
    column of Y is an independent target set. The constant mean and the
    signal variance are replaced by their exact maximizers (the variance
    clipped to its search box), and the gradient runs over log-lengthscales.
    """
    ls = np.exp(log_ls)
    d = ls.size
    chols, grams_grads, solved_y, solved_one = [], [], [], []
    num_mean = den_mean = 0.0
    for X, Y in blocks:
        M, dM = _unit_matern52_with_ls_grads(X, ls)
        M = M + jitter_rel * np.eye(X.shape[0])
        try:
            L = cholesky(M, lower=True)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros(d)
        a_y = cho_solve((L, True), Y)
        a_1 = cho_solve((L, True), np.ones(X.shape[0]))
        chols.append(L)
        grams_grads.append(dM)
        solved_y.append(a_y)
        solved_one.append(a_1)
        num_mean += a_y.sum()
        den_mean += Y.shape[1] * a_1.sum()
    mean = num_mean / den_mean
    quad = 0.0
    n_total = 0
    for (X, Y), a_y, a_1 in zip(blocks, solved_y, solved_one):
        B = a_y - mean * a_1[:, None]  # M^{-1} (Y - mean)
        quad += float(np.sum((Y - mean) * B))
        n_total += Y.size
    var = min(max(quad / n_total, SIGNAL_SD_BOUNDS[0] ** 2), SIGNAL_SD_BOUNDS[1] ** 2)

    nll = 0.5 * quad / var + 0.5 * n_total * math.log(var) + 0.5 * n_total * math.log(2 * math.pi)
    grad = np.zeros(d)
    for (X, Y), L, dM, a_y, a_1 in zip(blocks, chols, grams_grads, solved_y, solved_one):
        nll += Y.shape[1] * float(np.sum(np.log(np.diag(L))))
        Minv = cho_solve((L, True), np.eye(X.shape[0]))
        B = a_y - mean * a_1[:, None]
        for j in range(d):
            tr = float(np.sum(Minv * dM[j]))
            quad_j = float(np.sum(B * (dM[j] @ B)))
            grad[j] += 0.5 * Y.shape[1] * tr - 0.5 * quad_j / var
    return nll, grad


def _profiled_mean_var(log_ls, blocks, jitter_rel):
    ls = np.exp(log_ls)
    num = den = quad = 0.0
    n_total = 0
    parts = []
    for X, Y in blocks:
        M = matern52(X, X, ls, 1.0) + jitter_rel * np.eye(X.shape[0])
        L = cholesky(M, lower=True)
        a_y = cho_solve((L, True), Y)
        a_1 = cho_solve((L, True), np.ones(X.shape[0]))
        num += a_y.sum()
        den += Y.shape[1] * a_1.sum()
        parts.append((Y, a_y, a_1))
        n_total += Y.size
    mean = num / den
    for Y, a_y, a_1 in parts:
        quad += float(np.sum((Y - mean) * (a_y - mean * a_1[:, None])))
    var = min(max(quad / n_total, SIGNAL_SD_BOUNDS[0] ** 2), SIGNAL_SD_BOUNDS[1] ** 2)
    return mean, var


def fit_pooled(blocks, restarts=8, seed=0, jitter_rel=JITTER_REL_MIN):
    """Shared-hyperparameter MLE over normalized data blocks.

    Returns normalized-space KernelHyperparams. Degenerate (constant)
    targets short-circuit to a flagged prior.
    """
    all_targets = np.concatenate([Y.ravel() for _, Y in blocks])
    if all_targets.max() - all_targets.min() < DEGENERATE_SPAN:
        d = blocks[0][0].shape[1]
        var = SIGNAL_SD_BOUNDS[0] ** 2
        return KernelHyperparams(
            lengthscales=np.ones(d),
            signal_variance=var,
            mean_const=float(all_targets[0]),
            noise_jitter=JITTER_REL_MIN * var,
            degenerate=True,
        )
    d = blocks[0][0].shape[1]
    lo, hi = LOG_LS_BOUNDS
    starts = [np.full(d, math.log(0.5))]
    if restarts > 1:
        starts.extend(lo + (hi - lo) * sobol_points(restarts - 1, d, seed))
    best = None
    for x0 in starts:
        res = minimize(
            _pooled_nll_and_grad,
            x0,
            args=(blocks, jitter_rel),
            jac=True,
            method="L-BFGS-B",
            bounds=[(lo, hi)] * d,
            options={"maxiter": 60},
        )
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FactorizationFailure("no hyperparameter start produced a finite likelihood")
    mean, var = _profiled_mean_var(best.x, blocks, jitter_rel)
    return KernelHyperparams(
        lengthscales=np.exp(best.x),
        signal_variance=var,
        mean_const=mean,
        noise_jitter=jitter_rel * var,
    )


def fit_mle(inputs, targets, restarts=8, seed=0) -> KernelHyperparams:
    """MLE hyperparameters for one dataset, reported in data units."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if len(np.unique(X, axis=0)) < 2:
        raise ValueError("need at least 2 distinct inputs")
    tf = Transform.from_data(X, y)
    hyper = fit_pooled([(tf.x_to_norm(X), tf.y_to_norm(y)[:, None])], restarts, seed)
    return _hyper_to_raw(hyper, tf)


def _hyper_to_raw(hyper: KernelHyperparams, tf: Transform) -> KernelHyperparams:
    s2 = tf.out_scale**2
    return KernelHyperparams(
        lengthscales=hyper.lengthscales * tf.in_scale,
        signal_variance=hyper.signal_variance * s2,
        mean_const=hyper.mean_const * tf.out_scale + tf.out_shift,
        noise_jitter=hyper.noise_jitter * s2,
        degenerate=hyper.degenerate,
    )


class SurrogateNode:
    """One fitted GP: training data, hyperparameters, cached factorization."""

    def __init__(self, X, y, transform: Transform, hyper: KernelHyperparams):
        self.X = np.atleast_2d(np.asarray(X, dtype=float)).copy() if np.size(X) else np.zeros((0, len(hyper.lengthscales)))
        self.y = np.asarray(y, dtype=float).ravel().copy()
        self.transform = transform
        self.hyper = hyper  # normalized space
        self._Xn = transform.x_to_norm(self.X) if self.n else self.X
        self._factorize()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def _factorize(self):
        if self.n == 0:
            self.chol = np.zeros((0, 0))
            self.alpha = np.zeros(0)
            return
        h = self.hyper
        base = matern52(self._Xn, self._Xn, h.lengthscales, h.signal_variance)
        jitter = h.noise_jitter
        while True:
            try:
                self.chol = cholesky(base + jitter * np.eye(self.n), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 2.0
                if jitter > JITTER_REL_MAX * h.signal_variance:
                    raise FactorizationFailure(
                        f"gram matrix not PD at jitter cap {JITTER_REL_MAX}"
                    ) from None
        if jitter != h.noise_jitter:
            self.hyper = replace(h, noise_jitter=jitter)
        resid = self.transform.y_to_norm(self.y) - self.hyper.mean_const
        self.alpha = cho_solve((self.chol, True), resid)

    @classmethod
    def fit(cls, X, y, restarts=8, seed=0) -> "SurrogateNode":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        tf = Transform.from_data(X, y)
        hyper = fit_pooled([(tf.x_to_norm(X), tf.y_to_norm(y)[:, None])], restarts, seed)
        return cls(X, y, tf, hyper)

    @property
    def hyperparams(self) -> KernelHyperparams:
        """Hyperparameters converted to data units."""
        return _hyper_to_raw(self.hyper, self.transform)

    def _kvec(self, Qn):
        return matern52(Qn, self._Xn, self.hyper.lengthscales, self.hyper.signal_variance)

    def posterior_batch(self, Q):
        """Posterior means and variances (data units) at query rows."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        h, tf = self.hyper, self.transform
        if self.n == 0:
            m = np.full(Q.shape[0], h.mean_const)
            v = np.full(Q.shape[0], h.signal_variance)
        else:
            kq = self._kvec(tf.x_to_norm(Q))
            a = cho_solve((self.chol, True), kq.T)
            m = h.mean_const + kq @ self.alpha
            v = np.maximum(h.signal_variance - np.sum(kq * a.T, axis=1), 0.0)
        return tf.y_from_norm(m), v * tf.out_scale**2

    def posterior(self, q):
        m, v = self.posterior_batch(np.atleast_2d(q))
        return float(m[0]), float(v[0])

    def posterior_grad(self, q):
        """d(mean)/dq and d(variance)/dq in data units."""
        q = np.asarray(q, dtype=float)
        h, tf = self.hyper, self.transform
        if self.n == 0:
            return np.zeros_like(q), np.zeros_like(q)
        Qn = tf.x_to_norm(q[None, :])
        kq, gq = matern52_with_query_grad(Qn, self._Xn, h.lengthscales, h.signal_variance)
        a = cho_solve((self.chol, True), kq[0])
        dmean = gq[0].T @ self.alpha
        dvar = -2.0 * gq[0].T @ a
        scale = tf.out_scale / tf.in_scale
        return dmean * scale, dvar * tf.out_scale**2 / tf.in_scale

    def sample_reparam(self, q, epsilon: float) -> float:
        """mean + sd * epsilon at the query point."""
        m, v = self.posterior(q)
        return m + math.sqrt(v) * epsilon

    def log_marginal_likelihood(self) -> float:
        """Exact log marginal likelihood in data units."""
        resid = self.transform.y_to_norm(self.y) - self.hyper.mean_const
        val = (
            -0.5 * float(resid @ self.alpha)
            - float(np.sum(np.log(np.diag(self.chol))))
            - 0.5 * self.n * math.log(2 * math.pi)
        )
        return val - self.n * math.log(self.transform.out_scale)

    def fantasize(self, extra_input, extra_target) -> "SurrogateNode":
        """Condition on one hypothetical observation via a rank-1 update."""
        return FantasyUpdate(self, np.asarray(extra_input, dtype=float), float(extra_target)).apply()

    def refit_with(self, extra_input, extra_target) -> "SurrogateNode":
        """Full refit with the appended point, frozen transform and hypers."""
        X = np.vstack([self.X, np.atleast_2d(extra_input)])
        y = np.append(self.y, extra_target)
        return SurrogateNode(X, y, self.transform, self.hyper)


@dataclass(frozen=True)
class FantasyUpdate:
    """Pending rank-1 conditioning of a node on one hypothetical point."""

    base: SurrogateNode
    extra_input: np.ndarray
    extra_target: float

    def apply(self) -> SurrogateNode:
        node = self.base
        if node.n == 0:
            return node.refit_with(self.extra_input, self.extra_target)
        h, tf = node.hyper, node.transform
        xn = tf.x_to_norm(np.atleast_2d(self.extra_input))
        kvec = node._kvec(xn)[0]
        l = solve_triangular(node.chol, kvec, lower=True)
        d2 = h.signal_variance + h.noise_jitter - float(l @ l)
        if d2 <= 0.0:
            raise FactorizationFailure("fantasy update lost positive definiteness")
        new = SurrogateNode.__new__(SurrogateNode)
        new.X = np.vstack([node.X, np.atleast_2d(self.extra_input)])
        new.y = np.append(node.y, self.extra_target)
        new.transform = tf
        new.hyper = h
        new._Xn = np.vstack([node._Xn, xn])
        chol = np.zeros((node.n + 1, node.n + 1))
        chol[: node.n, : node.n] = node.chol
        chol[node.n, : node.n] = l
        chol[node.n, node.n] = math.sqrt(d2)
        new.chol = chol
        resid = tf.y_to_norm(new.y) - h.mean_const
        new.alpha = cho_solve((chol, True), resid)
        return new

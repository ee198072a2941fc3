import math

import numpy as np
import pytest

from epicalib.gp import (
    JITTER_REL_MIN,
    KernelHyperparams,
    SurrogateNode,
    Transform,
    fit_mle,
    fit_pooled,
    matern52,
)


def make_node(seed=0, n=6, d=2):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = np.sin(3 * X[:, 0]) + 0.5 * X.sum(axis=1) ** 2
    return SurrogateNode.fit(X, y, restarts=4, seed=seed)


def raw_lml(X, y, ls, var, mean, jitter):
    """Independent log-marginal-likelihood evaluation in data units."""
    n = len(y)
    K = matern52(X, X, np.atleast_1d(ls), var) + jitter * np.eye(n)
    L = np.linalg.cholesky(K)
    r = y - mean
    a = np.linalg.solve(L.T, np.linalg.solve(L, r))
    return float(-0.5 * r @ a - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi))


class TestFitMle:
    def test_constant_targets_flagged_degenerate(self):
        X = np.linspace(0, 1, 5)[:, None]
        hyper = fit_mle(X, np.full(5, 3.7))
        assert hyper.degenerate
        assert hyper.mean_const == pytest.approx(3.7)

    def test_beats_random_hyperparameters(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([0.0, 1.0])
        node = SurrogateNode.fit(X, y, restarts=8, seed=0)
        fitted = node.log_marginal_likelihood()
        rng = np.random.default_rng(42)
        for _ in range(20):
            ls = math.exp(rng.uniform(math.log(0.05), math.log(10.0)))
            sd = math.exp(rng.uniform(math.log(0.05), math.log(20.0)))
            hyper = KernelHyperparams(
                lengthscales=np.array([ls]),
                signal_variance=sd**2,
                mean_const=rng.uniform(-1, 2),
                noise_jitter=JITTER_REL_MIN * sd**2,
            )
            other = SurrogateNode(X, y, node.transform, hyper)
            assert fitted >= other.log_marginal_likelihood() - 1e-9

    def test_matches_grid_search_oracle(self):
        rng = np.random.default_rng(5)
        X = np.sort(rng.random(5))[:, None] * 3.0
        y = np.sin(2.0 * X[:, 0]) + 0.1 * X[:, 0]
        node = SurrogateNode.fit(X, y, restarts=8, seed=1)
        fitted = node.log_marginal_likelihood()
        span_x, sd_y = 3.0, y.std()
        best = -np.inf
        for ls in np.exp(np.linspace(math.log(0.05), math.log(10.0), 60)) * span_x:
            for sd in np.exp(np.linspace(math.log(0.05), math.log(20.0), 60)) * sd_y:
                Kbase = matern52(X, X, np.array([ls]), sd**2)
                K = Kbase + JITTER_REL_MIN * sd**2 * np.eye(5)
                L = np.linalg.cholesky(K)
                a1 = np.linalg.solve(L.T, np.linalg.solve(L, np.ones(5)))
                ay = np.linalg.solve(L.T, np.linalg.solve(L, y))
                mean = (np.ones(5) @ ay) / (np.ones(5) @ a1)
                best = max(best, raw_lml(X, y, ls, sd**2, mean, JITTER_REL_MIN * sd**2))
        assert abs(fitted - best) <= 0.5

    def test_requires_two_distinct_inputs(self):
        with pytest.raises(ValueError):
            fit_mle(np.zeros((3, 1)), np.array([1.0, 2.0, 3.0]))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(9)
        X = rng.random((6, 2))
        y = rng.random(6)
        a = fit_mle(X, y, restarts=4, seed=3)
        b = fit_mle(X, y, restarts=4, seed=3)
        assert np.array_equal(a.lengthscales, b.lengthscales)
        assert a.signal_variance == b.signal_variance


class TestPosterior:
    def test_prior_with_no_data(self):
        hyper = KernelHyperparams(np.array([1.0]), 2.0, 0.3, JITTER_REL_MIN * 2.0)
        node = SurrogateNode(np.zeros((0, 1)), np.zeros(0), Transform(np.zeros(1), np.ones(1), 0.0, 1.0), hyper)
        m, v = node.posterior(np.array([0.4]))
        assert m == 0.3 and v == 2.0

    def test_interpolates_training_points(self):
        node = make_node(seed=1)
        raw = node.hyperparams
        for i in range(node.n):
            m, v = node.posterior(node.X[i])
            assert abs(m - node.y[i]) <= 1e-6 * max(1.0, abs(node.y[i]))
            assert v <= 2.0 * raw.noise_jitter

    def test_two_point_closed_form(self):
        X = np.array([[0.2], [0.8]])
        y = np.array([1.0, -0.5])
        node = SurrogateNode.fit(X, y, restarts=4, seed=0)
        raw = node.hyperparams
        q = np.array([0.45])
        K = matern52(X, X, raw.lengthscales, raw.signal_variance) + raw.noise_jitter * np.eye(2)
        kq = matern52(q[None, :], X, raw.lengthscales, raw.signal_variance)[0]
        sol = np.linalg.solve(K, y - raw.mean_const)
        mean_oracle = raw.mean_const + kq @ sol
        var_oracle = raw.signal_variance - kq @ np.linalg.solve(K, kq)
        m, v = node.posterior(q)
        assert abs(m - mean_oracle) <= 1e-10
        assert abs(v - var_oracle) <= 1e-10

    def test_gradients_match_finite_differences(self):
        for seed in (2, 3):
            node = make_node(seed=seed)
            rng = np.random.default_rng(seed + 10)
            for _ in range(4):
                q = rng.random(node.dim)
                dm, dv = node.posterior_grad(q)
                h = 1e-5
                for j in range(node.dim):
                    e = np.zeros(node.dim)
                    e[j] = h
                    mp_, vp = node.posterior(q + e)
                    mm_, vm = node.posterior(q - e)
                    fd_m = (mp_ - mm_) / (2 * h)
                    fd_v = (vp - vm) / (2 * h)
                    assert dm[j] == pytest.approx(fd_m, rel=1e-4, abs=1e-8)
                    assert dv[j] == pytest.approx(fd_v, rel=1e-4, abs=1e-8)

    def test_permutation_invariance(self):
        node = make_node(seed=4)
        perm = np.random.default_rng(0).permutation(node.n)
        other = SurrogateNode(node.X[perm], node.y[perm], node.transform, node.hyper)
        rng = np.random.default_rng(1)
        Q = rng.random((8, node.dim))
        m1, v1 = node.posterior_batch(Q)
        m2, v2 = other.posterior_batch(Q)
        assert np.allclose(m1, m2, atol=1e-12, rtol=0)
        assert np.allclose(v1, v2, atol=1e-12, rtol=0)

    def test_duplicated_point_changes_little(self):
        node = make_node(seed=5)
        dup = node.refit_with(node.X[0], node.y[0])
        Q = np.random.default_rng(2).random((20, node.dim))
        m1, _ = node.posterior_batch(Q)
        m2, _ = dup.posterior_batch(Q)
        assert np.abs(m1 - m2).max() <= 1e-6


class TestFantasize:
    def test_condition_on_own_mean(self):
        node = make_node(seed=6)
        q = np.array([0.5, 0.5])
        m, _ = node.posterior(q)
        fant = node.fantasize(q, m)
        m2, v2 = fant.posterior(q)
        assert abs(m2 - m) <= 1e-8
        assert v2 <= 2.0 * fant.hyperparams.noise_jitter

    def test_far_query_recovers_prior(self):
        node = make_node(seed=7)
        fant = node.fantasize(np.array([0.5, 0.5]), 1.0)
        far = np.array([500.0, 500.0])
        m, v = fant.posterior(far)
        raw = fant.hyperparams
        assert abs(m - raw.mean_const) <= 1e-6
        assert abs(v - raw.signal_variance) <= 1e-6 * raw.signal_variance

    def test_matches_full_refit(self):
        rng = np.random.default_rng(8)
        X = rng.random((4, 2))
        y = rng.random(4)
        node = SurrogateNode.fit(X, y, restarts=4, seed=0)
        xf, yf = np.array([0.3, 0.7]), 0.55
        fant = node.fantasize(xf, yf)
        refit = node.refit_with(xf, yf)
        Q = rng.random((10, 2))
        mf, vf = fant.posterior_batch(Q)
        mr, vr = refit.posterior_batch(Q)
        assert np.abs(mf - mr).max() <= 1e-10
        assert np.abs(vf - vr).max() <= 1e-10

    def test_variance_nonincreasing(self):
        node = make_node(seed=9)
        fant = node.fantasize(np.array([0.4, 0.6]), 0.2)
        Q = np.random.default_rng(3).random((50, 2))
        _, v_before = node.posterior_batch(Q)
        _, v_after = fant.posterior_batch(Q)
        assert np.all(v_after <= v_before + 1e-10)

    def test_update_record_applies(self):
        from epicalib.gp import FantasyUpdate

        node = make_node(seed=10)
        upd = FantasyUpdate(node, np.array([0.2, 0.9]), 0.1)
        assert upd.apply().n == node.n + 1


class TestSampleReparam:
    def test_zero_epsilon_is_mean(self):
        node = make_node(seed=11)
        q = np.array([0.3, 0.3])
        m, _ = node.posterior(q)
        assert node.sample_reparam(q, 0.0) == m

    def test_symmetry(self):
        node = make_node(seed=12)
        q = np.array([0.6, 0.1])
        m, _ = node.posterior(q)
        up = node.sample_reparam(q, 1.0)
        down = node.sample_reparam(q, -1.0)
        assert up - m == pytest.approx(m - down, rel=1e-12)

    def test_monte_carlo_moments(self):
        node = make_node(seed=13)
        q = np.array([0.52, 0.48])
        m, v = node.posterior(q)
        eps = np.random.default_rng(100).standard_normal(100_000)
        samples = m + math.sqrt(v) * eps
        se_mean = math.sqrt(v / eps.size)
        assert abs(samples.mean() - m) <= 3 * se_mean
        se_var = v * math.sqrt(2.0 / eps.size)
        assert abs(samples.var() - v) <= 3 * se_var


class TestHyperparams:
    def test_jitter_range_enforced(self):
        with pytest.raises(ValueError):
            KernelHyperparams(np.array([1.0]), 1.0, 0.0, 0.5)
        with pytest.raises(ValueError):
            KernelHyperparams(np.array([1.0]), 1.0, 0.0, 1e-12)
        with pytest.raises(ValueError):
            KernelHyperparams(np.array([-1.0]), 1.0, 0.0, 1e-8)

    def test_pooled_fit_shares_hyperparameters(self):
        rng = np.random.default_rng(14)
        X = rng.random((8, 1))
        blocks = [(X, np.sin(4 * X) + 0.1 * t) for t in range(3)]
        hyper = fit_pooled(blocks, restarts=4, seed=0)
        assert hyper.lengthscales.shape == (1,)
        assert not hyper.degenerate

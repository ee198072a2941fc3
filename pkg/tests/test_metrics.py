import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epicalib.errors import EmptyMaskError, GridMismatchError
from epicalib.metrics import MetricValue, ObservationSet, neg_se_at_t, objective
from epicalib.ode import CompartmentState, RateSpec, TimeGrid, Trajectory, simulate

GT_SPEC = RateSpec.from_point([0.1, 0.9, 0.2, 0.2])
INIT = CompartmentState(0.99, 0.01, 0.0, 0.0)


def full_obs_from(traj: Trajectory) -> ObservationSet:
    mask = np.ones_like(traj.states, dtype=bool)
    return ObservationSet(traj.grid, traj.states.copy(), mask)


class TestNegSeAtT:
    def test_perfect_fit(self):
        sim = np.array([0.2, 0.3, 0.1, 0.4])
        assert neg_se_at_t(sim, sim, np.ones(4, bool), 5) == 0.0

    def test_full_mask_direct(self):
        val = neg_se_at_t([0, 0, 0, 0], [1, 2, 3, 4], np.ones(4, bool), 1)
        assert val == -30.0

    def test_mask_excludes_first_compartment(self):
        mask = np.array([False, True, True, True])
        val = neg_se_at_t([0, 0, 0, 0], [np.nan, 2, 3, 4], mask, 1)
        assert val == -29.0

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            neg_se_at_t([0, 0, 0, 0], [1, 2, 3, 4], np.zeros(4, bool), 1)


class TestObjective:
    def test_noiseless_self_fit(self):
        traj = simulate(GT_SPEC, INIT, TimeGrid.daily())
        res = objective(traj, full_obs_from(traj))
        assert abs(res.value) <= 1e-12

    def test_single_time_point_reduces(self):
        grid = TimeGrid.daily()
        values = np.full((31, 4), np.nan)
        mask = np.zeros((31, 4), bool)
        values[7] = [0.5, 0.2, 0.1, 0.2]
        mask[7] = True
        traj = simulate(GT_SPEC, INIT, grid)
        obs = ObservationSet(grid, values, mask)
        res = objective(traj, obs)
        expected = neg_se_at_t(traj.states[7], values[7], mask[7], 1)
        assert res.value == expected
        assert res.per_time.shape == (1,)

    def test_perturbed_parameters_match_recomputation(self):
        grid = TimeGrid.daily()
        truth = simulate(GT_SPEC, INIT, grid)
        obs = full_obs_from(truth)
        other = simulate(RateSpec.from_point([0.2, 0.8, 0.3, 0.1]), INIT, grid)
        res = objective(other, obs)
        # Straight-line recomputation from the two stored trajectories.
        t_count = 31
        expected = -(np.sum((truth.states - other.states) ** 2) / t_count)
        assert res.value == pytest.approx(expected, rel=1e-14)
        assert res.value < 0

    def test_grid_mismatch(self):
        traj = simulate(GT_SPEC, INIT, TimeGrid.daily())
        other_grid = TimeGrid.every_n_days(3)
        values = np.zeros((other_grid.n_observations, 4))
        obs = ObservationSet(other_grid, values, np.ones_like(values, bool))
        with pytest.raises(GridMismatchError):
            objective(traj, obs)

    def test_breakdown_sums_to_value(self):
        traj = simulate(GT_SPEC, INIT, TimeGrid.daily())
        other = simulate(RateSpec.from_point([0.3, 0.5, 0.1, 0.4]), INIT, traj.grid)
        res = objective(other, full_obs_from(traj))
        assert res.value == pytest.approx(res.per_time.sum(), rel=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(data=st.data())
    def test_swap_symmetry(self, data):
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        grid = TimeGrid.every_n_days(10)
        a = rng.random((grid.n_observations, 4))
        b = rng.random((grid.n_observations, 4))
        mask = np.ones_like(a, dtype=bool)
        va = objective(Trajectory(grid, a), ObservationSet(grid, b.copy(), mask)).value
        vb = objective(Trajectory(grid, b), ObservationSet(grid, a.copy(), mask)).value
        assert va == vb

    @settings(max_examples=30, deadline=None)
    @given(data=st.data())
    def test_mask_removal_identity(self, data):
        # Removing entries (keeping every time point nonempty) removes exactly
        # their squared residuals divided by the unchanged time count.
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        grid = TimeGrid.every_n_days(10)
        n = grid.n_observations
        sim = rng.random((n, 4))
        vals = rng.random((n, 4))
        keep = np.ones((n, 4), dtype=bool)
        drop_col = data.draw(st.integers(0, 3))
        keep[:, drop_col] = False
        full = objective(Trajectory(grid, sim), ObservationSet(grid, vals.copy(), np.ones((n, 4), bool))).value
        vals_masked = vals.copy()
        vals_masked[~keep] = np.nan
        masked = objective(Trajectory(grid, sim), ObservationSet(grid, vals_masked, keep)).value
        excluded = np.sum((vals[:, drop_col] - sim[:, drop_col]) ** 2) / n
        assert masked == pytest.approx(full + excluded, rel=1e-12, abs=1e-15)


class TestTypes:
    def test_observation_set_validation(self):
        grid = TimeGrid.daily()
        vals = np.zeros((31, 4))
        with pytest.raises(EmptyMaskError):
            ObservationSet(grid, np.full_like(vals, np.nan), np.zeros_like(vals, bool))
        bad = np.zeros_like(vals)
        mask = np.zeros_like(vals, bool)
        mask[0, 0] = True
        with pytest.raises(ValueError):
            ObservationSet(grid, bad, mask)  # values present outside the mask

    def test_metric_value_validation(self):
        with pytest.raises(ValueError):
            MetricValue(1.0, np.array([1.0]))
        with pytest.raises(ValueError):
            MetricValue(-1.0, np.array([-0.4]))

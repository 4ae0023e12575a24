import warnings
from datetime import date

import numpy as np
import pandas as pd
import pytest

from s2s_helper.errors import EmptyWindowError
from s2s_helper.grid_core import Climatology, FieldSeries, Grid
from s2s_helper.metrics import (
    EmpiricalDistribution,
    bias_map,
    bootstrap_ci,
    brier_skill_score,
    crps,
    crps_ensemble,
    fraction_above,
    geographic_loss,
    mean_skill,
    probabilistic_scores,
    skill,
    skill_series,
    spatial_skill,
    tercile_thresholds,
)
from tests.conftest import daily_series


def zero_climatology(grid: Grid) -> Climatology:
    return Climatology(grid, np.zeros((366, grid.size)), (2000, 2000))


def test_skill_identical_anomalies():
    assert skill(np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.zeros(3)) == pytest.approx(1.0, abs=1e-12)


def test_skill_orthogonal_anomalies():
    assert skill(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.zeros(2)) == pytest.approx(0.0, abs=1e-12)


def test_skill_exact_value():
    assert skill(np.array([3.0, 4.0]), np.array([4.0, 3.0]), np.zeros(2)) == pytest.approx(0.96, abs=1e-12)


def test_skill_undefined_for_zero_anomaly():
    assert np.isnan(skill(np.ones(2), np.array([2.0, 3.0]), np.ones(2)))


def test_skill_series_flags_undefined_dates():
    grid = Grid(((0.0, 0.0), (1.0, 0.0)))
    forecasts = daily_series(grid, date(2020, 1, 1), [[3.0, 4.0], [0.0, 0.0]])
    obs = daily_series(grid, date(2020, 1, 1), [[4.0, 3.0], [1.0, 2.0]])
    skills = skill_series(forecasts, obs, zero_climatology(grid))
    assert skills.iloc[0] == pytest.approx(0.96)
    assert np.isnan(skills.iloc[1])


def test_mean_skill():
    index = [date(2020, 1, d) for d in (1, 2, 3)]
    summary = mean_skill(pd.Series([np.nan, 0.2, 0.4], index=index), level=None)
    assert summary.mean == pytest.approx(0.3)
    assert summary.n_dates == 2
    assert summary.n_undefined == 1
    assert summary.per_date[date(2020, 1, 1)] is None
    assert summary.seasons == {"DJF": pytest.approx(0.3)}


def test_mean_skill_needs_a_defined_date():
    with pytest.raises(EmptyWindowError):
        mean_skill(pd.Series([np.nan], index=[date(2020, 1, 1)]))


def test_mean_skill_interval_is_deterministic():
    skills = pd.Series(np.linspace(-0.2, 0.8, 40), index=[date(2020, 1, 1 + i % 28) if i < 28 else date(2020, 2, i - 27) for i in range(40)])
    first = mean_skill(skills, seed=5, resamples=200)
    second = mean_skill(skills, seed=5, resamples=200)
    assert (first.ci_low, first.ci_high) == (second.ci_low, second.ci_high)
    assert first.ci_low < first.mean < first.ci_high


def test_bootstrap_constant_values():
    assert bootstrap_ci(np.full(10, 0.7), resamples=100) == pytest.approx((0.7, 0.7))


def test_bootstrap_agrees_across_seeds():
    values = np.repeat([0.0, 1.0], 50)
    lo_a, hi_a = bootstrap_ci(values, 0.95, 10_000, seed=1)
    lo_b, hi_b = bootstrap_ci(values, 0.95, 10_000, seed=2)
    assert lo_a < 0.5 < hi_a
    assert abs((hi_a - lo_a) - (hi_b - lo_b)) < 0.02


def test_bootstrap_empty():
    with pytest.raises(EmptyWindowError):
        bootstrap_ci([])


def test_spatial_skill_perfect_and_climatological():
    grid = Grid(((0.0, 0.0), (1.0, 0.0)))
    obs = daily_series(grid, date(2020, 1, 1), [[1.0, -1.0], [2.0, 0.5], [-1.0, 1.0]])
    clim = zero_climatology(grid)
    assert np.allclose(spatial_skill(obs, obs, clim), 1.0)
    assert np.isnan(spatial_skill(obs.with_values(np.zeros((3, 2))), obs, clim)).all()


def test_spatial_skill_matches_direct_correlation():
    grid = Grid(((0.0, 0.0),))
    forecasts = daily_series(grid, date(2020, 1, 1), [1.0, 2.0, -0.5])
    obs = daily_series(grid, date(2020, 1, 1), [0.5, 1.0, 1.0])
    f, y = np.array([1.0, 2.0, -0.5]), np.array([0.5, 1.0, 1.0])
    expected = f @ y / (np.linalg.norm(f) * np.linalg.norm(y))
    assert spatial_skill(forecasts, obs, zero_climatology(grid))[0] == pytest.approx(expected, abs=1e-12)


def test_fraction_above():
    spatial = np.array([0.2, 0.4, 0.6])
    assert fraction_above(spatial, -1.01) == 1.0
    assert fraction_above(spatial, 1.0) == 0.0
    assert fraction_above(spatial, 0.3) == pytest.approx(2 / 3)
    with pytest.raises(EmptyWindowError):
        fraction_above(np.array([np.nan]), 0.0)


def test_bias_map():
    grid = Grid(((0.0, 0.0), (1.0, 0.0)))
    obs = daily_series(grid, date(2020, 1, 1), [[1.0, 2.0], [3.0, 5.0]])
    assert np.allclose(bias_map(obs.with_values(obs.values + 2.0), obs), 2.0)
    assert np.allclose(bias_map(obs, obs), 0.0)
    forecasts = obs.with_values([[2.0, 2.0], [3.0, 3.0]])
    assert np.allclose(bias_map(forecasts, obs), [0.5, -1.0])


def test_geographic_loss():
    assert geographic_loss(np.ones(3), np.ones(3), "MSE") == 0.0
    assert geographic_loss(np.array([3.0, 4.0]), np.zeros(2), "MSE") == pytest.approx(12.5)
    assert geographic_loss(np.array([3.0, 4.0]), np.zeros(2), "RMSE") == pytest.approx(np.sqrt(12.5))
    assert geographic_loss(np.full(4, -2.0), np.zeros(4), "RMSE") == pytest.approx(2.0)


def test_crps_two_members():
    assert crps(EmpiricalDistribution(np.array([0.0, 1.0])), 0.0) == pytest.approx(0.25)


def crps_by_integration(members: np.ndarray, y: float) -> float:
    # the integrand is constant between consecutive breakpoints
    members = np.sort(members)
    breaks = np.sort(np.append(members, y))
    left, right = breaks[:-1], breaks[1:]
    cdf = np.searchsorted(members, left, side="right") / members.size
    step = (left >= y).astype(np.float64)
    return float(np.sum((cdf - step) ** 2 * (right - left)))


def test_crps_matches_integration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        members = rng.normal(size=int(rng.integers(1, 9))) * rng.uniform(0.1, 5.0)
        y = float(rng.normal(0.0, 3.0))
        assert crps(EmpiricalDistribution(members), y) == pytest.approx(crps_by_integration(members, y), abs=1e-6)


def test_crps_ensemble_matches_pairwise_form():
    rng = np.random.default_rng(1)
    members = rng.normal(size=(6, 3))
    y = rng.normal(size=3)
    expected = [crps(EmpiricalDistribution(members[:, g]), y[g]) for g in range(3)]
    assert np.allclose(crps_ensemble(members, y), expected, atol=1e-12)


def test_brier_skill_score_reference_cases():
    y = np.array([0.0, 2.0, 1.0])
    x = np.array([1.0, 1.0, 1.5])
    outcome = (y <= x).astype(float)
    perfect = np.where(outcome[None, :] > 0, x - 1.0, x + 1.0).repeat(3, axis=0)
    assert brier_skill_score(perfect, y, x) == pytest.approx(1.0)
    # two of three members at or below the threshold everywhere
    climatological = np.stack([x - 1.0, x - 0.5, x + 1.0])
    assert brier_skill_score(climatological, y, x) == pytest.approx(0.0)


def test_brier_skill_score_direct_formula():
    members = np.array([[0.0, 3.0], [2.0, 1.0]])
    y = np.array([0.5, 0.5])
    x = np.array([1.0, 1.0])
    probability = np.array([0.5, 0.5])
    outcome = np.array([1.0, 1.0])
    expected = 1 - np.mean((probability - outcome) ** 2) / np.mean((2 / 3 - outcome) ** 2)
    assert brier_skill_score(members, y, x) == pytest.approx(expected)
    dists = [EmpiricalDistribution(members[:, g]) for g in range(2)]
    assert brier_skill_score(dists, y, x) == pytest.approx(expected)


def test_brier_skill_score_empty_input_raises_without_warning():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(EmptyWindowError, match="no outcomes"):
            brier_skill_score(np.zeros((3, 0)), np.zeros(0), np.zeros(0))


def test_tercile_thresholds_and_scores():
    grid = Grid(((0.0, 0.0),))
    start = date(2001, 1, 1)
    n_days = (date(2003, 12, 31) - start).days + 1
    years = np.asarray([(start.toordinal() + i) for i in range(n_days)])
    values = np.asarray([date.fromordinal(int(o)).year - 2000 for o in years], dtype=np.float64)
    obs = FieldSeries(grid, [date.fromordinal(int(o)) for o in years], values)
    thresholds = tercile_thresholds(obs, (2001, 2003))
    assert thresholds.series([date(2010, 5, 5)])[0, 0] == pytest.approx(np.quantile([1.0, 2.0, 3.0], 2 / 3))
    members = np.array([[[1.0], [3.0], [4.0]]])
    scores = probabilistic_scores(members, np.array([[2.0]]), thresholds.series([date(2010, 5, 5)]), ["2010-05-05"])
    assert list(scores.columns) == ["date", "crps", "brier"]
    assert scores["brier"].iloc[0] == pytest.approx((1 / 3 - 1.0) ** 2)

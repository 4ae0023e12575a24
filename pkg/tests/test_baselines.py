from datetime import date

import numpy as np
import pytest

from s2s_helper import settings
from s2s_helper.baselines.loess import LoessDebiasing, loess_apply, loess_fit, loess_smooth
from s2s_helper.baselines.operational import (
    OperationalDebiasing,
    build_multimodel_archive,
    multimodel_mean,
    operational_debias,
)
from s2s_helper.baselines.quantile_mapping import (
    QuantileMapping,
    fit_quantile_map,
    map_point,
    quantile_map,
    quantile_rank,
)
from s2s_helper.correctors.training import LeakageGuard
from s2s_helper.errors import ConfigError, DomainError, EmptyWindowError, MissingDataError
from s2s_helper.grid_core import ERA_CODES, Grid
from s2s_helper.pydantic_models.config_models import ReforecastProtocol, parse_task
from tests.conftest import daily_series, single_member_archive

POINT = Grid(((40.0, -100.0),))


# Quantile mapping


def test_quantile_rank():
    samples = np.array([5.0, 1.0, 3.0, 2.0, 4.0])
    assert quantile_rank(samples, 3.0) == pytest.approx(0.5)
    assert quantile_rank(samples, 2.5) == pytest.approx(0.375)
    assert quantile_rank(samples, [0.0, 9.0]).tolist() == [0.0, 1.0]
    assert quantile_rank([7.0], 1.0) == 0.5
    with pytest.raises(EmptyWindowError):
        quantile_rank([], 1.0)


def test_quantile_rank_ties_take_block_midpoint():
    assert quantile_rank([1.0, 2.0, 2.0, 2.0, 3.0], 2.0) == pytest.approx(0.5)


def test_map_point():
    forecasts = np.arange(1.0, 6.0)
    obs = 2.0 * forecasts
    assert map_point(forecasts, obs, 3.0) == pytest.approx(6.0)
    assert map_point(forecasts, obs, 2.5) == pytest.approx(5.0)


def test_map_point_clips_rank():
    forecasts = np.arange(1.0, 6.0)
    obs = 2.0 * forecasts
    # rank 0 is clipped to 0.1
    assert map_point(forecasts, obs, 0.0) == pytest.approx(0.0 + 2.8 - 1.4)
    assert map_point(forecasts, obs, 100.0) == pytest.approx(100.0 + np.quantile(obs, 0.9) - np.quantile(forecasts, 0.9))


def test_map_point_is_monotone():
    rng = np.random.default_rng(2)
    forecasts, obs = rng.normal(size=30), rng.normal(1.0, 2.0, size=30)
    raw = np.linspace(-4.0, 4.0, 801)
    mapped = np.asarray([map_point(forecasts, obs, r) for r in raw])
    assert (np.diff(mapped) >= -1e-12).all()


def test_map_point_is_monotone_on_fuzzed_samples():
    rng = np.random.default_rng(3)
    for case in range(10_000):
        n = int(rng.integers(2, 25))
        forecasts = rng.normal(rng.normal(), rng.uniform(0.5, 3.0), size=n)
        obs = rng.normal(rng.normal(), rng.uniform(0.5, 3.0), size=n)
        if case % 4 == 0:
            # ties
            forecasts, obs = np.round(forecasts), np.round(obs)
        low, high = np.sort(rng.normal(0.0, 3.0, size=2))
        if case % 5 == 0:
            high = low
        assert map_point(forecasts, obs, low) <= map_point(forecasts, obs, high) + 1e-9, case


def three_year_pairs(obs_values):
    start = date(2001, 1, 1)
    n_days = (date(2003, 12, 31) - start).days + 1
    years = np.asarray([date.fromordinal(start.toordinal() + i).year - 2000 for i in range(n_days)], dtype=np.float64)
    forecasts = daily_series(POINT, start, 10.0 + years)
    obs = daily_series(POINT, start, obs_values(years))
    return forecasts, obs


def test_quantile_map_by_month_day():
    forecasts, obs = three_year_pairs(lambda years: 2.0 * years)
    model = fit_quantile_map(forecasts, obs, date(2003, 12, 31))
    assert quantile_map(model, np.array([12.0]), date(2005, 6, 1))[0] == pytest.approx(4.0)
    assert model.to_record().samples == {"40.0,-100.0": 365 * 3}


def test_quantile_map_respects_cutoff():
    forecasts, obs = three_year_pairs(lambda years: 2.0 * years)
    model = fit_quantile_map(forecasts, obs, date(2002, 12, 31))
    assert model.samples(151)[0].shape[0] == 2
    with pytest.raises(EmptyWindowError):
        quantile_map(fit_quantile_map(forecasts, obs, date(2000, 12, 31)), np.array([12.0]), date(2005, 6, 1))


def test_quantile_map_floors_precipitation():
    forecasts, obs = three_year_pairs(lambda years: years - 20.0)
    model = fit_quantile_map(forecasts, obs, date(2003, 12, 31))
    assert quantile_map(model, np.array([12.0]), date(2005, 6, 1))[0] < 0.0
    assert quantile_map(model, np.array([12.0]), date(2005, 6, 1), variable="precip")[0] == 0.0


def test_quantile_mapping_progressive(small_scenario, task_34w):
    guard = LeakageGuard(task_34w.lead, task_34w.period_length, strict=True)
    qm = QuantileMapping(task_34w, small_scenario.archive, small_scenario.obs, guard)
    targets = np.asarray([date(2018, 2, 1).toordinal(), date(2018, 8, 14).toordinal()])
    many = qm.forecast_many(targets)
    for i, t in enumerate(targets):
        assert np.allclose(many[i], qm.forecast(int(t)))
    assert guard.summary()["violations"] == 0
    assert qm.last_model.cutoff == targets[-1] - 30


# LOESS


def test_loess_reproduces_affine_sequence():
    sequence = 2.0 + 0.05 * np.arange(365)
    assert np.allclose(loess_smooth(sequence), sequence, atol=1e-8)


def test_loess_does_not_wrap_around_year_end():
    rng = np.random.default_rng(5)
    sequence = rng.normal(size=365)
    perturbed = sequence.copy()
    perturbed[-1] += 100.0
    assert loess_smooth(perturbed)[0] == pytest.approx(loess_smooth(sequence)[0], abs=1e-12)
    assert loess_smooth(perturbed)[-1] != pytest.approx(loess_smooth(sequence)[-1])


def one_sided_fit(sequence: np.ndarray, day: int, k: int) -> float:
    # tricube-weighted line through the k days nearest the first or last day
    n = sequence.size
    days = np.arange(k) if day == 0 else np.arange(n - k, n)
    distance = np.abs(days - day) / (k - 1)
    weights = (1.0 - distance**3) ** 3
    design = np.column_stack([np.ones(k), days.astype(np.float64)])
    root = np.sqrt(weights)
    coefficients, *_ = np.linalg.lstsq(design * root[:, None], sequence[days] * root, rcond=None)
    return float(coefficients[0] + coefficients[1] * day)


def test_loess_boundary_matches_one_sided_weighted_fit():
    rng = np.random.default_rng(8)
    sequence = np.sin(np.arange(365) / 40.0) + 0.3 * rng.normal(size=365)
    smoothed = loess_smooth(sequence)
    k = int(settings.LOESS_FRACTION * 365 + 1e-10)
    assert smoothed[0] == pytest.approx(one_sided_fit(sequence, 0, k), abs=1e-8)
    assert smoothed[-1] == pytest.approx(one_sided_fit(sequence, 364, k), abs=1e-8)


def two_year_series(grid, offset=0.0, scale=1.0):
    rng = np.random.default_rng(6)
    n_days = (date(2002, 12, 31) - date(2001, 1, 1)).days + 1
    obs = daily_series(grid, date(2001, 1, 1), 5.0 + rng.gamma(2.0, size=(n_days, grid.size)))
    forecasts = obs.with_values(scale * obs.values + offset)
    return obs, forecasts


def test_loess_identity_when_forecasts_match(grid):
    obs, forecasts = two_year_series(grid)
    correction = loess_fit(obs, forecasts, date(2003, 1, 1))
    assert np.allclose(correction.correction, 0.0, atol=1e-9)
    assert np.allclose(loess_apply(correction, np.array([3.0, 4.0]), date(2004, 5, 5)), [3.0, 4.0])


def test_loess_constant_offset(grid):
    obs, forecasts = two_year_series(grid, offset=1.75)
    correction = loess_fit(obs, forecasts, date(2003, 1, 1))
    assert np.allclose(correction.correction, -1.75, atol=1e-6)


def test_loess_multiplicative(grid):
    obs, forecasts = two_year_series(grid, scale=2.0)
    correction = loess_fit(obs, forecasts, date(2003, 1, 1), "multiplicative")
    assert np.allclose(correction.correction, 0.5, atol=1e-6)
    assert np.allclose(loess_apply(correction, np.array([4.0, 8.0]), date(2004, 5, 5)), [2.0, 4.0], atol=1e-5)


def test_loess_multiplicative_ratio_is_capped(grid):
    obs, forecasts = two_year_series(grid, scale=0.0)
    correction = loess_fit(obs, forecasts, date(2003, 1, 1), "multiplicative")
    assert np.allclose(correction.correction, 10.0)


def test_loess_needs_every_month_day(grid):
    obs, forecasts = two_year_series(grid)
    with pytest.raises(EmptyWindowError):
        loess_fit(obs, forecasts, date(2001, 6, 1))
    with pytest.raises(EmptyWindowError):
        loess_fit(obs, forecasts, date(2000, 6, 1))


def test_loess_debiasing_refits_yearly(small_scenario, task_34w):
    loess = LoessDebiasing(task_34w, small_scenario.archive, small_scenario.obs)
    first = date(2018, 1, 3).toordinal()
    targets = np.asarray([first, date(2018, 7, 1).toordinal(), date(2015, 3, 1).toordinal()])
    many = loess.forecast_many(targets)
    assert np.allclose(many[0], loess.forecast(first))
    assert np.isfinite(many[1]).all()
    # no full year of pairs before early 2015
    assert np.isnan(many[2]).all()
    assert loess.last_fit.cutoff == first - 29


# Operational debiasing


def reforecast_case(grid, bias):
    rng = np.random.default_rng(8)
    start = date(2015, 1, 1)
    n_days = (date(2020, 12, 31) - start).days + 1
    obs = daily_series(grid, start, rng.normal(size=(n_days, grid.size)))
    archive = single_member_archive(grid, obs.ordinals - 15, (15,), (obs.values + bias)[:, None, None, :], era="reforecast")
    return obs, archive


def test_operational_debias_cancels_offset(grid, task_34w):
    obs, archive = reforecast_case(grid, 3.0)
    t_star = date(2020, 6, 1)
    out = operational_debias(ReforecastProtocol.ecmwf(), task_34w, archive, obs, t_star)
    assert np.allclose(out, obs.row(t_star), atol=1e-9)


def test_operational_debias_exact_month_day(grid, task_34w):
    obs, archive = reforecast_case(grid, -2.0)
    protocol = ReforecastProtocol(hindcast_years=(2015, 2019))
    debiasing = OperationalDebiasing(task_34w, archive, obs, protocol)
    t_star = date(2020, 6, 1).toordinal()
    raw = debiasing.raw_forecast(np.asarray([t_star]))[0]
    assert np.allclose(debiasing.forecast(t_star), raw + 2.0, atol=1e-9)
    assert np.allclose(debiasing.forecast_many(np.asarray([t_star]))[0], raw + 2.0, atol=1e-9)


def test_operational_debias_without_match(grid, task_34w):
    obs, archive = reforecast_case(grid, 1.0)
    with pytest.raises(EmptyWindowError):
        operational_debias(ReforecastProtocol.ecmwf(), task_34w, archive, obs, date(2015, 3, 1))
    debiasing = OperationalDebiasing(task_34w, archive, obs)
    assert np.isnan(debiasing.forecast_many(np.asarray([date(2015, 3, 1).toordinal()]))).all()


def test_operational_debias_missing_raw(grid, task_34w):
    obs, archive = reforecast_case(grid, 1.0)
    with pytest.raises(MissingDataError):
        operational_debias(ReforecastProtocol.ecmwf(), task_34w, archive, obs, date(2022, 3, 1))


def test_protocol_needs_one_mode():
    with pytest.raises(ValueError):
        ReforecastProtocol(lookback_years=20)
    with pytest.raises(ValueError):
        ReforecastProtocol(lookback_years=20, day_window=6, hindcast_years=(1999, 2010))


# Multimodel mean


def test_multimodel_mean_single_and_pair(grid, task_34w):
    t_star = date(2020, 3, 1).toordinal()
    issuance = np.asarray([t_star - 15])
    first = single_member_archive(grid, issuance, (15,), [[[[1.0, 2.0]]]])
    second = single_member_archive(grid, issuance, (15,), [[[[3.0, 6.0]]]])
    assert np.allclose(multimodel_mean([first], task_34w, t_star), [1.0, 2.0])
    assert np.allclose(multimodel_mean([first, second], task_34w, t_star), [2.0, 4.0])


def test_multimodel_mean_uses_most_recent_issuance(grid, task_34w):
    t_star = date(2020, 3, 1).toordinal()
    cutoff = t_star - 15
    values = np.asarray([[9.0, 2.0], [1.0, 9.0]])[:, :, None, None]
    model = single_member_archive(grid, [cutoff - 5, cutoff - 3], (18, 20), values)
    assert np.allclose(multimodel_mean([model], task_34w, t_star), 1.0)


def test_multimodel_mean_skips_and_fails_on_missing_models(grid, task_34w):
    t_star = date(2020, 3, 1).toordinal()
    present = single_member_archive(grid, [t_star - 15], (15,), 4.0)
    stale = single_member_archive(grid, [t_star - 40], (15,), 8.0)
    assert np.allclose(multimodel_mean([present, stale], task_34w, t_star), 4.0)
    with pytest.raises(MissingDataError):
        multimodel_mean([stale], task_34w, t_star)


def test_build_multimodel_archive(grid, task_34w):
    issuances = np.asarray([737000, 737001])
    first = single_member_archive(grid, issuances, (15,), 1.0)
    second = single_member_archive(grid, issuances[:1], (15,), 5.0)
    archive = build_multimodel_archive([first, second])
    assert archive.members.tolist() == [-1]
    assert np.allclose(archive.ensemble_mean_at(issuances, 15), [[3.0, 3.0], [1.0, 1.0]])
    assert (archive.era[:, 0, 0] == ERA_CODES["forecast"]).all()
    assert np.allclose(archive.ensemble_mean_at(issuances[:1], 15), multimodel_mean([first, second], task_34w, 737015))
    with pytest.raises(ConfigError):
        build_multimodel_archive([])


def test_models_of_a_multimodel_mean_share_a_grid(grid):
    first = single_member_archive(grid, [737000], (15,), 1.0)
    other = single_member_archive(POINT, [737000], (15,), 1.0)
    with pytest.raises(DomainError):
        build_multimodel_archive([first, other])

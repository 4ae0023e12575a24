import logging
from datetime import date, timedelta

import numpy as np
import pytest

from s2s_helper.errors import DomainError, EmptyWindowError, MissingDataError
from s2s_helper.grid_core import (
    ABSENT,
    ERA_CODES,
    FEB29_SLOT,
    Climatology,
    ForecastArchive,
    Grid,
    aggregate_period,
    build_climatology,
    day_diff,
    month_day_slots,
    noleap_slots,
    year_diff,
)
from tests.conftest import daily_series


T_STAR = date(2020, 12, 31)


@pytest.mark.parametrize("offset, expected", [(10, 10.0), (0, 0.0), (360, 5.0)])
def test_day_diff(offset, expected):
    assert day_diff(T_STAR, T_STAR - timedelta(days=offset)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("offset, expected", [(0, 0), (365, 0), (366, 1)])
def test_year_diff(offset, expected):
    assert year_diff(T_STAR, T_STAR - timedelta(days=offset)) == expected


def test_date_after_target_is_rejected():
    with pytest.raises(DomainError):
        day_diff(T_STAR, T_STAR + timedelta(days=1))
    with pytest.raises(DomainError):
        year_diff(T_STAR, T_STAR + timedelta(days=1))


def test_month_day_slots():
    dates = [date(2020, 1, 1), date(2020, 2, 29), date(2021, 3, 1), date(2021, 12, 31)]
    assert month_day_slots(dates).tolist() == [0, 59, 60, 365]
    assert noleap_slots(dates).tolist() == [0, 58, 59, 364]


def test_grid_rejects_duplicate_points():
    with pytest.raises(DomainError):
        Grid(((1.0, 2.0), (1.0, 2.0)))


def test_grid_unknown_point(grid):
    with pytest.raises(MissingDataError):
        grid.index_of(0.0, 0.0)


def test_constant_climatology(grid):
    start = date(2001, 1, 1)
    n_days = (date(2003, 12, 31) - start).days + 1
    obs = daily_series(grid, start, np.full((n_days, grid.size), 7.5))
    clim = build_climatology(obs, (2001, 2003))
    assert np.allclose(clim.series([date(2005, 6, 1), date(2005, 12, 31)]), 7.5)


def test_climatology_averages_years(grid):
    start = date(2001, 1, 1)
    ordinals = np.arange(start.toordinal(), date(2003, 12, 31).toordinal() + 1)
    years = np.asarray([date.fromordinal(int(o)).year - 2000 for o in ordinals], dtype=np.float64)
    obs = daily_series(grid, start, np.repeat(years[:, None], grid.size, axis=1))
    clim = build_climatology(obs, (2001, 2003))
    assert np.allclose(clim.lookup(date(2010, 3, 15)), 2.0)
    # no leap year in the base period: Feb 29 falls back to Feb 28
    assert np.allclose(clim.lookup(date(2012, 2, 29)), 2.0)


def test_feb29_falls_back_per_grid_point(grid, caplog):
    table = np.tile(np.arange(366, dtype=np.float64)[:, None], (1, grid.size))
    table[FEB29_SLOT, 1] = np.nan
    clim = Climatology(grid, table, (2001, 2003))
    with caplog.at_level(logging.WARNING):
        first = clim.lookup(date(2012, 2, 29))
        clim.series([date(2016, 2, 29), date(2016, 3, 1)])
    assert first[0] == FEB29_SLOT
    assert first[1] == FEB29_SLOT - 1
    assert sum("Feb 29" in r.getMessage() for r in caplog.records) == 1


def test_climatology_missing_month_day(grid):
    obs = daily_series(grid, date(2001, 1, 1), np.ones((31, grid.size)))
    with pytest.raises(EmptyWindowError):
        build_climatology(obs, (2001, 2001))
    with pytest.raises(EmptyWindowError):
        build_climatology(obs, (1990, 1991))


def test_aggregate_constant_mean(grid):
    obs = daily_series(grid, date(2020, 1, 1), np.full((30, grid.size), 3.0))
    aggregated = aggregate_period(obs, "mean", 14)
    assert np.allclose(aggregated.values[:17], 3.0)
    # windows running past the last day are masked
    assert np.isnan(aggregated.values[17:]).all()


def test_aggregate_sum(grid):
    values = np.repeat(np.arange(1.0, 15.0)[:, None], grid.size, axis=1)
    aggregated = aggregate_period(daily_series(grid, date(2020, 1, 1), values), "sum", 14)
    assert np.allclose(aggregated.values[0], 105.0)


def test_aggregate_masks_windows_with_missing_day(grid):
    values = np.ones((20, grid.size))
    values[5, 0] = np.nan
    aggregated = aggregate_period(daily_series(grid, date(2020, 1, 1), values), "mean", 3)
    assert np.isnan(aggregated.values[3:6, 0]).all()
    assert np.allclose(aggregated.values[6:18, 0], 1.0)
    assert np.allclose(aggregated.values[:18, 1], 1.0)


def test_aggregate_rejects_unknown_mode(grid):
    with pytest.raises(DomainError):
        aggregate_period(daily_series(grid, date(2020, 1, 1), np.ones((5, grid.size))), "max")


def test_field_series_rows_at_missing_dates(grid):
    obs = daily_series(grid, date(2020, 1, 1), np.arange(10.0).repeat(grid.size))
    rows = obs.rows_at([date(2020, 1, 3).toordinal(), date(2021, 1, 1).toordinal()])
    assert np.allclose(rows[0], 2.0)
    assert np.isnan(rows[1]).all()
    with pytest.raises(MissingDataError):
        obs.row(date(2021, 1, 1))


def test_archive_ensemble_mean_skips_absent_members(grid):
    values = np.zeros((1, 1, 3, grid.size))
    values[0, 0, :, :] = np.asarray([1.0, 2.0, 9.0])[:, None]
    era = np.asarray([[[ERA_CODES["forecast"], ERA_CODES["reforecast"], ABSENT]]], dtype=np.int8)
    archive = ForecastArchive(grid, np.asarray([737000]), np.asarray([15]), np.asarray([0, 1, 2]), values, era)
    assert np.allclose(archive.ensemble_mean()[0, 0], 1.5)
    assert np.allclose(archive.ensemble_mean("reforecast")[0, 0], 2.0)
    assert archive.n_entries == 2
    assert archive.members_at(737000, 15).shape == (2, grid.size)
    series = archive.lead_series(15)
    assert series.ordinals.tolist() == [737015]


def test_archive_missing_keys(grid):
    archive = ForecastArchive(
        grid, np.asarray([737000]), np.asarray([15]), np.asarray([0]),
        np.zeros((1, 1, 1, grid.size)), np.zeros((1, 1, 1), dtype=np.int8),
    )
    with pytest.raises(MissingDataError):
        archive.lead_index(3)
    with pytest.raises(MissingDataError):
        archive.members_at(737001, 15)
    assert np.isnan(archive.ensemble_mean_at([737001], 15)).all()


def test_from_targets_leaves_out_empty_rows(grid):
    values = np.asarray([[1.0, 2.0], [np.nan, np.nan], [3.0, 4.0]])
    archive = ForecastArchive.from_targets(grid, np.asarray([737020, 737021, 737022]), 15, values[:, None])
    assert archive.issuances.tolist() == [737005, 737007]
    assert archive.members.tolist() == [-1]
    assert np.allclose(archive.lead_series(15).values, [[1.0, 2.0], [3.0, 4.0]])

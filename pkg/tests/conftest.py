from datetime import date

import numpy as np
import pytest

from s2s_helper.grid_core import ERA_CODES, FieldSeries, ForecastArchive, Grid, from_ordinals
from s2s_helper.pydantic_models.config_models import ScenarioConfig, parse_task
from s2s_helper.scenario_generator import generate_scenario


def daily_series(grid: Grid, start: date, values: np.ndarray, variable: str = "tmp2m") -> FieldSeries:
    values = np.asarray(values, dtype=np.float64).reshape(-1, grid.size)
    ordinals = start.toordinal() + np.arange(values.shape[0])
    return FieldSeries(grid, from_ordinals(ordinals), values, variable=variable)


def single_member_archive(
    grid: Grid, issuances: np.ndarray, leads: tuple[int, ...], values, era: str = "forecast"
) -> ForecastArchive:
    issuances = np.asarray(issuances, dtype=np.int64)
    shape = (issuances.size, len(leads), 1)
    return ForecastArchive(
        grid, issuances, np.asarray(leads), np.asarray([0]),
        np.broadcast_to(np.asarray(values, dtype=np.float64), shape + (grid.size,)),
        np.full(shape, ERA_CODES[era], dtype=np.int8),
    )


@pytest.fixture
def grid() -> Grid:
    return Grid(((40.0, -100.0), (45.0, -95.0)))


@pytest.fixture
def task_34w():
    return parse_task("tmp2m_34w")


@pytest.fixture(scope="session")
def small_scenario_cfg() -> ScenarioConfig:
    return ScenarioConfig(
        grid_rows=2,
        grid_cols=2,
        start_year=2015,
        end_year=2018,
        climatology_years=2,
        leads=(1, 15, 22, 29),
        members=3,
        reforecast_members=3,
        bias_constant=1.5,
        seed=11,
    )


@pytest.fixture(scope="session")
def small_scenario(small_scenario_cfg):
    return generate_scenario(small_scenario_cfg)

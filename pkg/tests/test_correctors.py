import logging
from datetime import date

import numpy as np
import pandas as pd
import pytest

from s2s_helper.baselines.operational import OperationalDebiasing
from s2s_helper.correctors.abc_ensemble import (
    AdaptiveBiasCorrection,
    abc_components,
    abc_forecast,
    corrected_members,
    pooled_member_stack,
    pooled_members,
)
from s2s_helper.correctors.climatology_pp import ClimatologyPlusPlus
from s2s_helper.correctors.dynamical_pp import DynamicalPlusPlus
from s2s_helper.correctors.persistence_pp import PersistencePlusPlus
from s2s_helper.correctors.training import LeakageGuard, observation_cutoff, training_index
from s2s_helper.correctors.tuning import ProgressiveTuner, tune, tuning_window
from s2s_helper.errors import EmptyWindowError, LeakageError, MissingDataError
from s2s_helper.grid_core import Climatology, FieldSeries, as_date, build_climatology, from_ordinals
from s2s_helper.metrics import bias_map, bootstrap_ci, geographic_loss, skill_series
from s2s_helper.pydantic_models.config_models import (
    ClimppConfig,
    DynppConfig,
    ReforecastProtocol,
    ScenarioConfig,
    parse_task,
)
from s2s_helper.scenario_generator import generate_scenario
from tests.conftest import daily_series, single_member_archive


# Training windows and leakage audit


def test_observation_cutoff():
    assert observation_cutoff(100, 15, 14) == 70


def test_training_index(grid):
    obs = daily_series(grid, date(2020, 1, 1), np.ones((100, grid.size)))
    t_star = date(2020, 3, 1).toordinal()
    index = training_index(t_star, 15, 14, obs)
    assert index[-1] == t_star - 30
    assert training_index(date(2020, 1, 20), 15, 14, obs).size == 0
    assert training_index(date(2030, 1, 1), 15, 14, obs).size == 100


def test_leakage_guard_strict():
    guard = LeakageGuard(15, 14, strict=True)
    guard.record_observations(100, 70)
    guard.record_issuances(100, 85)
    with pytest.raises(LeakageError):
        guard.record_observations(100, 71)
    with pytest.raises(LeakageError):
        guard.record_issuances(np.asarray([100, 100]), np.asarray([80, 86]))


def test_leakage_guard_counts_without_raising():
    guard = LeakageGuard(15, 14, strict=False)
    guard.record_observations(np.asarray([100, 100, 100]), np.asarray([60, 75, -1]))
    summary = guard.summary()
    assert summary["reads"] == 2
    assert summary["violations"] == 1
    assert summary["newest_observation_offset"] == 25


# Climatology++


def three_year_obs(grid_values):
    from s2s_helper.grid_core import Grid

    grid = Grid(((40.0, -100.0),))
    dates = [date(2020, 6, 15), date(2021, 6, 15), date(2022, 6, 15)]
    return FieldSeries(grid, dates, np.asarray(grid_values, dtype=np.float64)[:, None])


def test_climpp_median_and_mean(task_34w):
    obs = three_year_obs([1.0, 2.0, 100.0])
    corrector = ClimatologyPlusPlus(task_34w, obs)
    t_star = date(2023, 6, 15)
    assert corrector.forecast(ClimppConfig(span=1, loss="RMSE"), t_star)[0] == pytest.approx(2.0)
    assert corrector.forecast(ClimppConfig(span=1, loss="MSE"), t_star)[0] == pytest.approx(103.0 / 3)


def test_climpp_median_minimizes_summed_rmse(task_34w):
    values = np.array([1.0, 2.0, 100.0])
    candidates = np.linspace(0.0, 100.0, 100_001)
    losses = np.abs(values[None, :] - candidates[:, None]).sum(axis=1)
    assert candidates[np.argmin(losses)] == pytest.approx(2.0)


def test_climpp_single_training_date(task_34w):
    obs = three_year_obs([1.0, 2.0, 100.0])
    corrector = ClimatologyPlusPlus(task_34w, obs)
    # only the newest year lies less than one year back
    cfg = ClimppConfig(span=1, training_years=0, loss="RMSE")
    assert corrector.forecast(cfg, date(2023, 6, 15))[0] == pytest.approx(100.0)


def test_climpp_empty_window(task_34w):
    obs = three_year_obs([1.0, 2.0, 100.0])
    corrector = ClimatologyPlusPlus(task_34w, obs)
    with pytest.raises(EmptyWindowError):
        corrector.forecast(ClimppConfig(span=1), date(2023, 1, 15))
    many = corrector.forecast_many(ClimppConfig(span=1), np.asarray([date(2023, 1, 15).toordinal()]))
    assert np.isnan(many).all()


def test_climpp_forecast_many_matches_forecast(small_scenario, task_34w):
    corrector = ClimatologyPlusPlus(task_34w, small_scenario.obs)
    targets = np.asarray([date(2018, 3, 1).toordinal(), date(2018, 9, 17).toordinal()])
    for cfg in (ClimppConfig(span=7, loss="RMSE"), ClimppConfig(span=10, loss="MSE")):
        many = corrector.forecast_many(cfg, targets)
        for i, t in enumerate(targets):
            assert np.allclose(many[i], corrector.forecast(cfg, int(t)))


# Dynamical++


def biased_archive_case(grid, bias):
    rng = np.random.default_rng(4)
    start = date(2018, 1, 1)
    obs = daily_series(grid, start, rng.normal(size=(3 * 365, grid.size)))
    archive = single_member_archive(grid, obs.ordinals - 15, (15,), (obs.values + bias)[:, None, None, :])
    return obs, archive


def test_dynpp_learns_constant_bias(grid, task_34w):
    obs, archive = biased_archive_case(grid, 2.5)
    corrector = DynamicalPlusPlus(task_34w, archive, obs)
    cfg = DynppConfig(span=35, issuance_count=1, leads=(15,))
    t_star = date(2020, 6, 1)
    assert np.allclose(corrector.forecast(cfg, t_star), obs.row(t_star), atol=1e-9)
    many = corrector.forecast_many(cfg, np.asarray([t_star.toordinal()]))
    assert np.allclose(many[0], obs.row(t_star), atol=1e-9)


def test_dynpp_empty_window(grid, task_34w):
    obs, archive = biased_archive_case(grid, 1.0)
    corrector = DynamicalPlusPlus(task_34w, archive, obs)
    with pytest.raises(EmptyWindowError):
        corrector.forecast(DynppConfig(span=0, issuance_count=1, leads=(15,), training_years=0), date(2020, 6, 1))


def test_dynpp_missing_forecasts(grid, task_34w):
    obs, archive = biased_archive_case(grid, 1.0)
    corrector = DynamicalPlusPlus(task_34w, archive, obs)
    with pytest.raises(MissingDataError) as error:
        corrector.forecast(DynppConfig(span=35, issuance_count=2, leads=(15,)), date(2022, 6, 1))
    assert len(error.value.missing) == 2


def test_dynpp_ensembles_issuances_and_leads(grid, task_34w):
    obs = daily_series(grid, date(2020, 1, 1), np.zeros((60, grid.size)))
    issuances = np.arange(date(2020, 1, 1).toordinal(), date(2020, 3, 1).toordinal())
    values = np.arange(issuances.size, dtype=np.float64)[:, None, None, None] + np.asarray([0.0, 100.0])[None, :, None, None]
    archive = single_member_archive(grid, issuances, (15, 16), values)
    corrector = DynamicalPlusPlus(task_34w, archive, obs)
    t = date(2020, 2, 1).toordinal()
    fbar = corrector.ensemble_forecast(DynppConfig(span=0, issuance_count=3, leads=(15, 16)), [t])
    newest = t - 15 - issuances[0]
    expected = np.mean([newest - d + 1 + extra for d in (1, 2, 3) for extra in (0.0, 100.0)])
    assert np.allclose(fbar, expected)


@pytest.fixture(scope="module")
def large_bias_run():
    task = parse_task("tmp2m_34w")
    scenario = generate_scenario(ScenarioConfig(
        start_year=2011, end_year=2020, leads=tuple(range(15, 30)),
        bias_constant=5.0, skill=0.8, noise_scale=1.0, seed=21,
    ))
    obs, archive = scenario.obs, scenario.archive
    clim = build_climatology(obs, scenario.base_period)
    guard = LeakageGuard(task.lead, task.period_length, strict=True)
    abc = AdaptiveBiasCorrection(
        task, archive, obs, clim,
        dynpp_grid=[
            DynppConfig(span=35, issuance_count=1, leads=(15,)),
            DynppConfig(span=35, issuance_count=7, leads=(15,)),
            DynppConfig(span=14, issuance_count=7, leads=tuple(range(15, 23))),
        ],
        climpp_grid=[ClimppConfig(span=7), ClimppConfig(span=10)],
        guard=guard,
    )
    targets = np.arange(date(2019, 1, 1).toordinal(), date(2021, 1, 1).toordinal())
    result = abc.run(targets)
    assert result.complete.all()
    opdebias = OperationalDebiasing(task, archive, obs, ReforecastProtocol.ecmwf(), guard=guard)
    forecasts = {
        "abc": result.forecasts,
        "dynpp": result.components["dynpp"],
        "opdebias": opdebias.forecast_many(targets),
        "raw": archive.ensemble_mean_at(targets - task.lead, task.lead),
    }
    dates = from_ordinals(targets)
    series = {name: FieldSeries(obs.grid, dates, values) for name, values in forecasts.items()}
    return obs, clim, series, guard


@pytest.mark.slow
def test_tuned_dynpp_removes_large_constant_bias(large_bias_run):
    obs, _, series, guard = large_bias_run
    raw_bias = bias_map(series["raw"], obs)
    assert raw_bias.mean() == pytest.approx(5.0, abs=0.1)
    assert np.abs(raw_bias - 5.0).max() < 0.25
    assert np.isfinite(series["dynpp"].values).all()
    assert np.abs(bias_map(series["dynpp"], obs)).mean() <= 0.15
    assert guard.summary()["violations"] == 0


@pytest.mark.slow
def test_abc_skill_beats_operational_debiasing_and_raw(large_bias_run):
    obs, clim, series, _ = large_bias_run
    skills = pd.DataFrame({name: skill_series(series[name], obs, clim) for name in ("abc", "opdebias", "raw")}).dropna()
    assert len(skills) > 700
    means = skills.mean()
    for better, worse in (("abc", "opdebias"), ("opdebias", "raw")):
        assert means[better] - means[worse] >= 0.02
        low, high = bootstrap_ci(skills[better] - skills[worse], level=0.95, resamples=1000, seed=5)
        assert 0.0 < low <= high


# Persistence++


def perpp_case(grid, kind: str):
    rng = np.random.default_rng(3)
    start = date(2018, 1, 1).toordinal()
    ordinals = np.arange(start, start + 3 * 365)
    f = rng.normal(size=(ordinals.size, grid.size))
    # the ensemble issued at t - 16 is the regressor of target t
    archive = single_member_archive(grid, ordinals - 16, (15,), f[:, None, None, :])
    if kind == "constant":
        clim = Climatology(grid, np.full((366, grid.size), 3.0), (2018, 2018))
    else:
        clim = Climatology(grid, rng.normal(size=(366, grid.size)), (2018, 2018))
    if kind == "ensemble":
        y = 2.0 * f
    elif kind == "climatology":
        y = clim.series(ordinals)
    elif kind == "constant":
        y = np.full(f.shape, 3.0)
    else:
        y = rng.normal(size=f.shape)
    obs = FieldSeries(grid, from_ordinals(ordinals), y)
    return PersistencePlusPlus(parse_task("tmp2m_34w"), archive, obs, clim), int(ordinals[-1])


def training_design(perpp: PersistencePlusPlus, t_star: int, g: int):
    dates = perpp.obs.ordinals[perpp.obs.ordinals <= t_star - 30]
    design = perpp.design(dates)[:, g]
    y = perpp.obs.rows_at(dates)[:, g]
    keep = np.isfinite(design).all(axis=1) & np.isfinite(y)
    return design[keep], y[keep]


def test_perpp_recovers_ensemble_coefficient(grid):
    perpp, t_star = perpp_case(grid, "ensemble")
    coeffs = perpp.fit(t_star)
    assert np.allclose(coeffs.beta, [[0, 0, 0, 0, 2]] * grid.size, atol=1e-8)
    assert (coeffs.rank == 5).all()


def test_perpp_recovers_climatology_coefficient(grid):
    perpp, t_star = perpp_case(grid, "climatology")
    coeffs = perpp.fit(t_star)
    assert np.allclose(coeffs.beta, [[0, 1, 0, 0, 0]] * grid.size, atol=1e-8)


def test_perpp_matches_normal_equations(grid):
    perpp, t_star = perpp_case(grid, "noise")
    coeffs = perpp.fit(t_star)
    for g in range(grid.size):
        design, y = training_design(perpp, t_star, g)
        expected = np.linalg.solve(design.T @ design, design.T @ y)
        assert np.allclose(coeffs.beta[g], expected, atol=1e-8)
        residual = y - design @ coeffs.beta[g]
        inner = np.abs(design.T @ residual)
        assert (inner <= 1e-6 * np.linalg.norm(design, axis=0) * np.linalg.norm(residual)).all()


def test_perpp_predict_reproduces_fitted_value(grid):
    perpp, t_star = perpp_case(grid, "ensemble")
    coeffs = perpp.fit(t_star)
    t = t_star - 100
    assert np.allclose(perpp.predict(coeffs, t), perpp.obs.row(t), atol=1e-8)
    zero = type(coeffs)(t_star=t_star, beta=np.zeros_like(coeffs.beta), rank=coeffs.rank, n_rows=coeffs.n_rows)
    assert np.allclose(perpp.predict(zero, t), 0.0)


def test_perpp_rank_deficient_design_uses_minimum_norm(grid, caplog):
    perpp, t_star = perpp_case(grid, "constant")
    with caplog.at_level(logging.WARNING):
        coeffs = perpp.fit(t_star)
    assert (coeffs.rank < 5).all()
    assert "rank deficient" in caplog.text
    assert np.allclose(perpp.predict(coeffs, t_star - 200), 3.0, atol=1e-8)
    # minimum norm: no weight on the uninformative ensemble column
    assert np.allclose(coeffs.beta[:, 4], 0.0, atol=1e-8)


def test_perpp_forecast_many_matches_forecast(grid):
    perpp, t_star = perpp_case(grid, "noise")
    targets = np.asarray([t_star - 300, t_star])
    many = perpp.forecast_many(targets)
    for i, t in enumerate(targets):
        assert np.allclose(many[i], perpp.forecast(int(t)))
    assert perpp.last_fit.t_star == t_star


def test_perpp_missing_regressor(grid):
    perpp, t_star = perpp_case(grid, "ensemble")
    coeffs = perpp.fit(t_star)
    with pytest.raises(MissingDataError):
        perpp.predict(coeffs, t_star + 400)


def test_perpp_too_few_rows(grid):
    perpp, _ = perpp_case(grid, "ensemble")
    with pytest.raises(EmptyWindowError):
        perpp.fit(date(2018, 2, 20))


# Tuning


def test_tuning_window(task_34w):
    t_star = date(2020, 6, 1).toordinal()
    first, last = tuning_window(t_star, task_34w, 3)
    assert last == t_star - 30
    assert first == int(np.ceil(t_star - 3 * 365.242199))


def history(rows):
    return pd.DataFrame(rows, columns=["candidate", "date", "rmse"])


def test_tune_prefers_smaller_error(task_34w):
    a, b = ClimppConfig(span=1), ClimppConfig(span=7)
    rows = [(a.label, date(2020, 1, 1), 1.0), (b.label, date(2020, 1, 1), 2.0)]
    assert tune([a, b], history(rows), date(2020, 6, 1), task_34w, "climpp") == a
    assert tune([b, a], history(rows), date(2020, 6, 1), task_34w, "climpp") == a


def test_tune_single_candidate_and_cold_start(task_34w):
    a, b = ClimppConfig(span=1), ClimppConfig(span=7)
    assert tune([a], history([]), date(2020, 6, 1), task_34w, "climpp") == a
    # scored dates after the observability cutoff do not count
    rows = [(b.label, date(2020, 5, 20), 0.1)]
    assert tune([a, b], history(rows), date(2020, 6, 1), task_34w, "climpp") == a


def test_tune_ties_go_to_first_candidate(task_34w):
    a, b = ClimppConfig(span=1), ClimppConfig(span=7)
    rows = [(a.label, date(2020, 1, 1), 1.0), (b.label, date(2020, 1, 1), 1.0)]
    assert tune([b, a], history(rows), date(2020, 6, 1), task_34w, "climpp") == b


def test_progressive_tuner_matches_exhaustive_scoring(small_scenario, task_34w):
    candidates = [ClimppConfig(span=1), ClimppConfig(span=7), ClimppConfig(span=10, training_years=29)]
    corrector = ClimatologyPlusPlus(task_34w, small_scenario.obs)
    tuner = ProgressiveTuner("climpp", corrector, candidates, task_34w, small_scenario.obs, 3)
    targets = np.arange(date(2016, 1, 10).toordinal(), date(2018, 12, 1).toordinal(), 45)
    result = tuner.run(targets)
    scores = tuner.history(targets)
    assert len(result.ledger.entries) == targets.size
    for t, entry in zip(targets, result.ledger.entries):
        assert entry.selected == tune(candidates, scores, int(t), task_34w, "climpp").label
    labels = result.selected_labels(candidates)
    for i, t in enumerate(targets):
        chosen = candidates[[c.label for c in candidates].index(labels[i])]
        assert np.allclose(result.forecasts[i], corrector.forecast_many(chosen, np.asarray([t]))[0], equal_nan=True)


# ABC ensemble


def test_abc_forecast_means():
    task = parse_task("tmp2m_34w")
    assert abc_forecast(task, {"dynpp": 5.0, "climpp": 5.0, "perpp": 5.0}) == pytest.approx(5.0)
    assert abc_forecast(task, {"dynpp": 0.0, "climpp": 1.0, "perpp": 2.0}) == pytest.approx(1.0)
    weeks12 = parse_task("tmp2m_12w")
    assert abc_components(weeks12) == ("dynpp", "perpp")
    assert abc_forecast(weeks12, {"dynpp": 0.0, "perpp": 2.0}) == pytest.approx(1.0)


def test_abc_forecast_missing_component():
    task = parse_task("precip_56w")
    with pytest.raises(MissingDataError):
        abc_forecast(task, {"dynpp": np.zeros(2), "perpp": np.zeros(2)})
    with pytest.raises(MissingDataError):
        abc_forecast(task, {"dynpp": np.zeros(2), "climpp": np.full(2, np.nan), "perpp": np.zeros(2)})


def test_pooled_members_single_member():
    members = np.array([[1.0, 2.0]])
    pooled = pooled_members(members, np.array([3.0, 3.0]), np.array([4.0, 4.0]), np.array([5.0, 5.0]))
    assert np.allclose(pooled, [[3.0, 3.0], [4.0, 4.0], [5.0, 5.0]])


def test_pooled_members_ecmwf_size():
    members = np.random.default_rng(0).normal(size=(51, 3))
    assert pooled_members(members, np.zeros(3), np.zeros(3), np.zeros(3)).shape == (103, 3)
    assert pooled_members(members, np.zeros(3), np.zeros(3), None).shape == (102, 3)


def test_pooled_members_clip_precipitation():
    members = np.array([[0.0], [1.0]])
    pooled = pooled_members(members, np.array([0.0]), np.array([1.0]), np.array([2.0]), variable="precip")
    assert pooled.min() == 0.0
    assert np.allclose(pooled[:, 0], [0.0, 0.5, 0.5, 1.5, 2.0])


def test_corrected_members():
    members = np.array([[1.0, 0.0], [2.0, 1.0], [6.0, 5.0]])
    assert np.allclose(corrected_members(members, members.mean(axis=0)), members)
    shifted = corrected_members(members, np.array([0.0, 0.0]))
    assert np.allclose(shifted, [[-2.0, -2.0], [-1.0, -1.0], [3.0, 3.0]])
    assert corrected_members(members, np.array([0.0, 0.0]), variable="precip").min() == 0.0


def test_abc_run_on_scenario(small_scenario, task_34w):
    obs, archive = small_scenario.obs, small_scenario.archive
    clim = build_climatology(obs, small_scenario.base_period)
    guard = LeakageGuard(task_34w.lead, task_34w.period_length, strict=True)
    abc = AdaptiveBiasCorrection(
        task_34w, archive, obs, clim,
        dynpp_grid=[
            DynppConfig(span=14, issuance_count=1, leads=(15,)),
            DynppConfig(span=35, issuance_count=7, leads=tuple(range(15, 23))),
        ],
        climpp_grid=[ClimppConfig(span=7), ClimppConfig(span=10, training_years=29)],
        guard=guard,
    )
    targets = np.arange(date(2018, 1, 1).toordinal(), date(2018, 12, 1).toordinal(), 7)
    result = abc.run(targets)
    assert result.complete.all()
    assert np.allclose(result.forecasts, np.mean([result.components[m] for m in ("dynpp", "climpp", "perpp")], axis=0))
    assert [ledger.model for ledger in result.ledgers] == ["dynpp", "climpp"]
    assert guard.summary()["violations"] == 0

    truth = obs.rows_at(targets)
    raw = archive.ensemble_mean_at(targets - task_34w.lead, task_34w.lead)
    assert geographic_loss(result.forecasts, truth).mean() < geographic_loss(raw, truth).mean()

    members = pooled_member_stack(archive, task_34w, targets, result.components)
    assert members.shape == (targets.size, 2 * archive.members.size + 1, obs.grid.size)
    assert np.allclose(members[:, -1], result.components["climpp"])

    single = abc.forecast(int(targets[-1]))
    assert np.allclose(single, result.forecasts[-1])
    assert as_date(int(targets[-1])).year == 2018

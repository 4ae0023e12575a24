import json
import logging
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from s2s_helper import settings
from s2s_helper.dataset_io import atomic_write_text, store_dataset, store_frame, store_json
from s2s_helper.grid_core import (
    ABSENT,
    ERA_CODES,
    FieldSeries,
    ForecastArchive,
    Grid,
    aggregate_period,
    from_ordinals,
    noleap_slots,
)
from s2s_helper.pydantic_models.config_models import ScenarioConfig, VariableSpec
from s2s_helper.seeding import make_rng

logger = logging.getLogger(__name__)

# Day of the 365-slot calendar with the seasonal maximum
_PEAK_SLOT = 196


@dataclass(frozen=True, eq=False)
class Scenario:
    cfg: ScenarioConfig
    grid: Grid
    obs: FieldSeries
    archive: ForecastArchive
    truth_bias: FieldSeries

    @property
    def base_period(self) -> tuple[int, int]:
        return self.cfg.base_period


def aggregated_anomaly_sd(scale: float, coefficient: float, period_length: int, mode: str) -> float:
    """
    Stationary standard deviation of the sum (or mean) over period_length days of an AR(1) anomaly
    with daily standard deviation `scale`.
    """
    lags = np.arange(1, period_length)
    variance = scale**2 * (period_length + 2 * np.sum((period_length - lags) * coefficient**lags))
    if mode == "mean":
        variance /= period_length**2
    return float(np.sqrt(variance))


class ScenarioGenerator:
    def __init__(self, cfg: ScenarioConfig):
        """
        Generates a synthetic gridded scenario: observations with a seasonal cycle and AR(1) anomalies,
        and ensemble forecasts for every issuance and lead carrying a known injected bias.

        Args:
        cfg: ScenarioConfig
            Grid, years, seed, seasonal cycle, noise, bias model, ensemble size and skill of the scenario
        """
        self.cfg = cfg
        self.grid = Grid.regular(cfg.grid_rows, cfg.grid_cols)
        self.mode = settings.VARIABLE_AGGREGATION[cfg.variable]
        self.period_length = settings.PERIOD_LENGTH
        self.start = date(cfg.start_year, 1, 1).toordinal()
        self.end = date(cfg.end_year, 12, 31).toordinal()
        self.leads = np.asarray(sorted(set(cfg.leads)), dtype=np.int64)
        self.issuances = np.arange(self.start, self.end + 1, cfg.issuance_interval, dtype=np.int64)
        self.north = self.grid.lats > self.grid.lats.mean()
        # daily values cover every period starting at the last issuance plus the longest lead
        self.n_days = self.end - self.start + 1 + int(self.leads.max()) + self.period_length

    def seasonal_cycle(self, ordinals: np.ndarray) -> np.ndarray:
        """
        Daily seasonal cycle, shape (dates, grid points); cooler (or drier) towards the north.
        """
        phase = 2 * np.pi * (noleap_slots(ordinals) - _PEAK_SLOT) / 365
        gradient = -0.3 * (self.grid.lats - self.grid.lats.mean())
        return self.cfg.seasonal_mean + gradient[None, :] + self.cfg.seasonal_amplitude * np.cos(phase)[:, None]

    def injected_bias(self, targets: np.ndarray) -> np.ndarray:
        """
        Additive bias B of the forecasts for target dates, shape (targets, grid points).
        """
        seasonal = self.cfg.bias_seasonal * np.cos(2 * np.pi * noleap_slots(targets) / 365)
        return self.cfg.bias_constant + seasonal[:, None] + self.cfg.bias_regional * self.north[None, :]

    def wet_factor(self) -> np.ndarray:
        if self.cfg.variable != "precip":
            return np.ones(self.grid.size)
        return np.where(self.north, self.cfg.wet_factor, 1.0)

    def _aggregate(self, daily: np.ndarray) -> np.ndarray:
        series = FieldSeries(
            self.grid,
            from_ordinals(np.arange(self.start, self.start + self.n_days)),
            daily,
            variable=self.cfg.variable,
        )
        return aggregate_period(series, self.mode, self.period_length).values

    def _clip(self, values: np.ndarray) -> np.ndarray:
        return np.maximum(values, 0.0) if self.cfg.variable == "precip" else values

    def generate(self) -> Scenario:
        """
        Generate observations, the forecast archive and the record of the injected bias.
        Every grid point draws from its own seeded stream, so the result only depends on the configuration.
        """
        cfg = self.cfg
        days = np.arange(self.start, self.start + self.n_days, dtype=np.int64)
        n_obs = self.end - self.start + 1
        n_members = max(cfg.members, cfg.reforecast_members)
        shape = (self.issuances.size, self.leads.size)

        innovations = np.empty((self.n_days, self.grid.size))
        obs_noise = np.empty((n_obs, self.grid.size))
        independent = np.empty(shape + (self.grid.size,))
        member_noise = np.empty(shape + (n_members, self.grid.size))
        for g in range(self.grid.size):
            rng = make_rng(cfg.seed, "grid", g)
            innovations[:, g] = rng.standard_normal(self.n_days)
            obs_noise[:, g] = rng.standard_normal(n_obs)
            independent[..., g] = rng.standard_normal(shape)
            member_noise[..., g] = rng.standard_normal(shape + (n_members,))

        phi = cfg.ar_coefficient
        shocks = innovations * cfg.anomaly_scale * np.sqrt(1 - phi**2)
        # stationary start
        shocks[0] = innovations[0] * cfg.anomaly_scale
        anomaly = lfilter([1.0], [1.0, -phi], shocks, axis=0)

        seasonal_agg = self._aggregate(self.seasonal_cycle(days))
        anomaly_agg = self._aggregate(anomaly)

        truth = seasonal_agg[:n_obs] + anomaly_agg[:n_obs]
        obs = FieldSeries(
            self.grid,
            from_ordinals(days[:n_obs]),
            self._clip(truth + cfg.noise_scale * obs_noise),
            variable=cfg.variable,
            units=settings.VARIABLE_UNITS[cfg.variable],
        )

        anomaly_sd = aggregated_anomaly_sd(cfg.anomaly_scale, phi, self.period_length, self.mode)
        targets = self.issuances[:, None] + self.leads[None, :]
        k = targets - self.start
        wet = self.wet_factor()
        bias = self.injected_bias(targets.reshape(-1)).reshape(shape + (self.grid.size,))
        ensemble_signal = (
            seasonal_agg[k] * wet
            + cfg.skill * anomaly_agg[k]
            + np.sqrt(1 - cfg.skill**2) * anomaly_sd * independent
            + bias
        )
        values = self._clip(ensemble_signal[:, :, None, :] + cfg.member_spread * member_noise)

        years = np.asarray([d.year for d in from_ordinals(self.issuances)])
        reforecast = years < cfg.first_forecast_year
        member_ids = np.arange(n_members)
        present = np.where(
            reforecast[:, None], member_ids[None, :] < cfg.reforecast_members, member_ids[None, :] < cfg.members
        )
        codes = np.where(reforecast, ERA_CODES["reforecast"], ERA_CODES["forecast"])[:, None]
        era = np.where(present, codes, ABSENT).astype(np.int8)
        era = np.broadcast_to(era[:, None, :], shape + (n_members,))
        archive = ForecastArchive(
            self.grid, self.issuances, self.leads, member_ids, values, era,
            variable=cfg.variable, units=settings.VARIABLE_UNITS[cfg.variable],
        )

        bias_dates = np.arange(self.start + int(self.leads.min()), self.end + int(self.leads.max()) + 1)
        truth_bias = self.injected_bias(bias_dates) + (wet - 1.0)[None, :] * seasonal_agg[bias_dates - self.start]
        logger.info(
            f"Generated {cfg.variable} scenario {cfg.start_year}-{cfg.end_year} on {self.grid.size} grid points: "
            f"{len(obs)} observation dates, {archive.n_entries} forecast entries"
        )
        return Scenario(
            cfg,
            self.grid,
            obs,
            archive,
            FieldSeries(self.grid, from_ordinals(bias_dates), truth_bias, variable=cfg.variable),
        )

    def generate_explanatory(self, dates=None) -> tuple[pd.DataFrame, dict[str, VariableSpec]]:
        """
        Synthetic explanatory variables: two persistent continuous indices, an MJO-like phase 1..8
        and the month, plus their manifest.

        Args:
        dates:
            Dates to generate; defaults to every day of the scenario
        """
        if dates is None:
            ordinals = np.arange(self.start, self.end + 1, dtype=np.int64)
        else:
            ordinals = np.asarray([pd.Timestamp(d).date().toordinal() for d in dates], dtype=np.int64)
        span = np.arange(int(ordinals.min()), int(ordinals.max()) + 1) if ordinals.size else ordinals
        rng = make_rng(self.cfg.seed, "explanatory")

        def index(coefficient: float) -> np.ndarray:
            shocks = rng.standard_normal(span.size) * np.sqrt(1 - coefficient**2)
            if span.size:
                shocks[0] /= np.sqrt(1 - coefficient**2)
            return lfilter([1.0], [1.0, -coefficient], shocks)

        mei = index(0.99)
        nao = index(0.9)
        angle = np.cumsum(2 * np.pi / 45 + 0.05 * rng.standard_normal(span.size))
        phase = np.floor(np.mod(angle, 2 * np.pi) / (np.pi / 4)).astype(np.int64) + 1
        positions = ordinals - (span[0] if span.size else 0)
        index_dates = pd.DatetimeIndex([pd.Timestamp(d) for d in from_ordinals(ordinals)], name="date")
        table = pd.DataFrame(
            {
                "mei": mei[positions],
                "nao": nao[positions],
                "mjo_phase": phase[positions].astype(np.float64),
                "month": np.asarray(index_dates.month, dtype=np.float64),
            },
            index=index_dates,
        )
        manifest = {
            "mei": VariableSpec(kind="continuous"),
            "nao": VariableSpec(kind="continuous"),
            "mjo_phase": VariableSpec(kind="categorical"),
            "month": VariableSpec(kind="categorical"),
        }
        return table, manifest


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    return ScenarioGenerator(cfg).generate()


def save_generated_scenario(scenario: Scenario, out_dir: str | Path, with_explanatory: bool = True) -> list[Path]:
    """
    Save the scenario to out_dir: observations.csv, forecasts.csv, truth_bias.csv, scenario.json and,
    if requested, explanatory.csv with explanatory_manifest.json.

    Returns:
    list[Path]
        The written files
    """
    out_dir = Path(out_dir)
    written = []

    path = out_dir / "observations.csv"
    store_dataset(scenario.obs, path)
    written.append(path)

    path = out_dir / "forecasts.csv"
    store_dataset(scenario.archive, path)
    written.append(path)

    path = out_dir / "truth_bias.csv"
    store_dataset(scenario.truth_bias, path, value_column="injected_bias")
    written.append(path)

    path = out_dir / "scenario.json"
    store_json(scenario.cfg, path)
    written.append(path)

    if with_explanatory:
        table, manifest = ScenarioGenerator(scenario.cfg).generate_explanatory()
        frame = table.reset_index()
        frame["date"] = [d.date().isoformat() for d in frame["date"]]
        path = out_dir / "explanatory.csv"
        store_frame(frame, path)
        written.append(path)

        path = out_dir / "explanatory_manifest.json"
        atomic_write_text(
            path, json.dumps({name: spec.model_dump() for name, spec in manifest.items()}, indent=2) + "\n"
        )
        written.append(path)

    logger.info(f"Saved scenario under {out_dir}")
    return written

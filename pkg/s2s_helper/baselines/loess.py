import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from statsmodels.nonparametric.smoothers_lowess import lowess

from s2s_helper import settings
from s2s_helper.correctors.training import LeakageGuard
from s2s_helper.errors import EmptyWindowError, MissingDataError
from s2s_helper.grid_core import FieldSeries, ForecastArchive, Grid, as_date, noleap_slots
from s2s_helper.pydantic_models.artifact_models import LoessCorrectionRecord
from s2s_helper.pydantic_models.config_models import TaskSpec

logger = logging.getLogger(__name__)

Mode = Literal["additive", "multiplicative"]


def loess_smooth(sequence: np.ndarray, fraction: float = settings.LOESS_FRACTION) -> np.ndarray:
    """
    Local linear regression of a day-of-year sequence on its index, tricube weights over the nearest
    `fraction` of the points. The sequence does not wrap around from December to January.
    """
    sequence = np.asarray(sequence, dtype=np.float64)
    days = np.arange(sequence.size, dtype=np.float64)
    return lowess(sequence, days, frac=fraction, it=0, delta=0.0, is_sorted=True, return_sorted=False)


@dataclass(frozen=True, eq=False)
class LoessCorrection:
    """
    Smoothed observation and forecast curves, shape (365, grid points), learned on dates before `cutoff`.
    """

    grid: Grid
    smoothed_obs: np.ndarray
    smoothed_forecasts: np.ndarray
    mode: Mode
    cutoff: int

    @property
    def correction(self) -> np.ndarray:
        if self.mode == "additive":
            return self.smoothed_obs - self.smoothed_forecasts
        ratio = self.smoothed_obs / np.maximum(self.smoothed_forecasts, settings.LOESS_EPSILON)
        return np.minimum(ratio, settings.LOESS_MAX_RATIO)

    def to_record(self) -> LoessCorrectionRecord:
        correction = self.correction
        return LoessCorrectionRecord(
            mode=self.mode,
            cutoff=as_date(self.cutoff),
            correction={k: [float(v) for v in correction[:, g]] for g, k in enumerate(self.grid.keys())},
        )


def _slot_means(series: FieldSeries, dates: np.ndarray) -> np.ndarray:
    values = series.rows_at(dates)
    slots = noleap_slots(dates)
    total = np.zeros((settings.LOESS_DAYS, series.grid.size))
    count = np.zeros_like(total)
    np.add.at(total, slots, values)
    np.add.at(count, slots, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return total / count


def loess_fit(obs: FieldSeries, forecasts: FieldSeries, cutoff, mode: Mode = "additive") -> LoessCorrection:
    """
    Average observations and forecasts per month-day over the paired dates strictly before cutoff,
    then smooth both 365-value sequences per grid point.

    Raises EmptyWindowError when a month-day has no training pair.
    """
    cutoff = as_date(cutoff).toordinal()
    dates = np.intersect1d(obs.ordinals, forecasts.ordinals)
    dates = dates[dates < cutoff]
    complete = np.isfinite(obs.rows_at(dates)).all(axis=1) & np.isfinite(forecasts.rows_at(dates)).all(axis=1)
    dates = dates[complete]
    if dates.size == 0:
        raise EmptyWindowError(f"no LOESS training pairs before {as_date(cutoff)}")
    obs_means = _slot_means(obs, dates)
    forecast_means = _slot_means(forecasts, dates)
    empty = np.flatnonzero(np.isnan(obs_means).any(axis=1))
    if empty.size:
        raise EmptyWindowError(
            f"{empty.size} month-day slots have no LOESS training pair before {as_date(cutoff)}, "
            f"first is day {int(empty[0]) + 1} of the year"
        )
    smoothed_obs = np.column_stack([loess_smooth(obs_means[:, g]) for g in range(obs.grid.size)])
    smoothed_forecasts = np.column_stack([loess_smooth(forecast_means[:, g]) for g in range(obs.grid.size)])
    return LoessCorrection(obs.grid, smoothed_obs, smoothed_forecasts, mode, cutoff)


def loess_apply(correction: LoessCorrection, raw: np.ndarray, t_star) -> np.ndarray:
    slot = int(noleap_slots([as_date(t_star)])[0])
    factor = correction.correction[slot]
    if correction.mode == "additive":
        return np.asarray(raw, dtype=np.float64) + factor
    return np.asarray(raw, dtype=np.float64) * factor


class LoessDebiasing:
    """
    LOESS debiasing refit once per target year, on the pairs observable at the year's first target date.
    Temperature corrections are additive, precipitation corrections multiplicative.
    """

    name = "loess"

    def __init__(self, task: TaskSpec, archive: ForecastArchive, obs: FieldSeries, guard: LeakageGuard | None = None):
        self.task = task
        self.archive = archive
        self.obs = obs
        self.guard = guard
        self.mode: Mode = "multiplicative" if task.is_precipitation else "additive"
        self.forecasts = archive.lead_series(task.lead) if archive.has_lead(task.lead) else None
        self.last_fit: LoessCorrection | None = None

    def cutoff(self, t_star: int) -> int:
        # pairs strictly before this date are observable at issuance of t*
        return t_star - self.task.lead - self.task.period_length

    def fit(self, t_star) -> LoessCorrection:
        if self.forecasts is None:
            raise MissingDataError(f"the archive has no lead {self.task.lead}", [("*", self.task.lead)])
        t_star = as_date(t_star).toordinal()
        correction = loess_fit(self.obs, self.forecasts, self.cutoff(t_star), self.mode)
        if self.guard is not None:
            self.guard.record_observations(t_star, correction.cutoff - 1)
        return correction

    def raw_forecast(self, targets) -> np.ndarray:
        targets = np.asarray(targets, dtype=np.int64)
        return self.archive.ensemble_mean_at(targets - self.task.lead, self.task.lead)

    def forecast(self, t_star) -> np.ndarray:
        t_star = as_date(t_star).toordinal()
        raw = self.raw_forecast(np.asarray([t_star]))[0]
        if not np.isfinite(raw).all():
            key = (as_date(t_star - self.task.lead), self.task.lead)
            raise MissingDataError(f"no raw forecast for {as_date(t_star)}; missing (issuance, lead) key: {key}", [key])
        if self.guard is not None:
            self.guard.record_issuances(t_star, t_star - self.task.lead)
        return loess_apply(self.fit(t_star), raw, t_star)

    def forecast_many(self, targets) -> np.ndarray:
        """
        Forecasts for many target dates (ordinals); rows are NaN without a raw forecast or when the
        year's fit fails for lack of training pairs.
        """
        targets = np.asarray(targets, dtype=np.int64)
        out = np.full((targets.size, self.obs.grid.size), np.nan)
        if self.forecasts is None or targets.size == 0:
            return out
        raw = self.raw_forecast(targets)
        years = np.asarray([as_date(int(t)).year for t in targets])
        for year in np.unique(years):
            rows = np.flatnonzero(years == year)
            first = int(targets[rows].min())
            try:
                correction = self.fit(first)
            except EmptyWindowError as e:
                logger.warning(f"LOESS has no fit for {year}: {e}")
                continue
            logger.debug(f"LOESS refit for {year} on pairs before {as_date(correction.cutoff)}")
            for i in rows:
                out[i] = loess_apply(correction, raw[i], int(targets[i]))
            if self.guard is not None:
                self.guard.record_observations(targets[rows], np.full(rows.size, correction.cutoff - 1))
            self.last_fit = correction
        if self.guard is not None:
            done = np.isfinite(out).all(axis=1)
            self.guard.record_issuances(targets[done], targets[done] - self.task.lead)
        return out

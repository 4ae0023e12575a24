import logging
from dataclasses import dataclass

import numpy as np

from s2s_helper import settings
from s2s_helper.correctors.training import LeakageGuard, observation_cutoff
from s2s_helper.errors import EmptyWindowError, MissingDataError
from s2s_helper.grid_core import FieldSeries, ForecastArchive, Grid, as_date, noleap_slots
from s2s_helper.pydantic_models.artifact_models import QuantileMapRecord
from s2s_helper.pydantic_models.config_models import TaskSpec

logger = logging.getLogger(__name__)


def quantile_rank(samples: np.ndarray, values) -> np.ndarray:
    """
    Rank in [0, 1] of values among the samples: the inverse of the linear-interpolation quantile
    function, with the midpoint of the position block for ties. A single sample has rank 0.5.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    n = x.size
    if n == 0:
        raise EmptyWindowError("quantile rank of an empty sample")
    if n == 1:
        return np.full(values.shape, 0.5)
    lo = np.searchsorted(x, values, side="left")
    hi = np.searchsorted(x, values, side="right")
    below = np.clip(lo - 1, 0, n - 1)
    above = np.clip(lo, 0, n - 1)
    gap = x[above] - x[below]
    with np.errstate(invalid="ignore", divide="ignore"):
        position = np.where(gap > 0, below + (values - x[below]) / gap, below)
    position = np.where(hi > lo, (lo + hi - 1) / 2, position)
    position = np.where((hi == lo) & (lo == 0), 0.0, position)
    position = np.where((hi == lo) & (lo == n), n - 1.0, position)
    return position / (n - 1)


@dataclass(frozen=True, eq=False)
class QuantileMapModel:
    """
    Sorted training forecasts and observations per (month-day, grid point); Feb 29 shares Feb 28.
    forecasts[slot] and observations[slot] have shape (pairs, grid points), sorted along the pair axis.
    """

    grid: Grid
    cutoff: int
    forecasts: dict[int, np.ndarray]
    observations: dict[int, np.ndarray]

    def samples(self, slot: int) -> tuple[np.ndarray, np.ndarray]:
        empty = np.zeros((0, self.grid.size))
        return self.forecasts.get(slot, empty), self.observations.get(slot, empty)

    def to_record(self) -> QuantileMapRecord:
        counts = np.zeros(self.grid.size, dtype=np.int64)
        for values in self.forecasts.values():
            counts += values.shape[0]
        return QuantileMapRecord(
            cutoff=as_date(self.cutoff), samples={k: int(n) for k, n in zip(self.grid.keys(), counts)}
        )


def _training_pairs(forecasts: FieldSeries, obs: FieldSeries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dates = np.intersect1d(forecasts.ordinals, obs.ordinals)
    f, y = forecasts.rows_at(dates), obs.rows_at(dates)
    complete = np.isfinite(f).all(axis=1) & np.isfinite(y).all(axis=1)
    return dates[complete], f[complete], y[complete]


def fit_quantile_map(forecasts: FieldSeries, obs: FieldSeries, cutoff) -> QuantileMapModel:
    """
    Collect the forecast/observation pairs with target date <= cutoff, grouped by month-day.
    """
    cutoff = as_date(cutoff).toordinal()
    dates, f, y = _training_pairs(forecasts, obs)
    keep = dates <= cutoff
    dates, f, y = dates[keep], f[keep], y[keep]
    slots = noleap_slots(dates) if dates.size else np.zeros(0, dtype=np.int64)
    sorted_forecasts, sorted_obs = {}, {}
    for slot in np.unique(slots):
        rows = slots == slot
        sorted_forecasts[int(slot)] = np.sort(f[rows], axis=0)
        sorted_obs[int(slot)] = np.sort(y[rows], axis=0)
    return QuantileMapModel(obs.grid, cutoff, sorted_forecasts, sorted_obs)


def map_point(forecast_samples: np.ndarray, obs_samples: np.ndarray, raw: float) -> float:
    """
    raw + Q_obs(r) - Q_fcst(r) with r the quantile rank of raw among the forecast samples,
    clipped to the 10%-90% band.
    """
    low, high = settings.QM_RANK_BOUNDS
    r = float(np.clip(quantile_rank(forecast_samples, raw), low, high))
    return float(raw + np.quantile(obs_samples, r) - np.quantile(forecast_samples, r))


def quantile_map(model: QuantileMapModel, raw: np.ndarray, t_star, variable: str = "tmp2m") -> np.ndarray:
    """
    Quantile-mapped forecast for t* from the training samples of its month-day. Precipitation is floored at 0.
    Raises EmptyWindowError when the month-day has no training pair.
    """
    t_star = as_date(t_star)
    slot = int(noleap_slots([t_star])[0])
    forecast_samples, obs_samples = model.samples(slot)
    if forecast_samples.shape[0] == 0:
        raise EmptyWindowError(f"no quantile mapping pairs for month-day {t_star:%m-%d} before {as_date(model.cutoff)}")
    raw = np.asarray(raw, dtype=np.float64)
    out = np.asarray(
        [map_point(forecast_samples[:, g], obs_samples[:, g], raw[g]) for g in range(raw.size)]
    )
    if variable == "precip":
        out = np.maximum(out, 0.0)
    return out


class QuantileMapping:
    """
    Progressive ensemble-mean quantile mapping: each target date uses the pairs of its month-day
    observable at issuance.
    """

    name = "qm"

    def __init__(self, task: TaskSpec, archive: ForecastArchive, obs: FieldSeries, guard: LeakageGuard | None = None):
        self.task = task
        self.archive = archive
        self.obs = obs
        self.guard = guard
        self.forecasts = archive.lead_series(task.lead) if archive.has_lead(task.lead) else None
        self.last_model: QuantileMapModel | None = None

    def fit(self, t_star) -> QuantileMapModel:
        if self.forecasts is None:
            raise MissingDataError(f"the archive has no lead {self.task.lead}", [("*", self.task.lead)])
        t_star = as_date(t_star).toordinal()
        cutoff = observation_cutoff(t_star, self.task.lead, self.task.period_length)
        return fit_quantile_map(self.forecasts, self.obs, cutoff)

    def raw_forecast(self, targets) -> np.ndarray:
        targets = np.asarray(targets, dtype=np.int64)
        return self.archive.ensemble_mean_at(targets - self.task.lead, self.task.lead)

    def forecast(self, t_star) -> np.ndarray:
        t_star = as_date(t_star).toordinal()
        raw = self.raw_forecast(np.asarray([t_star]))[0]
        if not np.isfinite(raw).all():
            key = (as_date(t_star - self.task.lead), self.task.lead)
            raise MissingDataError(f"no raw forecast for {as_date(t_star)}; missing (issuance, lead) key: {key}", [key])
        model = self.fit(t_star)
        if self.guard is not None:
            self.guard.record_observations(t_star, model.cutoff)
            self.guard.record_issuances(t_star, t_star - self.task.lead)
        return quantile_map(model, raw, t_star, self.task.variable)

    def forecast_many(self, targets) -> np.ndarray:
        """
        Forecasts for many target dates (ordinals); rows are NaN without a raw forecast or training pairs.
        """
        targets = np.asarray(targets, dtype=np.int64)
        out = np.full((targets.size, self.obs.grid.size), np.nan)
        if self.forecasts is None:
            return out
        raw = self.raw_forecast(targets)
        dates, f, y = _training_pairs(self.forecasts, self.obs)
        slots = noleap_slots(dates) if dates.size else np.zeros(0, dtype=np.int64)
        target_slots = noleap_slots(targets) if targets.size else np.zeros(0, dtype=np.int64)
        cutoffs = observation_cutoff(targets, self.task.lead, self.task.period_length)
        newest = np.full(targets.size, -1, dtype=np.int64)
        for i in range(targets.size):
            if not np.isfinite(raw[i]).all():
                continue
            rows = (slots == target_slots[i]) & (dates <= cutoffs[i])
            if not rows.any():
                continue
            newest[i] = dates[rows][-1]
            mapped = [map_point(f[rows, g], y[rows, g], raw[i, g]) for g in range(raw.shape[1])]
            out[i] = np.maximum(mapped, 0.0) if self.task.is_precipitation else mapped
        if self.guard is not None:
            self.guard.record_observations(targets, newest)
            self.guard.record_issuances(targets[np.isfinite(out).all(axis=1)], targets[np.isfinite(out).all(axis=1)] - self.task.lead)
        if targets.size:
            self.last_model = self.fit(int(targets[-1]))
        return out

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from s2s_helper import settings
from s2s_helper.errors import DomainError, EmptyWindowError
from s2s_helper.grid_core import (
    Climatology,
    FieldSeries,
    Grid,
    as_date,
    month_day_lookup,
    month_day_slots,
)
from s2s_helper.pydantic_models.artifact_models import SkillSummary

logger = logging.getLogger(__name__)


def skill(yhat: np.ndarray, y: np.ndarray, c: np.ndarray) -> float:
    """
    Uncentered anomaly correlation of forecast and observation anomalies with respect to c.
    NaN when either anomaly vector is all zero.
    """
    forecast_anomaly = np.asarray(yhat, dtype=np.float64) - c
    observed_anomaly = np.asarray(y, dtype=np.float64) - c
    norm = np.linalg.norm(forecast_anomaly) * np.linalg.norm(observed_anomaly)
    if norm == 0:
        return float("nan")
    return float(np.clip(np.dot(forecast_anomaly, observed_anomaly) / norm, -1.0, 1.0))


def _aligned(forecasts: FieldSeries, obs: FieldSeries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if forecasts.grid != obs.grid:
        raise DomainError("forecasts and observations are on different grids")
    common = np.intersect1d(forecasts.ordinals, obs.ordinals)
    return common, forecasts.rows_at(common), obs.rows_at(common)


def skill_series(forecasts: FieldSeries, obs: FieldSeries, clim: Climatology) -> pd.Series:
    """
    Per-date skill over the dates present in both series with complete rows; NaN for undefined dates.
    """
    dates, yhat, y = _aligned(forecasts, obs)
    complete = np.isfinite(yhat).all(axis=1) & np.isfinite(y).all(axis=1)
    dates, yhat, y = dates[complete], yhat[complete], y[complete]
    c = clim.series(dates) if dates.size else np.zeros_like(y)
    forecast_anomaly, observed_anomaly = yhat - c, y - c
    norm = np.linalg.norm(forecast_anomaly, axis=1) * np.linalg.norm(observed_anomaly, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(norm > 0, np.einsum("tg,tg->t", forecast_anomaly, observed_anomaly) / norm, np.nan)
    index = pd.Index([as_date(int(o)) for o in dates], name="date")
    return pd.Series(np.clip(values, -1.0, 1.0), index=index, name="skill")


def bootstrap_ci(
    values: Sequence[float],
    level: float = settings.CONFIDENCE_LEVEL,
    resamples: int = settings.BOOTSTRAP_RESAMPLES,
    seed: int = 0,
) -> tuple[float, float]:
    """
    Percentile bootstrap interval of the mean at the (1 - level)/2 and (1 + level)/2 quantiles.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyWindowError("bootstrap needs at least one value")
    if resamples < 1:
        raise DomainError("bootstrap needs at least one resample")
    rng = np.random.default_rng(seed)
    means = np.empty(resamples)
    # bounded memory for long series
    step = max(1, 2_000_000 // values.size)
    for start in range(0, resamples, step):
        stop = min(start + step, resamples)
        means[start:stop] = values[rng.integers(0, values.size, size=(stop - start, values.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def mean_skill(
    skills: pd.Series,
    level: float | None = settings.CONFIDENCE_LEVEL,
    resamples: int = settings.BOOTSTRAP_RESAMPLES,
    seed: int = 0,
) -> SkillSummary:
    """
    Mean over the defined per-date skills with per-season means and a bootstrap interval.
    Raises EmptyWindowError when no date has a defined skill.
    """
    defined = skills.dropna()
    if defined.empty:
        raise EmptyWindowError("no date has a defined skill")
    seasons = pd.Series([settings.SEASONS[as_date(d).month] for d in defined.index], index=defined.index)
    season_means = defined.groupby(seasons).mean()
    ci = bootstrap_ci(defined.to_numpy(), level, resamples, seed) if level is not None else (None, None)
    return SkillSummary(
        per_date={as_date(d): (None if np.isnan(v) else float(v)) for d, v in skills.items()},
        mean=float(defined.mean()),
        n_dates=int(defined.size),
        n_undefined=int(skills.size - defined.size),
        seasons={str(k): float(v) for k, v in season_means.items()},
        ci_low=ci[0],
        ci_high=ci[1],
        level=level,
    )


def spatial_skill(forecasts: FieldSeries, obs: FieldSeries, clim: Climatology) -> np.ndarray:
    """
    Per grid point anomaly correlation across the common dates; NaN where a temporal anomaly is all zero.
    """
    dates, yhat, y = _aligned(forecasts, obs)
    c = clim.series(dates) if dates.size else np.zeros_like(y)
    present = np.isfinite(yhat) & np.isfinite(y)
    forecast_anomaly = np.where(present, yhat - c, 0.0)
    observed_anomaly = np.where(present, y - c, 0.0)
    norm = np.linalg.norm(forecast_anomaly, axis=0) * np.linalg.norm(observed_anomaly, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(norm > 0, (forecast_anomaly * observed_anomaly).sum(axis=0) / norm, np.nan)
    return np.clip(values, -1.0, 1.0)


def fraction_above(spatial: np.ndarray, threshold: float) -> float:
    """
    Fraction of the grid points with a defined value strictly above threshold.
    """
    spatial = np.asarray(spatial, dtype=np.float64)
    defined = spatial[np.isfinite(spatial)]
    if defined.size == 0:
        raise EmptyWindowError("spatial skill is undefined at every grid point")
    return float(np.count_nonzero(defined > threshold) / defined.size)


def fraction_above_curve(spatial: np.ndarray, thresholds: Sequence[float] = settings.SKILL_THRESHOLDS) -> pd.DataFrame:
    return pd.DataFrame(
        {"threshold": list(thresholds), "fraction": [fraction_above(spatial, t) for t in thresholds]}
    )


def bias_map(forecasts: FieldSeries, obs: FieldSeries) -> np.ndarray:
    """
    Per grid point mean of forecast minus observation over the common dates.
    """
    _, yhat, y = _aligned(forecasts, obs)
    with np.errstate(invalid="ignore"):
        return np.nanmean(yhat - y, axis=0) if y.size else np.full(obs.grid.size, np.nan)


def grid_frame(grid: Grid, values: np.ndarray, column: str = "value") -> pd.DataFrame:
    """
    lat,lon,value table of a grid vector.
    """
    return pd.DataFrame({"lat": grid.lats, "lon": grid.lons, column: np.asarray(values, dtype=np.float64)})


def geographic_loss(yhat, y, loss: str = "RMSE"):
    """
    RMSE or MSE across grid points (last axis). Returns a float for vectors, an array for stacks.
    """
    error = np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    mse = np.mean(error**2, axis=-1)
    if loss == "MSE":
        value = mse
    elif loss == "RMSE":
        value = np.sqrt(mse)
    else:
        raise DomainError(f"unknown loss {loss!r}")
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    """
    Ensemble members of one (date, grid point) with the right-continuous step CDF.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.sort(np.asarray(self.values, dtype=np.float64).reshape(-1))
        if values.size == 0:
            raise EmptyWindowError("an empirical distribution needs at least one member")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.size

    def cdf(self, x):
        return np.searchsorted(self.values, x, side="right") / self.values.size


def distributions(members: np.ndarray) -> list[EmpiricalDistribution]:
    """
    One distribution per grid point from a (members, grid points) array.
    """
    members = np.asarray(members, dtype=np.float64)
    return [EmpiricalDistribution(members[:, g]) for g in range(members.shape[1])]


def crps(dist: EmpiricalDistribution, y: float) -> float:
    """
    CRPS of an empirical distribution: mean |X - y| - 1/2 mean over pairs |X_i - X_j|.
    """
    x = dist.values
    return float(np.mean(np.abs(x - y)) - 0.5 * np.mean(np.abs(x[:, None] - x[None, :])))


def crps_ensemble(members: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    CRPS for every grid point (and date) at once. members has the member axis second to last:
    (members, grid points) with y of shape (grid points,), or (dates, members, grid points) with y (dates, grid points).
    """
    members = np.asarray(members, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = members.shape[-2]
    ordered = np.sort(members, axis=-2)
    weights = (2 * np.arange(1, n + 1) - n - 1).reshape((n, 1))
    spread = (ordered * weights).sum(axis=-2) / n**2
    return np.abs(members - np.expand_dims(y, -2)).mean(axis=-2) - spread


@dataclass(frozen=True, eq=False)
class TercileThresholds:
    """
    Second tercile of the base-period observations per (month, day, grid point), 366-slot calendar.
    """

    grid: Grid
    table: np.ndarray
    base_period: tuple[int, int]

    def series(self, dates) -> np.ndarray:
        return month_day_lookup(self.table, dates)[0]


def tercile_thresholds(
    obs: FieldSeries, base_period: tuple[int, int], quantile: float = settings.BSS_QUANTILE
) -> TercileThresholds:
    years = np.asarray([d.year for d in obs.dates])
    keep = (years >= base_period[0]) & (years <= base_period[1])
    if not keep.any():
        raise EmptyWindowError(f"no observations in the base period {base_period[0]}-{base_period[1]}")
    frame = pd.DataFrame(obs.values[keep])
    frame["slot"] = month_day_slots(obs.ordinals[keep])
    table = frame.groupby("slot").quantile(quantile).reindex(range(366))
    return TercileThresholds(obs.grid, table.to_numpy(dtype=np.float64), tuple(base_period))


def brier_skill_score(members, y: np.ndarray, x: np.ndarray) -> float:
    """
    Brier skill score of the event y <= x against the climatological probability 2/3.

    members is a list of EmpiricalDistribution (one per grid point) or an array with the member
    axis second to last; y and x are grid vectors (or date-by-grid stacks).
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if isinstance(members, (list, tuple)):
        probability = np.asarray([d.cdf(threshold) for d, threshold in zip(members, x)], dtype=np.float64)
    else:
        members = np.asarray(members, dtype=np.float64)
        probability = (members <= np.expand_dims(x, -2)).mean(axis=-2)
    outcome = (y <= x).astype(np.float64)
    if outcome.size == 0:
        raise EmptyWindowError("no outcomes to score")
    reference = np.mean((settings.BSS_QUANTILE - outcome) ** 2)
    if reference == 0:
        raise EmptyWindowError("Brier reference score is zero")
    return float(1.0 - np.mean((probability - outcome) ** 2) / reference)


def probabilistic_scores(
    members: np.ndarray, obs: np.ndarray, thresholds: np.ndarray, dates: Sequence
) -> pd.DataFrame:
    """
    Per-date mean CRPS and Brier score of ensembles of shape (dates, members, grid points).
    """
    scores = crps_ensemble(members, obs)
    probability = (members <= thresholds[:, None, :]).mean(axis=1)
    brier = ((probability - (obs <= thresholds)) ** 2).mean(axis=1)
    return pd.DataFrame({"date": list(dates), "crps": scores.mean(axis=1), "brier": brier})


def relative_improvement(model_mean: float, baseline_mean: float) -> float:
    """
    Percentage improvement 100 (m - b) / |b|.
    """
    if baseline_mean == 0:
        raise DomainError("relative improvement over a zero baseline is undefined")
    return 100.0 * (model_mean - baseline_mean) / abs(baseline_mean)

import logging
from typing import Sequence

import numpy as np
from scipy import sparse

from s2s_helper import settings
from s2s_helper.correctors.training import LeakageGuard, newest_selected, observation_cutoff
from s2s_helper.errors import ConfigError, DomainError, EmptyWindowError, MissingDataError
from s2s_helper.grid_core import (
    ABSENT,
    ERA_CODES,
    FieldSeries,
    ForecastArchive,
    as_date,
    day_diff_days,
    noleap_slots,
    year_diff_days,
)
from s2s_helper.pydantic_models.config_models import ReforecastProtocol, TaskSpec

logger = logging.getLogger(__name__)

_CHUNK = 512


def _era(protocol: ReforecastProtocol) -> str | None:
    return None if protocol.era == "any" else protocol.era


def issuance_averaged(
    archive: ForecastArchive,
    task: TaskSpec,
    dates,
    count: int = 1,
    stride: int = 1,
    era: str | None = None,
) -> np.ndarray:
    """
    Mean over k < count of the ensemble means issued at t - l* - k * stride with lead l* + k * stride,
    for target dates t (ordinals). Cells outside the archive are skipped; NaN without any cell.
    """
    dates = np.asarray(dates, dtype=np.int64)
    total = np.zeros((dates.size, archive.grid.size))
    n_cells = np.zeros_like(total)
    for k in range(count):
        lead = task.lead + k * stride
        if not archive.has_lead(lead):
            continue
        means = archive.ensemble_mean_at(dates - lead, lead, era)
        present = np.isfinite(means)
        total += np.where(present, means, 0.0)
        n_cells += present
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_cells > 0, total / np.maximum(n_cells, 1), np.nan)


def match_matrix(
    protocol: ReforecastProtocol,
    targets: np.ndarray,
    candidates: np.ndarray,
    cutoff_offset: int,
) -> sparse.csr_matrix:
    """
    M[i, j] = 1 when candidate date j matches target i under the protocol and is observable
    (candidate <= target - cutoff_offset).
    """
    targets = np.asarray(targets, dtype=np.int64)
    candidates = np.asarray(candidates, dtype=np.int64)
    candidate_slots = noleap_slots(candidates) if candidates.size else np.zeros(0, dtype=np.int64)
    candidate_years = np.asarray([as_date(int(c)).year for c in candidates], dtype=np.int64)
    blocks = []
    for start in range(0, max(targets.size, 1), _CHUNK):
        block = targets[start:start + _CHUNK]
        delta = block[:, None] - candidates[None, :]
        inside = delta >= cutoff_offset
        if protocol.exact_month_day:
            first, last = protocol.hindcast_years
            same_day = noleap_slots(block)[:, None] == candidate_slots[None, :] if block.size else inside
            inside &= same_day & (candidate_years >= first)[None, :] & (candidate_years <= last)[None, :]
        else:
            years = year_diff_days(delta)
            inside &= (years >= 1) & (years <= protocol.lookback_years) & (day_diff_days(delta) <= protocol.day_window)
        blocks.append(sparse.csr_matrix(inside.astype(np.float64)))
    return sparse.vstack(blocks, format="csr")


def operational_debias(
    protocol: ReforecastProtocol,
    task: TaskSpec,
    archive: ForecastArchive,
    obs: FieldSeries,
    t_star,
) -> np.ndarray:
    """
    Raw ensemble forecast for t* minus the mean matched reforecast plus the mean matched observation.
    Raises EmptyWindowError when no date matches.
    """
    return OperationalDebiasing(task, archive, obs, protocol).forecast(t_star)


class OperationalDebiasing:
    """
    Mean debiasing against reforecasts of matched past dates (ECMWF day window or CFSv2 hindcast month-day).
    """

    name = "opdebias"

    def __init__(
        self,
        task: TaskSpec,
        archive: ForecastArchive,
        obs: FieldSeries,
        protocol: ReforecastProtocol | None = None,
        guard: LeakageGuard | None = None,
    ):
        self.task = task
        self.archive = archive
        self.obs = obs
        self.protocol = protocol or ReforecastProtocol.ecmwf()
        self.guard = guard
        reforecasts = issuance_averaged(
            archive, task, obs.ordinals, self.protocol.issuance_count, self.protocol.issuance_stride, _era(self.protocol)
        )
        usable = obs.complete_rows() & np.isfinite(reforecasts).all(axis=1)
        self._candidates = obs.ordinals[usable]
        self._offsets = obs.values[usable] - reforecasts[usable]

    def raw_forecast(self, targets) -> np.ndarray:
        return issuance_averaged(
            self.archive, self.task, targets, self.protocol.issuance_count, self.protocol.issuance_stride
        )

    def _matches(self, targets: np.ndarray) -> sparse.csr_matrix:
        return match_matrix(
            self.protocol, targets, self._candidates, self.task.lead + self.task.period_length + 1
        )

    def forecast_many(self, targets) -> np.ndarray:
        """
        Forecasts for many target dates (ordinals); rows are NaN without a raw forecast or a matched date.
        """
        targets = np.asarray(targets, dtype=np.int64)
        matches = self._matches(targets)
        n_matched = np.asarray(matches.sum(axis=1)).reshape(-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            offsets = (matches @ self._offsets) / n_matched[:, None]
        offsets[n_matched == 0] = np.nan
        if self.guard is not None:
            newest = newest_selected(matches, self._candidates)
            self.guard.record_observations(targets, newest)
            self.guard.record_issuances(targets, targets - self.task.lead)
        return self.raw_forecast(targets) + offsets

    def forecast(self, t_star) -> np.ndarray:
        t_star = as_date(t_star).toordinal()
        raw = self.raw_forecast(np.asarray([t_star]))[0]
        if not np.isfinite(raw).all():
            missing = [
                (as_date(t_star - self.task.lead - k * self.protocol.issuance_stride), self.task.lead + k * self.protocol.issuance_stride)
                for k in range(self.protocol.issuance_count)
            ]
            raise MissingDataError(f"no raw forecast for {as_date(t_star)}; missing (issuance, lead) keys: {missing}", missing)
        selected = self._matches(np.asarray([t_star])).indices
        if selected.size == 0:
            raise EmptyWindowError(
                f"no reforecast dates match {as_date(t_star)} before "
                f"{as_date(observation_cutoff(t_star, self.task.lead, self.task.period_length))}"
            )
        if self.guard is not None:
            self.guard.record_observations(t_star, self._candidates[selected])
            self.guard.record_issuances(t_star, t_star - self.task.lead)
        logger.debug(f"Operational debiasing of {as_date(t_star)} over {selected.size} matched dates")
        return raw + self._offsets[selected].mean(axis=0)


def _most_recent(model: ForecastArchive, issuances: np.ndarray, lead: int, lookback: int) -> np.ndarray:
    """
    For every cutoff issuance i, the ensemble mean of the newest issuance j in [i - lookback, i]
    forecasting the target i + lead (lead i + lead - j).
    """
    out = np.full((issuances.size, model.grid.size), np.nan)
    for offset in range(lookback + 1):
        pending = ~np.isfinite(out).all(axis=1)
        if not pending.any():
            break
        means = model.ensemble_mean_at(issuances - offset, lead + offset)
        found = pending & np.isfinite(means).all(axis=1)
        out[found] = means[found]
    return out


def multimodel_mean(
    models: Sequence[ForecastArchive],
    task: TaskSpec,
    t_star,
    lookback: int = settings.MULTIMODEL_LOOKBACK_DAYS,
) -> np.ndarray:
    """
    Mean over models of each model's most recent forecast for t* issued within `lookback` days
    before t* - l*. Models without one are skipped; raises MissingDataError when all are missing.
    """
    t_star = as_date(t_star).toordinal()
    cutoff = np.asarray([t_star - task.lead])
    forecasts = [_most_recent(model, cutoff, task.lead, lookback)[0] for model in models]
    available = [f for f in forecasts if np.isfinite(f).all()]
    if not available:
        raise MissingDataError(
            f"no model has a forecast for {as_date(t_star)} issued within {lookback} days of {as_date(int(cutoff[0]))}",
            [as_date(t_star)],
        )
    return np.mean(available, axis=0)


def build_multimodel_archive(
    models: Sequence[ForecastArchive],
    issuances=None,
    leads=None,
    lookback: int = settings.MULTIMODEL_LOOKBACK_DAYS,
) -> ForecastArchive:
    """
    Single-member archive holding the multimodel mean for every (issuance, lead): the mean over models
    of the most recent forecast of issuance + lead issued within `lookback` days before the issuance.
    Defaults to the union of the models' issuances and leads.
    """
    if not models:
        raise ConfigError("the multimodel mean needs at least one model")
    grid = models[0].grid
    if any(model.grid != grid for model in models):
        raise DomainError("models of a multimodel mean must share one grid")
    if issuances is None:
        issuances = np.unique(np.concatenate([model.issuances for model in models]))
    if leads is None:
        leads = np.unique(np.concatenate([model.leads for model in models]))
    issuances = np.asarray(issuances, dtype=np.int64)
    leads = np.asarray(leads, dtype=np.int64)
    values = np.full((issuances.size, leads.size, 1, grid.size), np.nan)
    for j, lead in enumerate(leads):
        forecasts = np.stack([_most_recent(model, issuances, int(lead), lookback) for model in models])
        present = np.isfinite(forecasts).all(axis=2)
        n_models = present.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            values[:, j, 0] = np.where(present[..., None], forecasts, 0.0).sum(axis=0) / n_models[:, None]
    era = np.where(np.isfinite(values).all(axis=3), ERA_CODES["forecast"], ABSENT).astype(np.int8)
    logger.info(f"Built multimodel mean of {len(models)} models over {issuances.size} issuances and {leads.size} leads")
    return ForecastArchive(
        grid, issuances, leads, np.asarray([settings.DETERMINISTIC_MEMBER]), values, era,
        variable=models[0].variable, units=models[0].units,
    )
